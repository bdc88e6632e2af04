import numpy as np
import pytest
from hypothesis import given, strategies as st

from nvwrite.feedback import (
    BinClass,
    ControllerState,
    FeedbackPolicy,
    Phase,
    PolicyKind,
    classify_bin,
    estimate_emitter_count,
    run_site,
    step,
    trace_alternations,
    trace_phase_sequence,
)
from nvwrite.kmc import BindingParams, DefectWorld
from nvwrite.laser import NonlinearityParams, PulsePlan
from nvwrite.lattice import LatticeSite, WorldConfig, neighbors
from nvwrite.photophysics import EmitterModel, MonitorTrace

FS = FeedbackPolicy.first_stable()
EM = EmitterModel()
Q, S, W = BinClass.QUIET, BinClass.SIGNAL, BinClass.IN_WINDOW


# ---------------------------------------------------------------- policies and bins
def test_policy_validation_and_names():
    assert FS.describe() == "FirstStable" and FS.stability_bins == 25
    assert FeedbackPolicy.intensity_window(11000, 15000).describe() == "IntensityWindow(11000,15000)"
    assert FeedbackPolicy.count_target(2).describe() == "CountTarget(2)"
    assert FeedbackPolicy("FirstStable").kind is PolicyKind.FIRST_STABLE
    with pytest.raises(ValueError):
        FeedbackPolicy.intensity_window(15000, 11000)
    with pytest.raises(ValueError):
        FeedbackPolicy(PolicyKind.COUNT_TARGET)
    with pytest.raises(ValueError):
        FeedbackPolicy(stability_bins=0)


def test_classify_thresholds():
    bg, t = 1000.0, 0.02
    # threshold at bg + 3000 = 4000 counts/s = 80 counts per bin
    assert classify_bin(80, t, FS, bg) is Q
    assert classify_bin(81, t, FS, bg) is S
    assert classify_bin(0, t, FS, bg) is Q
    with pytest.raises(ValueError):
        classify_bin(-1, t, FS, bg)


def test_classify_intensity_window_uses_net_rate():
    pol = FeedbackPolicy.intensity_window(8000, 11000)
    bg, t = 1000.0, 0.02
    assert classify_bin(int(0.02 * 9000), t, pol, bg) is W  # 9000 total, 8000 net
    assert classify_bin(int(0.02 * 12000), t, pol, bg) is W
    assert classify_bin(int(0.02 * 12050), t, pol, bg) is S
    assert classify_bin(int(0.02 * 8500), t, pol, bg) is S
    assert classify_bin(10, t, pol, bg) is Q


def test_count_target():
    assert estimate_emitter_count(0.0, EM) == 0
    assert estimate_emitter_count(500.0, EM) == 1
    assert estimate_emitter_count(11250.0, EM) == 1
    assert estimate_emitter_count(2 * 11250.0, EM) == 2
    pol = FeedbackPolicy.count_target(2)
    assert classify_bin(int(0.02 * (1000 + 12000)), 0.02, pol, 1000.0, EM) is S
    assert classify_bin(int(0.02 * (1000 + 23000)), 0.02, pol, 1000.0, EM) is W


# ---------------------------------------------------------------- state machine
def run(classes, policy=FS, **kw):
    st_ = ControllerState(Phase.SEEDED)
    out = []
    for c in classes:
        st_ = step(st_, c, policy, **kw)
        out.append(st_)
        if st_.terminal:
            break
    return out


def test_quiet_then_intermittent_then_done():
    seq = [Q] * 5 + [S, Q, S, S, Q] + [S] * 25
    states = run(seq)
    phases = [s.phase for s in states]
    assert phases[:5] == [Phase.MONITORING] * 5
    assert phases[5] is Phase.INTERMITTENT
    assert phases[6] is Phase.INTERMITTENT  # a quiet bin after signal stays intermittent
    assert phases[8] is Phase.STABLE_CANDIDATE
    assert phases[-1] is Phase.DONE
    assert len(states) == len(seq)
    assert states[-1].alternations == 5


def test_qualifying_run_resets():
    states = run([S] * 24 + [Q] + [S] * 24)
    assert not states[-1].terminal
    assert states[-1].bins_in_window == 24


def test_in_window_only_counts_for_window_policies():
    pol = FeedbackPolicy.intensity_window(11000, 15000)
    states = run([S] * 30, policy=pol)
    assert states[-1].phase is Phase.INTERMITTENT and states[-1].bins_in_window == 0
    states = run([W] * 25, policy=pol)
    assert states[-1].phase is Phase.DONE


def test_terminal_state_rejects_steps():
    done = run([S] * 25)[-1]
    with pytest.raises(RuntimeError):
        step(done, S, FS)


def test_damage_and_budget_abort():
    s = step(ControllerState(Phase.SEEDED), Q, FS, pulses=20, damage=True)
    assert s.phase is Phase.ABORTED and s.abort_cause == "DAMAGE"
    states = run([Q] * 10, pulses=20, max_pulses=100)
    assert len(states) == 5
    assert states[-1].phase is Phase.ABORTED and states[-1].abort_cause == "BUDGET"
    assert states[-1].pulses_used == 100


def test_done_wins_over_budget_in_same_bin():
    states = run([S] * 25, pulses=20, max_pulses=500)
    assert states[-1].phase is Phase.DONE


@given(st.lists(st.sampled_from([Q, S]), min_size=1, max_size=200), st.integers(1, 30))
def test_controller_invariants(classes, k):
    pol = FeedbackPolicy.first_stable(stability_bins=k)
    states = run(classes, policy=pol)
    seen = classes[: len(states)]
    flips = sum((a is Q) != (b is Q) for a, b in zip(seen, seen[1:]))
    assert states[-1].alternations == flips
    # Done exactly when the trailing run of Signal bins first reaches k
    run_len = 0
    for c, s in zip(seen, states):
        run_len = run_len + 1 if c is S else 0
        assert s.bins_in_window == run_len
        assert (s.phase is Phase.DONE) == (run_len >= k)


# ---------------------------------------------------------------- whole sites
FROZEN = NonlinearityParams(e50_v=1e9, e50_i=1e9)
QUIET_BOX = WorldConfig(bounds=(400, 400, 400), nitrogen_ppm=0.0)


def test_site_with_prebuilt_nv_finishes_after_stability_bins():
    w = DefectWorld(config=QUIET_BOX, nonlinearity=FROZEN, rng=1)
    n = LatticeSite(0, 0, 0, 0)
    w.add_nitrogen(n)
    w.add_vacancy(neighbors(n)[0])
    res = run_site(w, PulsePlan(seed_energy=0.0), FS, EM, rng=2)
    assert res.outcome == "Done" and res.done
    assert res.n_nv_truth == 1 and res.n_nv_inferred == 1
    assert len(res.trace) == 25
    assert res.pulses_used == 1 + 25 * 20  # the seed pulse counts
    assert trace_phase_sequence(res.trace) == ["Intermittent", "StableCandidate", "Done"]
    lo, hi = EM.window(w.nv_records()[0].orientation)
    assert lo <= res.nv_rates[0] <= hi


def test_empty_site_runs_out_of_budget():
    w = DefectWorld(config=QUIET_BOX, nonlinearity=FROZEN, rng=1)
    res = run_site(w, PulsePlan(seed_energy=0.0, max_pulses=2000), FS, EM, rng=2)
    assert res.outcome == "Aborted:BUDGET"
    assert res.n_nv_truth == 0 and res.n_nv_inferred == 0
    assert len(res.trace) == 100
    assert set(res.trace.states[:-1]) == {"Monitoring:Quiet"}
    assert res.trace.states[-1] == "Aborted:Quiet"


def test_damaged_site_aborts():
    w = DefectWorld(config=QUIET_BOX, binding=BindingParams(damage_threshold=0), nonlinearity=FROZEN, rng=1)
    w.add_vacancy(LatticeSite(0, 0, 0, 0))
    res = run_site(w, PulsePlan(seed_energy=0.0), FS, EM, rng=2)
    assert res.outcome == "Aborted:DAMAGE"
    assert len(res.trace) == 1


def test_run_site_is_deterministic():
    def go():
        w = DefectWorld(config=WorldConfig(nitrogen_ppm=300.0), rng=5)
        return run_site(w, PulsePlan(max_pulses=4000), FS, EM, rng=6)

    a, b = go(), go()
    assert a.outcome == b.outcome and a.events == b.events
    np.testing.assert_array_equal(a.trace.counts, b.trace.counts)
    assert a.trace.states == b.trace.states


def test_trace_helpers():
    tr = MonitorTrace(0.02)
    labels = ["Monitoring:Quiet", "Monitoring:Quiet", "Intermittent:Signal", "Intermittent:Quiet",
              "Intermittent:Signal", "StableCandidate:Signal", "Done:Signal"]
    for i, s in enumerate(labels):
        tr.append(0.02 * (i + 1), 0, 20 * (i + 1), s)
    assert trace_phase_sequence(tr) == ["Monitoring", "Intermittent", "StableCandidate", "Done"]
    assert trace_alternations(tr) == 3
