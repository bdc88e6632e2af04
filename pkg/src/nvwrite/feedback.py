"""Closed-loop termination of the diffusion pulse train.

Pulsing and monitoring are interleaved synchronously: each 20 ms bin at 1 kHz
covers 20 diffusion pulses, after which the binned photon count is classified
and the controller steps once.  Expected counts in a bin are the background
plus, for every NV record, its rate times the time it spent bound during the
bin, so a complex that unbinds half way through contributes half its rate.

Trace annotations have the form ``"<phase>:<bin class>"``, for example
``"Intermittent:Quiet"``, so the phase sequence and the bin-level
Signal/Quiet alternations can both be read back from a saved trace.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .kmc import DefectWorld, Event
from .laser import PulsePlan
from .lattice import crystal_to_lab, to_crystal
from .photophysics import EmitterModel, MonitorTrace, nv_rates


class PolicyKind(enum.Enum):
    FIRST_STABLE = "FirstStable"
    INTENSITY_WINDOW = "IntensityWindow"
    COUNT_TARGET = "CountTarget"


class BinClass(enum.Enum):
    QUIET = "Quiet"
    SIGNAL = "Signal"
    IN_WINDOW = "InWindow"


class Phase(enum.Enum):
    IDLE = "Idle"
    SEEDED = "Seeded"
    MONITORING = "Monitoring"
    INTERMITTENT = "Intermittent"
    STABLE_CANDIDATE = "StableCandidate"
    DONE = "Done"
    ABORTED = "Aborted"

    @property
    def terminal(self) -> bool:
        return self in (Phase.DONE, Phase.ABORTED)


@dataclass(frozen=True)
class FeedbackPolicy:
    """When to stop pulsing.

    ``lo``/``hi`` bound the emitter rate (counts/s above background) for
    IntensityWindow; ``target`` is the emitter count for CountTarget.
    """

    kind: PolicyKind = PolicyKind.FIRST_STABLE
    lo: float | None = None
    hi: float | None = None
    target: int | None = None
    stability_bins: int = 25
    detect_threshold: float = 3000.0  # counts/s above background

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if self.stability_bins < 1:
            raise ValueError("stability_bins must be >= 1")
        if self.detect_threshold < 0:
            raise ValueError("detect_threshold must be non-negative")
        if self.kind is PolicyKind.INTENSITY_WINDOW:
            if self.lo is None or self.hi is None or not self.lo < self.hi:
                raise ValueError("IntensityWindow needs lo < hi")
        if self.kind is PolicyKind.COUNT_TARGET:
            if self.target is None or self.target < 1:
                raise ValueError("CountTarget needs target >= 1")

    @classmethod
    def first_stable(cls, **kw) -> "FeedbackPolicy":
        return cls(PolicyKind.FIRST_STABLE, **kw)

    @classmethod
    def intensity_window(cls, lo: float, hi: float, **kw) -> "FeedbackPolicy":
        return cls(PolicyKind.INTENSITY_WINDOW, lo=float(lo), hi=float(hi), **kw)

    @classmethod
    def count_target(cls, n: int, **kw) -> "FeedbackPolicy":
        return cls(PolicyKind.COUNT_TARGET, target=int(n), **kw)

    @property
    def qualifying(self) -> BinClass:
        return BinClass.IN_WINDOW if self.kind is not PolicyKind.FIRST_STABLE else BinClass.SIGNAL

    def describe(self) -> str:
        if self.kind is PolicyKind.INTENSITY_WINDOW:
            return f"IntensityWindow({self.lo:g},{self.hi:g})"
        if self.kind is PolicyKind.COUNT_TARGET:
            return f"CountTarget({self.target})"
        return "FirstStable"


def estimate_emitter_count(net_rate: float, emitter: EmitterModel) -> int:
    """Number of NVs that best explains a background-subtracted rate.

    Rates are quantised against the mean per-NV rate of the two orientation
    windows; any rate above zero counts as at least one emitter.
    """
    if net_rate <= 0:
        return 0
    unit = 0.5 * (np.mean(emitter.in_plane_window) + np.mean(emitter.out_of_plane_window))
    return max(1, int(np.floor(net_rate / unit + 0.5)))


def classify_bin(
    counts: int,
    bin_duration: float,
    policy: FeedbackPolicy,
    background: float,
    emitter: EmitterModel | None = None,
) -> BinClass:
    """Quiet, Signal or InWindow for one monitor bin.

    The rate estimate is ``counts / bin_duration``.  A bin is Signal when the
    estimate exceeds ``background + detect_threshold``.  It is InWindow when,
    in addition, the background-subtracted rate lies in ``[lo, hi]``
    (IntensityWindow) or its emitter-count estimate reaches the target
    (CountTarget).
    """
    if counts < 0:
        raise ValueError("counts must be non-negative")
    rate = counts / bin_duration
    if rate <= background + policy.detect_threshold:
        return BinClass.QUIET
    net = rate - background
    if policy.kind is PolicyKind.INTENSITY_WINDOW:
        if policy.lo <= net <= policy.hi:
            return BinClass.IN_WINDOW
    elif policy.kind is PolicyKind.COUNT_TARGET:
        if estimate_emitter_count(net, emitter or EmitterModel()) >= policy.target:
            return BinClass.IN_WINDOW
    return BinClass.SIGNAL


@dataclass(frozen=True)
class ControllerState:
    phase: Phase = Phase.IDLE
    bins_in_window: int = 0
    pulses_used: int = 0
    alternations: int = 0
    last_class: BinClass | None = None
    abort_cause: str | None = None

    @property
    def terminal(self) -> bool:
        return self.phase.terminal


def step(
    state: ControllerState,
    classification: BinClass,
    policy: FeedbackPolicy,
    pulses: int = 0,
    max_pulses: int | None = None,
    damage: bool = False,
) -> ControllerState:
    """Advance the controller by one classified bin.

    ``pulses`` is the number of pulses delivered during the bin.  Damage, or
    a pulse budget used up without reaching Done, aborts the site.
    """
    if state.terminal:
        raise RuntimeError(f"controller already terminated ({state.phase.value})")
    classification = BinClass(classification)
    used = state.pulses_used + int(pulses)
    alternations = state.alternations
    if state.last_class is not None and (state.last_class is BinClass.QUIET) != (classification is BinClass.QUIET):
        alternations += 1

    qualifies = classification is BinClass.IN_WINDOW or (
        policy.qualifying is BinClass.SIGNAL and classification is BinClass.SIGNAL
    )
    phase = state.phase
    if phase in (Phase.IDLE, Phase.SEEDED):
        phase = Phase.MONITORING
    if qualifies:
        bins = state.bins_in_window + 1
        if bins >= policy.stability_bins:
            phase = Phase.DONE
        elif bins >= 2:
            phase = Phase.STABLE_CANDIDATE
        else:
            phase = Phase.INTERMITTENT
    else:
        bins = 0
        if classification is not BinClass.QUIET or phase in (Phase.INTERMITTENT, Phase.STABLE_CANDIDATE):
            phase = Phase.INTERMITTENT
    cause = None
    if phase is not Phase.DONE:
        if damage:
            phase, cause = Phase.ABORTED, "DAMAGE"
        elif max_pulses is not None and used >= max_pulses:
            phase, cause = Phase.ABORTED, "BUDGET"
    return ControllerState(phase, bins, used, alternations, classification, cause)


@dataclass
class SiteResult:
    site_index: int
    target_x_nm: float
    target_y_nm: float
    outcome: str
    n_nv_truth: int
    n_nv_inferred: int
    orientations: list[str]
    pulses_used: int
    seconds_elapsed: float
    final_rate: float = 0.0
    nv_positions_nm: list[tuple[float, float, float]] = field(default_factory=list)  # relative to target
    nv_in_plane: list[bool] = field(default_factory=list)
    nv_rates: list[float] = field(default_factory=list)
    trace: MonitorTrace | None = field(default=None, repr=False)
    events: list[Event] = field(default_factory=list, repr=False)

    @property
    def done(self) -> bool:
        return self.outcome == "Done"


def _site_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.Generator(np.random.Philox(rng))


def run_site(
    world: DefectWorld,
    plan: PulsePlan,
    policy: FeedbackPolicy,
    emitter: EmitterModel | None = None,
    rng: np.random.Generator | int | None = None,
    site_index: int = 0,
    target_nm: tuple[float, float] = (0.0, 0.0),
    bin_duration: float = 0.020,
    keep_events: bool = True,
) -> SiteResult:
    """Seed one site, then pulse and monitor until Done or Aborted.

    ``world`` must be freshly built for this site; it carries the kinetic
    Monte Carlo stream.  ``rng`` drives only the photon counting.

    Returns
    -------
    SiteResult
        Ground truth (NVs bound at the end) next to what the controller saw.
    """
    emitter = emitter or EmitterModel()
    rng = _site_rng(rng)
    pulses_per_bin = max(1, int(round(plan.rep_rate * bin_duration)))
    bin_time = pulses_per_bin / plan.rep_rate

    world.seed(plan.seed_energy)
    world.take_bound_pulses()
    state = ControllerState(Phase.SEEDED)
    trace = MonitorTrace(bin_time)
    budget = plan.max_pulses
    used = 0
    last_counts: list[int] = []
    while True:
        n = min(pulses_per_bin, budget - used) if budget > used else 0
        if n > 0:
            world.pulses(n, plan.diffusion_energy)
        bound = world.take_bound_pulses()
        rates = nv_rates(world, emitter) if bound.size else np.zeros(0)
        mean = emitter.background * bin_time + float(np.dot(rates, bound)) / plan.rep_rate
        counts = int(rng.poisson(mean))
        cls = classify_bin(counts, bin_time, policy, emitter.background, emitter)
        state = step(state, cls, policy, pulses=n, max_pulses=budget, damage=world.damage_flag)
        used = state.pulses_used
        trace.append(world.pulse_count / plan.rep_rate, counts, world.pulse_count, f"{state.phase.value}:{cls.value}")
        last_counts.append(counts)
        if state.terminal:
            break

    recs = world.nv_records()
    all_rates = nv_rates(world, emitter)
    positions, in_plane, orient, rates = [], [], [], []
    unit = world.unit
    for r in recs:
        xyz = crystal_to_lab(to_crystal(r.n_site), unit)
        positions.append(tuple(float(v) for v in xyz))
        in_plane.append(bool(r.in_plane))
        orient.append(r.orientation.axis_class.value)
        rates.append(float(all_rates[r.index]))
    window = last_counts[-policy.stability_bins:]
    final_rate = float(np.mean(window)) / bin_time if window else 0.0
    inferred = estimate_emitter_count(final_rate - emitter.background, emitter) if final_rate > emitter.background + policy.detect_threshold else 0
    outcome = "Done" if state.phase is Phase.DONE else f"Aborted:{state.abort_cause}"
    return SiteResult(
        site_index=site_index,
        target_x_nm=float(target_nm[0]),
        target_y_nm=float(target_nm[1]),
        outcome=outcome,
        n_nv_truth=len(recs),
        n_nv_inferred=inferred,
        orientations=orient,
        pulses_used=world.pulse_count,
        seconds_elapsed=world.pulse_count / plan.rep_rate,
        final_rate=final_rate,
        nv_positions_nm=positions,
        nv_in_plane=in_plane,
        nv_rates=rates,
        trace=trace,
        events=list(world.events) if keep_events else [],
    )


def trace_phase_sequence(trace: MonitorTrace) -> list[str]:
    """Phases of a trace with consecutive repeats collapsed."""
    out: list[str] = []
    for s in trace.states:
        ph = s.split(":", 1)[0]
        if not out or out[-1] != ph:
            out.append(ph)
    return out


def trace_alternations(trace: MonitorTrace) -> int:
    """Signal/Quiet flips between successive bins of a trace."""
    quiet = [s.split(":", 1)[1] == BinClass.QUIET.value for s in trace.states]
    return int(sum(a != b for a, b in zip(quiet, quiet[1:])))
