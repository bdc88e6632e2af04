"""Writing a single NV centre.

A seed pulse creates a few vacancy-interstitial pairs at the focus.  Lower
energy diffusion pulses then let the vacancies wander until one binds next to
a substitutional nitrogen.  The fluorescence monitor first sees nothing, then
blinking while the NV binds and unbinds, and finally a steady signal that
stops the laser.
"""

from itertools import groupby

from nvwrite.runner import ExperimentConfig, simulate_one_site
from nvwrite.feedback import trace_alternations, trace_phase_sequence

cfg = ExperimentConfig(master_seed=2024)
rec = simulate_one_site(cfg, site_index=0)
res = rec.result

print(f"outcome {res.outcome} after {res.pulses_used} pulses ({res.seconds_elapsed:.1f} s)")
print(f"NV centres written: {res.n_nv_truth}, orientations {res.orientations}")
print(f"phases: {' -> '.join(trace_phase_sequence(res.trace))}")
print(f"Signal/Quiet alternations: {trace_alternations(res.trace)}")

# run-length view of the last part of the trace
tail = res.trace.samples[-120:]
print("\nlast bins (state x count, mean counts per 20 ms):")
for state, grp in groupby(tail, key=lambda s: s.state):
    grp = list(grp)
    mean = sum(s.counts for s in grp) / len(grp)
    print(f"  {state:<24} x{len(grp):<4} {mean:6.1f}")

if rec.measured_class:
    print(f"\npolarization scan: visibility {rec.visibility:.2f} -> {rec.measured_class}")
