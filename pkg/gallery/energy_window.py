"""Where the processing window comes from.

Vacancy and interstitial hopping scale steeply with pulse energy, and so does
the creation of new Frenkel pairs.  Too little energy and vacancies never
reach a nitrogen.  Too much and fresh vacancies accumulate faster than they
recombine, which is runaway damage.  Nothing below hard-codes the window; it
emerges from the default calibration.

Each energy uses 8 worlds of up to 30 000 pulses, which takes a few minutes.
"""

from nvwrite.kmc import DefectWorld, EventType
from nvwrite.laser import PulsePlan

N_RUNS, BUDGET = 8, 30_000

print(f"{'E (nJ)':>7} {'damaged':>8} {'with NV':>8} {'vacancies left':>15}")
for energy in (12.0, 14.0, 16.0, 19.0, 21.0):
    damaged = formed = left = 0
    for seed in range(N_RUNS):
        w = DefectWorld(rng=100 + seed)
        w.seed(PulsePlan().seed_energy)
        nv = False
        while w.pulse_count <= BUDGET and not w.damage_flag:
            ev = w.pulses(5000, energy)
            nv = nv or any(e.type is EventType.NV_FORMED for e in ev)
        damaged += w.damage_flag
        formed += nv
        left += len(w.vacancies)
    print(f"{energy:7.1f} {damaged:5d}/{N_RUNS} {formed:5d}/{N_RUNS} {left / N_RUNS:15.1f}")
