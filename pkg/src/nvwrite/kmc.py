"""Per-pulse kinetic Monte Carlo of Frenkel pairs around substitutional nitrogen.

Within one diffusion pulse the update order is fixed:

    generation -> hops (random order) -> V-I recombination -> V-N binding
    -> unbinding -> destruction -> stabilisation -> damage check

Defects interact through a pairwise strain energy ``kappa*q_i*q_j/r**p``
(cutoff ``r_cut``) with charges V=-1, I=+1, free N=+1 and NV=0.  The hop
direction is drawn with weights ``exp(-max(0, dU)/theta)``; whether a defect
hops at all is set by the laser's local hop probability.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np

from . import _kernel as K
from .laser import BeamProfile, NonlinearityParams, PulsePlan, generation_site_sampler, pairs_per_pulse
from .lattice import LatticeSite, Orientation, WorldConfig, from_crystal, to_crystal, crystal_to_lab

log = logging.getLogger(__name__)


class EventType(enum.IntEnum):
    GENERATED = K.GENERATED
    HOPPED = K.HOPPED
    RECOMBINED = K.RECOMBINED
    NV_FORMED = K.NV_FORMED
    NV_UNBOUND = K.NV_UNBOUND
    NV_DESTROYED = K.NV_DESTROYED
    NV_STABILIZED = K.NV_STABILIZED
    DAMAGE = K.DAMAGE


class Event(NamedTuple):
    pulse: int
    type: EventType
    a: tuple[int, int, int]  # crystal units
    b: tuple[int, int, int]
    extra: int

    def to_line(self) -> str:
        return (
            f"{self.pulse}\t{self.type.name}\t"
            f"{self.a[0]},{self.a[1]},{self.a[2]}\t{self.b[0]},{self.b[1]},{self.b[2]}\t{self.extra}"
        )

    @classmethod
    def from_line(cls, line: str) -> "Event":
        pulse, etype, a, b, extra = line.rstrip("\n").split("\t")
        return cls(
            int(pulse),
            EventType[etype],
            tuple(int(v) for v in a.split(",")),
            tuple(int(v) for v in b.split(",")),
            int(extra),
        )


@dataclass(frozen=True)
class StrainParams:
    kappa: float = 0.1  # eV nm
    theta: float = 0.15  # eV
    r_cut: float = 5.0  # nm
    exponent: float = 1.0  # 1 -> Coulomb-like, 3 -> elastic dipole
    charges: tuple = (("vacancy", -1), ("interstitial", 1), ("nitrogen", 1), ("nv", 0))

    def __post_init__(self):
        if self.kappa < 0:
            raise ValueError("kappa must be non-negative")
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if self.r_cut <= 0:
            raise ValueError("r_cut must be positive")
        if dict(self.charges) != {"vacancy": -1, "interstitial": 1, "nitrogen": 1, "nv": 0}:
            raise ValueError("defect charges are fixed: V=-1, I=+1, N=+1, NV=0")


@dataclass(frozen=True)
class BindingParams:
    p_unbind_near: float = 0.012
    r_int: float = 10.0  # nm
    r_stable: float = 12.0  # nm
    damage_threshold: int = 500

    def __post_init__(self):
        if not 0.0 <= self.p_unbind_near <= 1.0:
            raise ValueError("p_unbind_near must be a probability")
        if self.r_int <= 0 or self.r_stable < self.r_int:
            raise ValueError("need 0 < r_int <= r_stable")
        if self.damage_threshold < 0:
            raise ValueError("damage_threshold must be non-negative")


@dataclass
class NVComplex:
    index: int
    n_site: LatticeSite
    v_site: LatticeSite
    orientation: Orientation
    stable: bool
    rate_quantile: float  # uniform draw fixing this NV's brightness within its window
    formed_pulse: int

    @property
    def in_plane(self) -> bool:
        return self.orientation.in_plane


class DefectWorld:
    """Mutable defect state of one processing site.

    Nitrogens are sampled lazily block by block from the world's RNG the first
    time a region is touched, which matches independent per-site occupation.
    """

    DEFECT_CAPACITY = 16384
    NV_CAPACITY = 256
    EVENT_CAPACITY = 1 << 16
    EVENT_RESERVE = 4096

    def __init__(
        self,
        config: WorldConfig | None = None,
        beam: BeamProfile | None = None,
        nonlinearity: NonlinearityParams | None = None,
        strain: StrainParams | None = None,
        binding: BindingParams | None = None,
        rng: np.random.Generator | int | None = None,
        record_hops: bool = False,
    ):
        self.config = config or WorldConfig()
        self.beam = beam or BeamProfile()
        self.nonlinearity = nonlinearity or NonlinearityParams()
        self.strain = strain or StrainParams()
        self.binding = binding or BindingParams()
        if not isinstance(rng, np.random.Generator):
            rng = np.random.Generator(np.random.Philox(rng))
        self.rng = rng
        self.unit = self.config.unit_nm
        self.site_density = 8.0 / self.config.lattice_constant**3

        self.dpos = np.zeros((self.DEFECT_CAPACITY, 4), dtype=np.int64)  # x, y, z, moved flag
        self.dkind = np.full(self.DEFECT_CAPACITY, K.DEAD, dtype=np.int8)
        self.occ = K.new_occupancy()
        self.blocks = K.new_blocks()
        self.nv_n = np.zeros((self.NV_CAPACITY, 3), dtype=np.int64)
        self.nv_v = np.zeros((self.NV_CAPACITY, 3), dtype=np.int64)
        self.nv_info = np.zeros((self.NV_CAPACITY, 4), dtype=np.int64)
        self.nv_u = np.zeros(self.NV_CAPACITY)
        self.nv_bound = np.zeros(self.NV_CAPACITY, dtype=np.int64)
        self.ev = np.zeros((self.EVENT_CAPACITY, K.EVENT_COLS), dtype=np.int64)
        self.counts = np.zeros(K.N_COUNTERS, dtype=np.int64)
        self.events: list[Event] = []

        lim = self.config.crystal_limits
        ip = np.zeros(K.N_IPARAMS, dtype=np.int64)
        ip[K.I_XLO], ip[K.I_XHI] = lim[0]
        ip[K.I_YLO], ip[K.I_YHI] = lim[1]
        ip[K.I_ZLO], ip[K.I_ZHI] = lim[2]
        ip[K.I_DAMAGE] = self.binding.damage_threshold
        ip[K.I_RECORD_HOPS] = int(record_hops)
        self.ip = ip

        nl = self.nonlinearity
        nu, zscale = generation_site_sampler(self.beam, nl.n_gen)
        fp = np.zeros(K.N_FPARAMS)
        fp[K.F_UNIT] = self.unit
        fp[K.F_W0] = self.beam.w0
        fp[K.F_ZR] = self.beam.zR
        fp[K.F_E50V] = nl.e50_v
        fp[K.F_NV] = nl.n_diff_v
        fp[K.F_E50I] = nl.e50_i
        fp[K.F_NI] = nl.n_diff_i
        fp[K.F_KAPPA] = self.strain.kappa
        fp[K.F_THETA] = self.strain.theta
        fp[K.F_RCUT] = self.strain.r_cut / self.unit
        fp[K.F_PEXP] = self.strain.exponent
        fp[K.F_PUNBIND] = self.binding.p_unbind_near
        fp[K.F_RINT] = self.binding.r_int / self.unit
        fp[K.F_RSTABLE] = self.binding.r_stable / self.unit
        fp[K.F_NPROB] = self.config.nitrogen_ppm * 1e-6
        fp[K.F_NGEN] = nl.n_gen
        fp[K.F_NU] = nu
        fp[K.F_ZSCALE] = zscale
        self.fp = fp

    # ------------------------------------------------------------ state views
    @property
    def pulse_count(self) -> int:
        return int(self.counts[K.C_PULSE])

    @property
    def damage_flag(self) -> bool:
        return bool(self.counts[K.C_DAMAGE])

    @property
    def hop_count(self) -> int:
        return int(self.counts[K.C_HOPS])

    def _sites_of(self, kind) -> set[LatticeSite]:
        nd = self.counts[K.C_ND]
        rows = self.dpos[:nd, :3][self.dkind[:nd] == kind]
        return {from_crystal(r) for r in rows}

    @property
    def vacancies(self) -> set[LatticeSite]:
        return self._sites_of(K.VAC)

    @property
    def interstitials(self) -> set[LatticeSite]:
        return self._sites_of(K.INT)

    @property
    def nitrogens(self) -> set[LatticeSite]:
        """Nitrogens sampled so far (free or bound in an NV)."""
        out = set()
        for arr in self.blocks.values():
            for m in range(len(arr) // 4):
                out.add(from_crystal(arr[4 * m: 4 * m + 3]))
        return out

    def nv_records(self, include_gone: bool = False) -> list[NVComplex]:
        out = []
        for k in range(int(self.counts[K.C_NNV])):
            state = self.nv_info[k, 0]
            if state == K.NV_GONE and not include_gone:
                continue
            out.append(
                NVComplex(
                    index=k,
                    n_site=from_crystal(self.nv_n[k]),
                    v_site=from_crystal(self.nv_v[k]),
                    orientation=Orientation.from_index(self.nv_info[k, 1]),
                    stable=state == K.NV_STABLE,
                    rate_quantile=float(self.nv_u[k]),
                    formed_pulse=int(self.nv_info[k, 2]),
                )
            )
        return out

    @property
    def nv_complexes(self) -> list[NVComplex]:
        return self.nv_records()

    def nv_alive_mask(self) -> np.ndarray:
        n = int(self.counts[K.C_NNV])
        return self.nv_info[:n, 0] != K.NV_GONE

    def defect_positions_nm(self, kind: str) -> np.ndarray:
        code = {"vacancy": K.VAC, "interstitial": K.INT}[kind]
        nd = self.counts[K.C_ND]
        rows = self.dpos[:nd, :3][self.dkind[:nd] == code]
        return crystal_to_lab(rows, self.unit)

    # ------------------------------------------------------------ placement
    def _xyz(self, site: LatticeSite) -> np.ndarray:
        return to_crystal(site)

    def _check_free(self, xyz):
        x, y, z = (int(v) for v in xyz)
        if not K._in_box(x, y, z, self.ip):
            raise ValueError(f"{from_crystal(xyz)} is outside the world")
        if K.site_key(x, y, z) in self.occ:
            raise ValueError(f"{from_crystal(xyz)} already hosts a defect")
        if K.nitrogen_slot(x, y, z, self.blocks, self.ip, self.fp, self.rng) >= 0:
            raise ValueError(f"{from_crystal(xyz)} already hosts a nitrogen")

    def add_nitrogen(self, site: LatticeSite) -> None:
        xyz = self._xyz(site)
        x, y, z = (int(v) for v in xyz)
        if K.site_key(x, y, z) in self.occ:
            raise ValueError(f"{site} already hosts a defect")
        K.add_nitrogen(x, y, z, self.blocks, self.ip, self.fp, self.rng)
        self.counts[K.C_NFREED] = 1  # vacancies next to it may bind

    def add_vacancy(self, site: LatticeSite) -> None:
        xyz = self._xyz(site)
        self._check_free(xyz)
        K._add_defect(K.VAC, int(xyz[0]), int(xyz[1]), int(xyz[2]), self.dpos, self.dkind, self.occ, self.counts)

    def add_interstitial(self, site: LatticeSite) -> None:
        xyz = self._xyz(site)
        self._check_free(xyz)
        K._add_defect(K.INT, int(xyz[0]), int(xyz[1]), int(xyz[2]), self.dpos, self.dkind, self.occ, self.counts)

    # ------------------------------------------------------------ dynamics
    def mean_pairs(self, energy: float) -> float:
        return pairs_per_pulse(self.nonlinearity, self.beam, energy, self.site_density)

    def _drain_events(self) -> list[Event]:
        n = int(self.counts[K.C_NEV])
        rows = self.ev[:n].copy()
        self.counts[K.C_NEV] = 0
        new = [
            Event(int(r[0]), EventType(int(r[1])), (int(r[2]), int(r[3]), int(r[4])),
                  (int(r[5]), int(r[6]), int(r[7])), int(r[8]))
            for r in rows
        ]
        self.events.extend(new)
        return new

    def seed(self, energy: float) -> list[Event]:
        K.seed_pulse(self.mean_pairs(energy), self.dpos, self.dkind, self.occ, self.blocks,
                     self.ev, self.counts, self.ip, self.fp, self.rng)
        if self.counts[K.C_SKIPPED]:
            log.warning("%d Frenkel pairs could not be placed", int(self.counts[K.C_SKIPPED]))
            self.counts[K.C_SKIPPED] = 0
        return self._drain_events()

    def pulses(self, n: int, energy: float, generate: bool = True) -> list[Event]:
        """Apply up to ``n`` diffusion pulses (fewer if damage halts the run)."""
        mu = self.mean_pairs(energy) if generate else 0.0
        new: list[Event] = []
        remaining = int(n)
        while remaining > 0 and not self.damage_flag:
            done = K.run_pulses(remaining, float(energy), mu, self.dpos, self.dkind, self.occ, self.blocks,
                                self.nv_n, self.nv_v, self.nv_info, self.nv_u, self.nv_bound,
                                self.ev, self.counts, self.ip, self.fp, self.rng, self.EVENT_RESERVE)
            remaining -= done
            new.extend(self._drain_events())
        if self.counts[K.C_OVERFLOW]:
            raise RuntimeError("defect, NV or event capacity exceeded")
        return new

    def take_bound_pulses(self) -> np.ndarray:
        """Pulses each NV record spent bound since the last call; resets the tally."""
        n = int(self.counts[K.C_NNV])
        out = self.nv_bound[:n].copy()
        self.nv_bound[:n] = 0
        return out


def apply_seed_pulse(world: DefectWorld, plan: PulsePlan) -> list[Event]:
    """Generate the seed pulse's Frenkel pairs; only pulse_count changes at zero energy."""
    return world.seed(plan.seed_energy)


def apply_diffusion_pulse(world: DefectWorld, plan: PulsePlan, generate: bool = True) -> list[Event]:
    return world.pulses(1, plan.diffusion_energy, generate=generate)


def run_pulses(world: DefectWorld, plan: PulsePlan, n: int, generate: bool = True) -> list[Event]:
    if n < 0:
        raise ValueError("n must be non-negative")
    if world.pulse_count + n > plan.max_pulses + 1:
        raise ValueError("requested pulses exceed the plan's budget")
    return world.pulses(n, plan.diffusion_energy, generate=generate)


def strain_energy(world: DefectWorld) -> float:
    """Total pairwise strain energy (eV) of the defects and every sampled free nitrogen."""
    free_n = []
    for arr in world.blocks.values():
        for m in range(len(arr) // 4):
            if arr[4 * m + 3] == 0:
                free_n.append(arr[4 * m: 4 * m + 3])
    nit = np.array(free_n, dtype=np.int64).reshape(-1, 3)
    s = world.strain
    u = K.total_strain(world.dpos, world.dkind, int(world.counts[K.C_ND]), nit,
                       s.kappa, s.r_cut / world.unit, world.unit, s.exponent)
    if np.isnan(u):
        raise ValueError("coincident defects in world")
    return float(u)


def write_event_log(events: Iterable[Event], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("pulse\ttype\ta\tb\textra\n")
        for e in events:
            fh.write(e.to_line() + "\n")


def read_event_log(path) -> list[Event]:
    with open(path, encoding="utf-8") as fh:
        next(fh)
        return [Event.from_line(line) for line in fh if line.strip()]
