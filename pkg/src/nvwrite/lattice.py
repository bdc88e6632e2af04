"""Diamond lattice geometry.

Sites are addressed by primitive FCC cell indices ``(i, j, k)`` plus the index
of the two-atom diamond basis.  Internally many routines work in *crystal
units*: integer Cartesian coordinates along the cubic axes in units of a/4,
where sublattice 0 has all-even coordinates summing to 0 mod 4 and sublattice 1
is shifted by (1, 1, 1).

Lab frame convention (fixed for the whole package): the polished sample
surface is (110), so

    x = [-1 1 0]/sqrt(2)   (image plane)
    y = [0 0 1]            (image plane)
    z = [1 1 0]/sqrt(2)    (optical axis, surface normal)

which is right handed.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

DIAMOND_LATTICE_CONSTANT_NM = 0.357

# nearest-neighbour offsets from a sublattice-0 atom, crystal units
BOND_VECTORS = np.array(
    [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.int64
)

# the 8 atoms of the conventional cubic cell, crystal units
CONVENTIONAL_BASIS = np.array(
    [
        [0, 0, 0], [0, 2, 2], [2, 0, 2], [2, 2, 0],
        [1, 1, 1], [1, 3, 3], [3, 1, 3], [3, 3, 1],
    ],
    dtype=np.int64,
)

_SQ2 = np.sqrt(2.0)
# rows are the lab axes expressed in crystal coordinates
LAB_FROM_CRYSTAL = np.array(
    [[-1 / _SQ2, 1 / _SQ2, 0.0], [0.0, 0.0, 1.0], [1 / _SQ2, 1 / _SQ2, 0.0]]
)


class LatticeSite(NamedTuple):
    i: int
    j: int
    k: int
    basis: int


class AxisClass(enum.Enum):
    """The four <111> axes; values are the Miller labels."""

    A111 = "[111]"
    A11m1 = "[11-1]"
    A1m11 = "[1-11]"
    Am111 = "[-111]"

    @property
    def direction(self) -> np.ndarray:
        return np.array(_AXIS_DIRECTIONS[self], dtype=float) / np.sqrt(3.0)


_AXIS_DIRECTIONS = {
    AxisClass.A111: (1, 1, 1),
    AxisClass.A11m1: (1, 1, -1),
    AxisClass.A1m11: (1, -1, 1),
    AxisClass.Am111: (-1, 1, 1),
}

# class index for each row of BOND_VECTORS (a bond and its negative share an axis)
BOND_CLASS_INDEX = np.array([0, 3, 2, 1], dtype=np.int64)
AXIS_CLASSES = (AxisClass.A111, AxisClass.A11m1, AxisClass.A1m11, AxisClass.Am111)


@dataclass(frozen=True)
class Orientation:
    axis_class: AxisClass

    @property
    def in_plane(self) -> bool:
        return abs(float(self.lab_axis[2])) < 1e-12

    @property
    def lab_axis(self) -> np.ndarray:
        return LAB_FROM_CRYSTAL @ self.axis_class.direction

    @property
    def angle_to_plane_deg(self) -> float:
        return float(np.degrees(np.arcsin(abs(self.lab_axis[2]))))

    @property
    def projection_angle_deg(self) -> float:
        """Angle of the axis projected onto the image plane, in [0, 180)."""
        ax = self.lab_axis
        return float(np.degrees(np.arctan2(ax[1], ax[0])) % 180.0)

    @classmethod
    def from_index(cls, index: int) -> "Orientation":
        return cls(AXIS_CLASSES[int(index)])

    @property
    def index(self) -> int:
        return AXIS_CLASSES.index(self.axis_class)


@dataclass(frozen=True)
class WorldConfig:
    """Finite crystal box.

    ``bounds`` counts conventional cubic cells along the cubic axes; the box is
    centred on the laser focus.
    """

    lattice_constant: float = DIAMOND_LATTICE_CONSTANT_NM
    bounds: tuple[int, int, int] = (8400, 8400, 8400)
    nitrogen_ppm: float = 1.8

    def __post_init__(self):
        if self.lattice_constant <= 0:
            raise ValueError("lattice_constant must be positive")
        if len(self.bounds) != 3 or any(int(b) <= 0 for b in self.bounds):
            raise ValueError("bounds must be three positive cell counts")
        if self.nitrogen_ppm < 0:
            raise ValueError("nitrogen_ppm must be non-negative")
        object.__setattr__(self, "bounds", tuple(int(b) for b in self.bounds))

    @property
    def n_sites(self) -> int:
        nx, ny, nz = self.bounds
        return 8 * nx * ny * nz

    @property
    def crystal_limits(self) -> np.ndarray:
        """Half-open [lo, hi) limits per cubic axis in crystal units, shape (3, 2)."""
        lo = np.array([-4 * (b // 2) for b in self.bounds], dtype=np.int64)
        hi = lo + 4 * np.array(self.bounds, dtype=np.int64)
        return np.stack([lo, hi], axis=1)

    @property
    def unit_nm(self) -> float:
        return self.lattice_constant / 4.0


class NeighborList(list):
    """List of neighbouring sites; ``in_bounds`` flags each entry."""

    in_bounds: tuple[bool, ...] = ()


def to_crystal(site: LatticeSite) -> np.ndarray:
    i, j, k, b = site
    return np.array([2 * (j + k) + b, 2 * (i + k) + b, 2 * (i + j) + b], dtype=np.int64)


def from_crystal(xyz: Sequence[int]) -> LatticeSite:
    x, y, z = (int(v) for v in xyz)
    b = x & 1
    if (y & 1) != b or (z & 1) != b or (x + y + z - 3 * b) % 4:
        raise ValueError(f"{(x, y, z)} is not a diamond lattice site")
    x, y, z = x - b, y - b, z - b
    return LatticeSite((-x + y + z) // 4, (x - y + z) // 4, (x + y - z) // 4, b)


def in_bounds(site: LatticeSite, config: WorldConfig) -> bool:
    xyz = to_crystal(site)
    lim = config.crystal_limits
    return bool(np.all(xyz >= lim[:, 0]) and np.all(xyz < lim[:, 1]))


def neighbors(site: LatticeSite, config: WorldConfig | None = None) -> NeighborList:
    """The four nearest neighbours, each on the opposite sublattice.

    With a ``config`` the returned list carries ``in_bounds`` flags; a site
    that is itself outside the box raises ``ValueError``.
    """
    if site.basis not in (0, 1):
        raise ValueError("basis index must be 0 or 1")
    if config is not None and not in_bounds(site, config):
        raise ValueError(f"{site} lies outside the world bounds")
    sign = 1 if site.basis == 0 else -1
    origin = to_crystal(site)
    out = NeighborList(from_crystal(origin + sign * v) for v in BOND_VECTORS)
    if config is not None:
        out.in_bounds = tuple(in_bounds(s, config) for s in out)
    else:
        out.in_bounds = (True,) * 4
    return out


def crystal_to_lab(xyz, unit_nm: float) -> np.ndarray:
    return (np.asarray(xyz, dtype=float) @ LAB_FROM_CRYSTAL.T) * unit_nm


def lab_to_crystal(xyz_nm, unit_nm: float) -> np.ndarray:
    return (np.asarray(xyz_nm, dtype=float) @ LAB_FROM_CRYSTAL) / unit_nm


def position_nm(site: LatticeSite, lattice_constant: float = DIAMOND_LATTICE_CONSTANT_NM) -> np.ndarray:
    """Lab-frame position; z is along the (110) surface normal."""
    return crystal_to_lab(to_crystal(site), lattice_constant / 4.0)


def bond_class_index(delta) -> int:
    """Index into AXIS_CLASSES for a nearest-neighbour vector in crystal units."""
    d = np.asarray(delta, dtype=np.int64)
    for row, v in enumerate(BOND_VECTORS):
        if np.array_equal(d, v) or np.array_equal(d, -v):
            return int(BOND_CLASS_INDEX[row])
    raise ValueError(f"{tuple(d)} is not a nearest-neighbour bond")


def bond_orientation(n_site: LatticeSite, v_site: LatticeSite) -> Orientation:
    if v_site not in neighbors(n_site):
        raise ValueError(f"{v_site} is not adjacent to {n_site}")
    return Orientation.from_index(bond_class_index(to_crystal(v_site) - to_crystal(n_site)))


def nearest_site_crystal(xyz) -> np.ndarray:
    """Nearest diamond site to a continuous point given in crystal units."""
    p = np.asarray(xyz, dtype=float)
    best, best_d = None, np.inf
    for shift in (0.0, 1.0):
        q = p - shift
        r = 2.0 * np.round(q / 2.0)
        if int(r.sum()) % 4:
            err = q - r
            m = int(np.argmax(np.abs(err)))
            r[m] += 2.0 if err[m] > 0 else -2.0
        cand = r + shift
        d = float(np.sum((cand - p) ** 2))
        if d < best_d:
            best, best_d = cand, d
    return best.astype(np.int64)


def decode_site_index(index: np.ndarray, config: WorldConfig) -> np.ndarray:
    """Map flat site indices in ``[0, n_sites)`` to crystal coordinates."""
    index = np.asarray(index, dtype=np.int64)
    nx, ny, _ = config.bounds
    atom = index % 8
    cell = index // 8
    cx = cell % nx
    cy = (cell // nx) % ny
    cz = cell // (nx * ny)
    lo = config.crystal_limits[:, 0]
    cells = np.stack([cx, cy, cz], axis=-1) * 4 + lo
    return cells + CONVENTIONAL_BASIS[atom]


def sample_nitrogens(config: WorldConfig, rng_seed) -> list[LatticeSite]:
    """Independent Bernoulli occupation of every site at ``nitrogen_ppm``.

    Drawn as a binomial total followed by a uniform choice of distinct sites,
    which has the same law as per-site coin flips.
    """
    rng = np.random.default_rng(rng_seed)
    p = config.nitrogen_ppm * 1e-6
    if p <= 0:
        return []
    total = config.n_sites
    count = int(rng.binomial(total, p))
    idx = np.sort(rng.choice(total, size=count, replace=False))
    return [from_crystal(xyz) for xyz in decode_site_index(idx, config)]
