"""Detector observables: binned counts, polarization scans, HBT and PL images.

Each NV gets a fixed brightness when it forms.  Its rate-window quantile
(``NVComplex.rate_quantile``) picks a rate inside the window for its
orientation class, so ``EmitterModel.rate_for`` is deterministic given the
world state.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from .lattice import Orientation

FWHM_TO_SIGMA = 1.0 / (2.0 * np.sqrt(2.0 * np.log(2.0)))


@dataclass(frozen=True)
class EmitterModel:
    """Brightness and polarization of NV emitters, plus the background."""

    in_plane_window: tuple[float, float] = (8000.0, 11000.0)  # counts/s
    out_of_plane_window: tuple[float, float] = (11000.0, 15000.0)  # counts/s
    background: float = 1000.0  # counts/s
    visibility_in: float = 0.85
    visibility_out: float = 0.25

    def __post_init__(self):
        for name in ("in_plane_window", "out_of_plane_window"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.out_of_plane_window[0] < self.in_plane_window[1]:
            raise ValueError("out-of-plane window must lie above the in-plane window")
        if self.background < 0:
            raise ValueError("background must be non-negative")
        for v in (self.visibility_in, self.visibility_out):
            if not 0.0 <= v <= 1.0:
                raise ValueError("visibilities must lie in [0, 1]")

    def window(self, orientation: Orientation) -> tuple[float, float]:
        return self.in_plane_window if orientation.in_plane else self.out_of_plane_window

    def rate_for(self, orientation: Orientation, quantile: float) -> float:
        """Rate of an NV whose uniform brightness draw is ``quantile``."""
        lo, hi = self.window(orientation)
        return lo + float(quantile) * (hi - lo)

    def visibility(self, orientation: Orientation) -> float:
        return self.visibility_in if orientation.in_plane else self.visibility_out


def nv_rates(world, model: EmitterModel) -> np.ndarray:
    """Rate of every NV record ever formed in ``world``, indexed by record."""
    recs = world.nv_records(include_gone=True)
    return np.array([model.rate_for(r.orientation, r.rate_quantile) for r in recs], dtype=float)


def fluorescence_rate(world, model: EmitterModel) -> float:
    """Background plus the rates of the NVs currently bound."""
    return model.background + sum(model.rate_for(r.orientation, r.rate_quantile) for r in world.nv_records())


def sample_bin(rate: float, bin_duration: float, rng: np.random.Generator) -> int:
    if rate < 0:
        raise ValueError("rate must be non-negative")
    return int(rng.poisson(rate * bin_duration))


# ---------------------------------------------------------------- polarization

def malus_phase_deg(orientation: Orientation) -> float:
    """Phase φ of I(θ) = I0 + ΔI cos²(θ + φ), in [0, 180).

    The emission dipoles lie perpendicular to the NV axis, so the intensity
    peaks with the polarizer at right angles to the axis projection.
    """
    peak = orientation.projection_angle_deg + 90.0
    return float((-peak) % 180.0)


def malus_intensity(theta_deg, i0: float, delta_i: float, phi_deg: float):
    t = np.radians(np.asarray(theta_deg, dtype=float) + phi_deg)
    return i0 + delta_i * np.cos(t) ** 2


def polarization_scan(
    orientation: Orientation,
    model: EmitterModel,
    angles: Sequence[float],
    shot_noise: bool = False,
    rng: np.random.Generator | None = None,
    rate: float | None = None,
    dwell: float = 1.0,
    visibility: float | None = None,
) -> list[tuple[float, float]]:
    """Counts collected behind a rotating polarizer.

    Parameters
    ----------
    orientation : Orientation
        Axis class of the emitter; sets φ and, unless overridden, the visibility.
    model : EmitterModel
    angles : sequence of float
        Polarizer angles in degrees.
    shot_noise : bool
        Replace each mean by a Poisson draw (requires ``rng``).
    rate : float, optional
        Angle-averaged count rate; defaults to the middle of the orientation's window.
    dwell : float
        Seconds per angle.
    visibility : float, optional
        Overrides the model's visibility for this orientation.

    Returns
    -------
    list of (theta, intensity)
    """
    angles = np.asarray(angles, dtype=float)
    if angles.size == 0:
        raise ValueError("angles must be non-empty")
    if rate is None:
        rate = float(np.mean(model.window(orientation)))
    vis = model.visibility(orientation) if visibility is None else float(visibility)
    if not 0.0 <= vis <= 1.0:
        raise ValueError("visibility must lie in [0, 1]")
    mean = rate * dwell
    # mean over θ is I0 + ΔI/2; visibility is ΔI / (ΔI + 2 I0)
    delta_i = 2.0 * vis * mean
    i0 = mean * (1.0 - vis)
    values = malus_intensity(angles, i0, delta_i, malus_phase_deg(orientation))
    if shot_noise:
        if rng is None:
            raise ValueError("shot noise needs an rng")
        values = rng.poisson(values).astype(float)
    return [(float(t), float(v)) for t, v in zip(angles, values)]


# ---------------------------------------------------------------- photon statistics

@dataclass(frozen=True)
class ThreeLevelParams:
    """Single-emitter autocorrelation 1 - c e^(-|τ|/τ2) + (c-1) e^(-|τ|/τ3)."""

    c: float = 1.2
    tau2: float = 10.0  # ns
    tau3: float = 150.0  # ns

    def __post_init__(self):
        if self.c < 1.0:
            raise ValueError("c must be >= 1")
        if self.tau2 <= 0 or self.tau3 <= 0:
            raise ValueError("lifetimes must be positive")

    def g2(self, tau_ns):
        t = np.abs(np.asarray(tau_ns, dtype=float))
        return 1.0 - self.c * np.exp(-t / self.tau2) + (self.c - 1.0) * np.exp(-t / self.tau3)


def _interarrival_table(rate_per_ns: float, params: ThreeLevelParams):
    """CDF of the gap between successive detected photons of one emitter.

    After a detection the emitter is back in its ground state, so the
    detections form a renewal process whose conditional intensity is
    rate·g2(τ).  In the Laplace domain the gap density is H/(1 + H) with
    H(s) = rate·[1/s - c/(s + 1/τ2) + (c - 1)/(s + 1/τ3)], a rational function
    whose poles give the density as a sum of exponentials.
    """
    a, b = 1.0 / params.tau2, 1.0 / params.tau3
    c, r = params.c, rate_per_ns
    s = np.polynomial.Polynomial([0.0, 1.0])
    num = (s + a) * (s + b) - c * s * (s + b) + (c - 1.0) * s * (s + a)
    den = s * (s + a) * (s + b)
    total = den + r * num
    poles = total.roots().astype(complex)
    dtot = total.deriv()
    weights = np.array([r * num(p) / dtot(p) for p in poles])
    t_max = 40.0 / r
    grid = np.concatenate([np.linspace(0.0, 20.0 * max(params.tau2, params.tau3), 4001)[:-1],
                           np.geomspace(20.0 * max(params.tau2, params.tau3), t_max, 4000)])
    grid = np.unique(grid)
    cdf = np.real(sum(w * (np.exp(p * grid) - 1.0) / p for w, p in zip(weights, poles)))
    cdf = np.maximum.accumulate(np.clip(cdf, 0.0, 1.0))
    cdf[-1] = 1.0
    return grid, cdf


def emitter_stream(rate: float, duration: float, params: ThreeLevelParams, rng: np.random.Generator) -> np.ndarray:
    """Detection times (ns) of one three-level emitter over ``duration`` seconds."""
    if rate <= 0 or duration <= 0:
        return np.empty(0)
    r_ns = rate * 1e-9
    grid, cdf = _interarrival_table(r_ns, params)
    t_end = duration * 1e9
    out = []
    t = rng.uniform(0.0, 1.0 / r_ns)  # approximate stationary start
    chunk = int(rate * duration * 1.1) + 64
    while t < t_end:
        gaps = np.interp(rng.random(chunk), cdf, grid)
        times = t + np.cumsum(gaps)
        out.append(times[times < t_end])
        t = times[-1]
    return np.concatenate(out) if out else np.empty(0)


@dataclass
class HbtHistogram:
    """Coincidence counts between the two HBT detectors.

    ``tau`` holds bin centres in ns, symmetric around zero.  ``n_a``, ``n_b``
    and ``duration`` fix the uncorrelated-coincidence level used to normalise.
    """

    tau: np.ndarray
    coincidences: np.ndarray
    bin_width: float
    duration: float
    n_a: int
    n_b: int
    timing_jitter: float = 0.5

    def normalized(self) -> np.ndarray:
        expected = self.n_a * self.n_b * self.bin_width * 1e-9 / self.duration
        return self.coincidences / expected

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# bin_width_ns={self.bin_width!r} duration_s={self.duration!r} "
                     f"n_a={self.n_a} n_b={self.n_b} timing_jitter_ns={self.timing_jitter!r}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["tau_ns", "coincidences", "g2_raw"])
            for t, c, g in zip(self.tau, self.coincidences, self.normalized()):
                w.writerow([repr(float(t)), int(c), repr(float(g))])

    @classmethod
    def from_csv(cls, path) -> "HbtHistogram":
        with open(path, encoding="utf-8") as fh:
            header = fh.readline()
            if not header.startswith("#"):
                raise ValueError("missing HBT header line")
            meta = dict(kv.split("=", 1) for kv in header[1:].split())
            rows = list(csv.DictReader(fh))
        return cls(
            tau=np.array([float(r["tau_ns"]) for r in rows]),
            coincidences=np.array([int(r["coincidences"]) for r in rows]),
            bin_width=float(meta["bin_width_ns"]),
            duration=float(meta["duration_s"]),
            n_a=int(meta["n_a"]),
            n_b=int(meta["n_b"]),
            timing_jitter=float(meta.get("timing_jitter_ns", 0.5)),
        )


def coincidence_histogram(a: np.ndarray, b: np.ndarray, bin_width: float, max_tau: float) -> tuple[np.ndarray, np.ndarray]:
    """Histogram of t_b - t_a over all pairs with |t_b - t_a| < max_tau (ns)."""
    nbins = int(round(max_tau / bin_width))
    edges = (np.arange(-nbins, nbins + 1) - 0.5) * bin_width
    a = np.sort(a)
    b = np.sort(b)
    lo = np.searchsorted(b, a + edges[0])
    hi = np.searchsorted(b, a + edges[-1])
    n = hi - lo
    if n.sum() == 0:
        return 0.5 * (edges[1:] + edges[:-1]), np.zeros(len(edges) - 1, dtype=np.int64)
    owner = np.repeat(np.arange(len(a)), n)
    offs = np.arange(n.sum()) - np.repeat(np.cumsum(n) - n, n)
    delays = b[np.repeat(lo, n) + offs] - a[owner]
    counts, _ = np.histogram(delays, bins=edges)
    return 0.5 * (edges[1:] + edges[:-1]), counts


def simulate_hbt(
    n_emitters: int,
    signal: float,
    background: float,
    duration: float,
    params: ThreeLevelParams | None = None,
    rng: np.random.Generator | None = None,
    bin_width: float = 1.0,
    max_tau: float = 500.0,
    timing_jitter: float = 0.5,
) -> HbtHistogram:
    """Photon-by-photon HBT measurement.

    ``signal`` (counts/s) is shared equally by ``n_emitters`` independent
    three-level emitters; ``background`` is Poissonian.  Every photon goes to
    detector A or B with probability 1/2 and is time-stamped with Gaussian
    jitter of ``timing_jitter`` ns per detector.
    """
    if n_emitters < 0:
        raise ValueError("n_emitters must be non-negative")
    if signal < 0 or background < 0 or duration <= 0:
        raise ValueError("rates must be non-negative and duration positive")
    params = params or ThreeLevelParams()
    rng = rng if rng is not None else np.random.default_rng()
    t_end = duration * 1e9
    streams = [emitter_stream(signal / n_emitters, duration, params, rng) for _ in range(n_emitters)] if n_emitters else []
    n_bg = rng.poisson(background * duration)
    streams.append(rng.uniform(0.0, t_end, n_bg))
    photons = np.concatenate(streams)
    to_a = rng.random(photons.size) < 0.5
    a = photons[to_a] + rng.normal(0.0, timing_jitter, int(to_a.sum()))
    b = photons[~to_a] + rng.normal(0.0, timing_jitter, int((~to_a).sum()))
    tau, counts = coincidence_histogram(a, b, bin_width, max_tau)
    return HbtHistogram(tau, counts, bin_width, duration, int(a.size), int(b.size), timing_jitter)


# ---------------------------------------------------------------- monitor trace

class MonitorSample(NamedTuple):
    t: float  # s, end of the bin
    counts: int
    pulse_index: int
    state: str


@dataclass
class MonitorTrace:
    bin_duration: float = 0.020
    samples: list[MonitorSample] = field(default_factory=list)

    def append(self, t: float, counts: int, pulse_index: int, state: str) -> None:
        if self.samples and t <= self.samples[-1].t:
            raise ValueError("trace times must increase")
        if counts < 0:
            raise ValueError("counts must be non-negative")
        self.samples.append(MonitorSample(float(t), int(counts), int(pulse_index), str(state)))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def counts(self) -> np.ndarray:
        return np.array([s.counts for s in self.samples], dtype=np.int64)

    @property
    def states(self) -> list[str]:
        return [s.state for s in self.samples]

    def rates(self) -> np.ndarray:
        return self.counts / self.bin_duration

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t_s", "counts", "pulse_index", "state"])
            for s in self.samples:
                w.writerow([f"{s.t:.6f}", s.counts, s.pulse_index, s.state])

    @classmethod
    def from_csv(cls, path, bin_duration: float = 0.020) -> "MonitorTrace":
        tr = cls(bin_duration)
        with open(path, encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                tr.append(float(row["t_s"]), int(row["counts"]), int(row["pulse_index"]), row["state"])
        return tr


# ---------------------------------------------------------------- PL image

@dataclass
class PLImage:
    """Row-major intensity grid; pixel (r, c) is centred at (x0 + c·p, y0 + r·p)."""

    data: np.ndarray
    pixel_nm: float
    x0_nm: float = 0.0
    y0_nm: float = 0.0

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        xs = self.x0_nm + self.pixel_nm * np.arange(self.width)
        ys = self.y0_nm + self.pixel_nm * np.arange(self.height)
        return xs, ys

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"width={self.width} height={self.height} pixel_nm={self.pixel_nm!r} "
                     f"x0_nm={self.x0_nm!r} y0_nm={self.y0_nm!r}\n")
            for row in self.data:
                fh.write(" ".join(repr(float(v)) for v in row) + "\n")

    @classmethod
    def load(cls, path) -> "PLImage":
        with open(path, encoding="utf-8") as fh:
            meta = dict(kv.split("=", 1) for kv in fh.readline().split())
            data = np.loadtxt(fh, ndmin=2)
        w, h = int(meta["width"]), int(meta["height"])
        if data.shape != (h, w):
            raise ValueError(f"image body is {data.shape}, header says {(h, w)}")
        return cls(data, float(meta["pixel_nm"]), float(meta.get("x0_nm", 0.0)), float(meta.get("y0_nm", 0.0)))


def render_pl_image(
    emitters: Iterable[tuple[float, float, float]],
    psf_fwhm: float = 200.0,
    pixel: float = 20.0,
    extent: tuple[float, float, float, float] | None = None,
    background: float = 0.0,
    noise: bool = False,
    rng: np.random.Generator | None = None,
) -> PLImage:
    """Confocal image of point emitters.

    Parameters
    ----------
    emitters : iterable of (x_nm, y_nm, brightness)
        ``brightness`` is the peak height of the emitter's Gaussian spot.
    psf_fwhm, pixel : float
        Spot FWHM and pixel pitch in nm.
    extent : (xmin, xmax, ymin, ymax), optional
        Pixel-centre range; defaults to the emitters' bounding box padded by
        three FWHM.
    background : float
        Constant added to every pixel.
    noise : bool
        Replace every pixel by a Poisson draw (requires ``rng``).
    """
    if pixel <= 0:
        raise ValueError("pixel must be positive")
    if psf_fwhm <= 0:
        raise ValueError("psf_fwhm must be positive")
    em = np.asarray(list(emitters), dtype=float).reshape(-1, 3)
    if extent is None:
        if len(em) == 0:
            raise ValueError("extent is required for an empty emitter list")
        pad = 3.0 * psf_fwhm
        extent = (em[:, 0].min() - pad, em[:, 0].max() + pad, em[:, 1].min() - pad, em[:, 1].max() + pad)
    xmin, xmax, ymin, ymax = extent
    nx = int(np.floor((xmax - xmin) / pixel + 1e-9)) + 1
    ny = int(np.floor((ymax - ymin) / pixel + 1e-9)) + 1
    xs = xmin + pixel * np.arange(nx)
    ys = ymin + pixel * np.arange(ny)
    sigma = psf_fwhm * FWHM_TO_SIGMA
    img = np.full((ny, nx), float(background))
    for x, y, amp in em:
        gx = np.exp(-((xs - x) ** 2) / (2.0 * sigma**2))
        gy = np.exp(-((ys - y) ** 2) / (2.0 * sigma**2))
        img += amp * np.outer(gy, gx)
    if noise:
        if rng is None:
            raise ValueError("noise needs an rng")
        img = rng.poisson(img).astype(float)
    return PLImage(img, float(pixel), float(xmin), float(ymin))
