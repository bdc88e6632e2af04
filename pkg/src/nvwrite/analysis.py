"""Fits and statistics for synthetic NV data.

Every nonlinear fit goes through :func:`least_squares_fit`, a thin layer over
``scipy.optimize.least_squares`` (trust-region reflective, i.e. a damped
Gauss-Newton iteration that also honours bounds).  Uncertainties come from the
covariance ``s^2 (J^T J)^-1`` of the residual Jacobian at the solution.

Angles are degrees at every interface and radians inside model functions.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np
from scipy import ndimage, optimize

from .lattice import AXIS_CLASSES, Orientation
from .photophysics import FWHM_TO_SIGMA, PLImage, malus_phase_deg

log = logging.getLogger(__name__)

TOL = 1e-9
MAX_ITER = 200


@dataclass
class FitResult:
    params: dict[str, float]
    uncertainties: dict[str, float]
    residual_norm: float
    converged: bool
    iterations: int
    extra: dict = field(default_factory=dict)

    def __getitem__(self, name: str) -> float:
        return self.params[name]

    def to_lines(self) -> list[str]:
        """Flat ``key=value`` report lines."""
        out = [f"{k}={v!r}" for k, v in self.params.items()]
        out += [f"{k}_err={v!r}" for k, v in self.uncertainties.items()]
        out += [f"residual_norm={self.residual_norm!r}", f"converged={self.converged}", f"iterations={self.iterations}"]
        for k, v in self.extra.items():
            if isinstance(v, (int, float, str, bool, np.floating, np.integer)):
                out.append(f"{k}={v!r}" if isinstance(v, (float, np.floating)) else f"{k}={v}")
        return out


def _covariance(jac: np.ndarray, resid: np.ndarray) -> np.ndarray:
    m, n = jac.shape
    dof = max(m - n, 1)
    s2 = float(resid @ resid) / dof
    try:
        return np.linalg.pinv(jac.T @ jac) * s2
    except np.linalg.LinAlgError:
        return np.full((n, n), np.nan)


def least_squares_fit(
    residual: Callable[[np.ndarray], np.ndarray],
    p0: Sequence[float],
    names: Sequence[str],
    bounds=(-np.inf, np.inf),
    jac: Callable | str = "2-point",
    x_scale="jac",
) -> FitResult:
    """Minimise ``sum(residual(p)**2)`` from ``p0``."""
    res = optimize.least_squares(
        residual, np.asarray(p0, dtype=float), jac=jac, bounds=bounds, method="trf",
        xtol=TOL, ftol=TOL, gtol=TOL, max_nfev=MAX_ITER, x_scale=x_scale,
    )
    cov = _covariance(res.jac, res.fun)
    err = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return FitResult(
        params={k: float(v) for k, v in zip(names, res.x)},
        uncertainties={k: float(v) for k, v in zip(names, err)},
        residual_norm=float(np.linalg.norm(res.fun)),
        converged=bool(res.status > 0),
        iterations=int(res.njev if res.njev is not None else res.nfev),
        extra={"covariance": cov},
    )


# ---------------------------------------------------------------- model functions

def gaussian2d(x, y, amplitude, x0, y0, sigma_x, sigma_y, offset):
    return offset + amplitude * np.exp(-((x - x0) ** 2) / (2 * sigma_x**2) - ((y - y0) ** 2) / (2 * sigma_y**2))


def grid_model(rows_idx, cols_idx, offset_x, offset_y, spacing_x, spacing_y, shear, rotation_deg):
    """Target positions ``O + R(rotation) [[1, shear], [0, 1]] (c dx, r dy)``."""
    u = cols_idx * spacing_x + shear * rows_idx * spacing_y
    v = rows_idx * spacing_y
    th = np.radians(rotation_deg)
    c, s = np.cos(th), np.sin(th)
    return offset_x + c * u - s * v, offset_y + s * u + c * v


def g2_three_level(tau, c, tau2, tau3):
    t = np.abs(np.asarray(tau, dtype=float))
    return 1.0 - c * np.exp(-t / tau2) + (c - 1.0) * np.exp(-t / tau3)


def malus(theta_deg, i0, delta_i, phi_deg):
    t = np.radians(np.asarray(theta_deg, dtype=float) + phi_deg)
    return i0 + delta_i * np.cos(t) ** 2


def stretched_exp(t, t2, alpha):
    return np.exp(-((np.asarray(t, dtype=float) / t2) ** alpha))


# ---------------------------------------------------------------- localisation

@dataclass
class LocalizedEmitter:
    x: float
    y: float
    sigma_x: float
    sigma_y: float
    amplitude: float
    position_uncertainty: float
    offset: float = 0.0
    converged: bool = True


def find_peaks(image: PLImage, psf_fwhm: float = 200.0, threshold: float | None = None) -> list[tuple[int, int]]:
    """Local maxima well above the image background, as (row, col) pixels.

    The default threshold is the median background plus 30% of the way to
    the brightest pixel, but at least five Poisson standard deviations.
    """
    data = image.data
    bg = float(np.median(data))
    if threshold is None:
        threshold = bg + max(5.0 * math.sqrt(max(bg, 1.0)), 0.3 * (float(data.max()) - bg))
    size = max(3, int(round(psf_fwhm / image.pixel_nm)) | 1)
    smooth = ndimage.gaussian_filter(data.astype(float), psf_fwhm * FWHM_TO_SIGMA / image.pixel_nm / 2.0)
    peaks = (smooth == ndimage.maximum_filter(smooth, size=size, mode="nearest")) & (smooth > threshold)
    return [tuple(int(v) for v in rc) for rc in np.argwhere(peaks)]


def fit_spot(image: PLImage, row: int, col: int, psf_fwhm: float = 200.0, radius: float | None = None) -> LocalizedEmitter:
    """2D Gaussian surface fit around one pixel."""
    p = image.pixel_nm
    half = int(math.ceil((radius if radius is not None else 1.5 * psf_fwhm) / p))
    r0, r1 = max(0, row - half), min(image.height, row + half + 1)
    c0, c1 = max(0, col - half), min(image.width, col + half + 1)
    xs, ys = image.coords()
    X, Y = np.meshgrid(xs[c0:c1], ys[r0:r1])
    Z = image.data[r0:r1, c0:c1].astype(float)
    offset0 = float(np.median(image.data))
    sig0 = psf_fwhm * FWHM_TO_SIGMA
    amp0 = max(float(image.data[row, col]) - offset0, 1e-9)
    p0 = [amp0, xs[col], ys[row], sig0, sig0, offset0]
    x, y, z = X.ravel(), Y.ravel(), Z.ravel()

    def resid(q):
        return gaussian2d(x, y, *q) - z

    lo = [0.0, x.min(), y.min(), 0.1 * p, 0.1 * p, -np.inf]
    hi = [np.inf, x.max(), y.max(), 10 * psf_fwhm, 10 * psf_fwhm, np.inf]
    fit = least_squares_fit(resid, p0, ["amplitude", "x", "y", "sigma_x", "sigma_y", "offset"], bounds=(lo, hi), x_scale=1.0)
    q, e = fit.params, fit.uncertainties
    return LocalizedEmitter(
        x=q["x"], y=q["y"], sigma_x=q["sigma_x"], sigma_y=q["sigma_y"], amplitude=q["amplitude"],
        position_uncertainty=float(math.sqrt(0.5 * (e["x"] ** 2 + e["y"] ** 2))), offset=q["offset"],
        converged=fit.converged,
    )


def localize(image: PLImage, psf_fwhm: float = 200.0, threshold: float | None = None) -> list[LocalizedEmitter]:
    """Detect and fit every bright spot; unconverged fits are kept but flagged."""
    out = [fit_spot(image, r, c, psf_fwhm) for r, c in find_peaks(image, psf_fwhm, threshold)]
    return sorted(out, key=lambda e: (round(e.y, 6), round(e.x, 6)))


# ---------------------------------------------------------------- grid and scatter

def match_to_grid(points, rows: int, cols: int, spacing: float, origin=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Assign each point to its nearest nominal grid node.

    Returns ``(matched, index)`` where ``matched`` has one (x, y) per node in
    row-major order (NaN for empty nodes) and ``index`` the point used.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    matched = np.full((rows * cols, 2), np.nan)
    index = np.full(rows * cols, -1)
    best = np.full(rows * cols, np.inf)
    for k, (x, y) in enumerate(pts):
        c = int(round((x - origin[0]) / spacing))
        r = int(round((y - origin[1]) / spacing))
        if 0 <= r < rows and 0 <= c < cols:
            node = r * cols + c
            d = math.hypot(x - origin[0] - c * spacing, y - origin[1] - r * spacing)
            if d < best[node]:
                best[node], matched[node], index[node] = d, (x, y), k
    return matched, index


GRID_PARAMS = ["offset_x", "offset_y", "spacing_x", "spacing_y", "shear", "rotation"]


def fit_grid(points, rows: int, cols: int, indices=None) -> FitResult:
    """Least-squares regular grid (offset, spacings, shear, rotation).

    ``points`` are (x, y) in row-major node order unless ``indices`` gives
    each point's (row, col).  NaN points are skipped.  Per-point residuals
    (Δx, Δy) = measured - model are in ``extra["residuals"]``.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if indices is None:
        if len(pts) != rows * cols:
            raise ValueError(f"expected {rows * cols} points, got {len(pts)}")
        rr, cc = np.divmod(np.arange(rows * cols), cols)
    else:
        idx = np.asarray(indices, dtype=int).reshape(-1, 2)
        rr, cc = idx[:, 0], idx[:, 1]
    ok = np.all(np.isfinite(pts), axis=1)
    pts, rr, cc = pts[ok], rr[ok].astype(float), cc[ok].astype(float)
    design = np.column_stack([np.ones_like(rr), cc, rr])
    if len(pts) < 3 or np.linalg.matrix_rank(design) < 3:
        raise ValueError("grid nodes are collinear; spacing and rotation are not identifiable")

    # the affine fit decomposes exactly into the six grid parameters
    coef, *_ = np.linalg.lstsq(design, pts, rcond=None)
    a1, a2 = coef[1], coef[2]
    rot = math.atan2(a1[1], a1[0])
    c, s = math.cos(rot), math.sin(rot)
    b2 = np.array([c * a2[0] + s * a2[1], -s * a2[0] + c * a2[1]])
    p0 = [coef[0, 0], coef[0, 1], math.hypot(*a1), b2[1], b2[0] / b2[1], math.degrees(rot)]

    def resid(q):
        gx, gy = grid_model(rr, cc, *q)
        return np.concatenate([gx - pts[:, 0], gy - pts[:, 1]])

    fit = least_squares_fit(resid, p0, GRID_PARAMS, x_scale=1.0)
    gx, gy = grid_model(rr, cc, *fit.params.values())
    fit.extra["residuals"] = np.column_stack([pts[:, 0] - gx, pts[:, 1] - gy])
    fit.extra["n_points"] = int(len(pts))
    return fit


def mle_sigma(residuals) -> FitResult:
    """Width of an isotropic 2D Gaussian scatter.

    sigma^2 = sum(dx^2 + dy^2) / (2N), with Fisher-information standard error
    sigma / (2 sqrt(N)).
    """
    r = np.asarray(residuals, dtype=float).reshape(-1, 2)
    n = len(r)
    if n < 2:
        raise ValueError("need at least two residuals")
    ss = float(np.sum(r**2))
    sigma = math.sqrt(ss / (2.0 * n))
    if sigma == 0.0:
        log.warning("all residuals are zero; the maximum-likelihood width is degenerate")
    return FitResult({"sigma": sigma}, {"sigma": sigma / (2.0 * math.sqrt(n))}, 0.0, True, 0, {"n": n})


def neg_log_likelihood_2d(sigma: float, residuals) -> float:
    r = np.asarray(residuals, dtype=float).reshape(-1, 2)
    return float(len(r) * math.log(2 * math.pi * sigma**2) + np.sum(r**2) / (2 * sigma**2))


def fit_lorentzian(samples) -> FitResult:
    """Maximum-likelihood Cauchy location ``z0`` and half width ``gamma``."""
    z = np.asarray(samples, dtype=float).ravel()
    n = len(z)
    if n < 4:
        raise ValueError("need at least four samples")
    med = float(np.median(z))
    q1, q3 = np.percentile(z, [25, 75])
    scale = max(0.5 * float(q3 - q1), 1e-12 * max(1.0, abs(med)))

    def nll(q):
        z0, lg = q
        g = np.exp(lg)
        u = (z - z0) / g
        return n * lg + float(np.sum(np.log1p(u * u)))

    def grad(q):
        z0, lg = q
        g = np.exp(lg)
        u = (z - z0) / g
        w = 2 * u / (1 + u * u)
        return np.array([-float(np.sum(w)) / g, n - float(np.sum(w * u))])

    # work in units of the initial scale so the tolerance is relative
    res = optimize.minimize(
        lambda q: nll([med + scale * q[0], math.log(scale) + q[1]]),
        np.zeros(2),
        jac=lambda q: grad([med + scale * q[0], math.log(scale) + q[1]]) * np.array([scale, 1.0]),
        method="BFGS",
        options={"gtol": TOL * n, "maxiter": MAX_ITER},
    )
    z0 = med + scale * float(res.x[0])
    gamma = scale * math.exp(float(res.x[1]))
    se = gamma * math.sqrt(2.0 / n)  # Fisher information of the Cauchy law, both parameters
    gnorm = float(np.linalg.norm(res.jac))
    return FitResult({"z0": z0, "gamma": gamma}, {"z0": se, "gamma": se}, float(res.fun),
                     bool(res.success or gnorm < 1e-6 * n), int(res.nit), {"n": n})


# ---------------------------------------------------------------- photon statistics

def g2_background_params(signal: float, background: float) -> float:
    """Uncorrelated-light baseline a = 1 - (S / (S + B))**2."""
    if signal < 0 or background < 0:
        raise ValueError("rates must be non-negative")
    total = signal + background
    if total <= 0:
        raise ValueError("S + B must be positive")
    return 1.0 - (signal / total) ** 2


def g2_correct(raw, a: float):
    """Remove the background baseline: (g2_raw - a) / (1 - a)."""
    if a >= 1.0:
        raise ValueError("a >= 1: signal is indistinguishable from background")
    return (np.asarray(raw, dtype=float) - a) / (1.0 - a)


def fit_g2(tau, g2, p0=(1.2, 10.0, 150.0), free_depth: bool = False, sigma=None) -> FitResult:
    """Three-level autocorrelation fit.

    With ``free_depth`` the model is ``1 - d [c e^(-|τ|/τ2) - (c-1) e^(-|τ|/τ3)]``
    so that ``g2(0) = 1 - d`` is estimated from every bin rather than read off
    the noisy zero-delay bin; the estimate is ``extra["g2_zero"]``.
    """
    tau = np.asarray(tau, dtype=float)
    y = np.asarray(g2, dtype=float)
    if tau.min() > 0 or tau.max() < 0:
        raise ValueError("delays must span zero")
    w = 1.0 / np.asarray(sigma, dtype=float) if sigma is not None else np.ones_like(y)
    names = ["c", "tau2", "tau3"]
    lo, hi = [1.0, 1e-6, 1e-6], [np.inf, np.inf, np.inf]
    q0 = list(p0)
    if free_depth:
        names.append("depth")
        lo.append(0.0)
        hi.append(np.inf)
        q0.append(1.0)

    def resid(q):
        d = q[3] if free_depth else 1.0
        return w * ((1.0 - d * (1.0 - g2_three_level(tau, *q[:3]))) - y)

    fit = least_squares_fit(resid, q0, names, bounds=(lo, hi))
    if free_depth:
        fit.extra["g2_zero"] = 1.0 - fit.params["depth"]
        fit.extra["g2_zero_err"] = fit.uncertainties["depth"]
    return fit


def g2_zero_estimate(tau, g2_corrected, p0=(1.2, 10.0, 150.0), sigma=None) -> tuple[float, float]:
    """g2(0) and its standard error from a free-depth three-level fit."""
    fit = fit_g2(tau, g2_corrected, p0=p0, free_depth=True, sigma=sigma)
    return fit.extra["g2_zero"], fit.extra["g2_zero_err"]


# ---------------------------------------------------------------- polarization

class PlaneClass(enum.Enum):
    IN_PLANE = "InPlane"
    OUT_OF_PLANE = "OutOfPlane"


def fit_malus(theta_deg, intensity) -> FitResult:
    """Fit I(θ) = I0 + ΔI cos²(θ + φ) with ΔI >= 0 and φ in [0, 180).

    ``extra["visibility"]`` is ΔI / (ΔI + 2 I0); ``extra["phase_defined"]``
    is False for a flat scan.
    """
    th = np.asarray(theta_deg, dtype=float)
    y = np.asarray(intensity, dtype=float)
    if th.size < 4:
        raise ValueError("need at least four angles")
    span = np.ptp(np.mod(th, 360.0)) if th.size else 0.0
    if np.ptp(th) < 180.0 - 1e-9 and span < 180.0 - 1e-9:
        raise ValueError("angles must span at least 180 degrees")
    # linear in (1, cos 2θ, sin 2θ): I = I0 + ΔI/2 + ΔI/2 cos(2θ + 2φ)
    t = np.radians(th)
    A = np.column_stack([np.ones_like(t), np.cos(2 * t), np.sin(2 * t)])
    (m, ca, sa), *_ = np.linalg.lstsq(A, y, rcond=None)
    amp = math.hypot(ca, sa)
    scale = max(float(np.max(np.abs(y))), 1e-300)
    if amp <= 1e-12 * scale:
        resid = y - m
        return FitResult({"I0": float(m), "dI": 0.0, "phi": 0.0}, {"I0": float(np.std(resid) / math.sqrt(len(y))), "dI": 0.0, "phi": float("nan")},
                         float(np.linalg.norm(resid)), True, 0, {"visibility": 0.0, "phase_defined": False})
    # ca = (ΔI/2) cos 2φ and sa = -(ΔI/2) sin 2φ
    phi0 = math.degrees(0.5 * math.atan2(-sa, ca)) % 180.0
    p0 = [m - amp, 2 * amp, phi0]

    def resid(q):
        return malus(th, *q) - y

    fit = least_squares_fit(resid, p0, ["I0", "dI", "phi"], bounds=([-np.inf, 0.0, -np.inf], np.inf), x_scale=1.0)
    fit.params["phi"] = fit.params["phi"] % 180.0
    i0, di = fit.params["I0"], fit.params["dI"]
    fit.extra["visibility"] = di / (di + 2.0 * i0) if di + 2.0 * i0 > 0 else 0.0
    fit.extra["phase_defined"] = True
    return fit


def classify_orientation(visibility: float, threshold: float = 0.5) -> PlaneClass:
    if not 0.0 <= visibility <= 1.0 + 1e-9:
        raise ValueError("visibility must lie in [0, 1]")
    return PlaneClass.IN_PLANE if visibility >= threshold else PlaneClass.OUT_OF_PLANE


def orientation_histogram(phases_deg, in_plane_flags, reference_phases=None) -> dict[str, int]:
    """Bin classified emitters into the four axis classes.

    In-plane emitters are assigned to the in-plane class whose Malus phase is
    nearest (mod 180); out-of-plane emitters, whose phase is shared, are split
    by default into a single bucket ``"out_of_plane"``.
    """
    ref = reference_phases
    if ref is None:
        ref = {o.axis_class.value: malus_phase_deg(o) for o in map(Orientation, AXIS_CLASSES) if o.in_plane}
    hist = {k: 0 for k in ref}
    hist["out_of_plane"] = 0
    for ph, ip in zip(phases_deg, in_plane_flags):
        if not ip:
            hist["out_of_plane"] += 1
            continue
        best = min(ref, key=lambda k: abs(((ph - ref[k]) + 90.0) % 180.0 - 90.0))
        hist[best] += 1
    return hist


# ---------------------------------------------------------------- spin echo

def fit_echo(t, signal) -> FitResult:
    """Stretched exponential exp(-(t/T2)**alpha) with T2, alpha > 0."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(signal, dtype=float)
    if np.any(t <= 0):
        raise ValueError("times must be positive")
    ok = (y > 1e-6) & (y < 1 - 1e-6)
    if ok.sum() >= 2:
        slope, icept = np.polyfit(np.log(t[ok]), np.log(-np.log(y[ok])), 1)
        alpha0 = float(np.clip(slope, 0.2, 5.0))
        t20 = float(np.exp(-icept / slope)) if slope > 0 else float(np.median(t))
    else:
        alpha0, t20 = 1.0, float(np.median(t))
    ts = t20

    def resid(q):
        return stretched_exp(t, q[0] * ts, q[1]) - y

    fit = least_squares_fit(resid, [t20 / ts, alpha0], ["T2", "alpha"], bounds=([1e-12, 1e-6], [np.inf, np.inf]), x_scale=1.0)
    fit.params["T2"] *= ts
    fit.uncertainties["T2"] *= ts
    return fit


# ---------------------------------------------------------------- yield

class PoissonYield(NamedTuple):
    p0: float
    p1: float
    p_multi: float


def poisson_yield(mu: float) -> PoissonYield:
    """P(0), P(1) and P(>=2) for a Poisson number of NVs with mean ``mu``."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    p0 = math.exp(-mu)
    p1 = mu * p0
    return PoissonYield(p0, p1, max(0.0, 1.0 - p0 - p1))
