"""Independent reference computations used to check the package.

These deliberately avoid the package's own code paths: geometry is built
from the conventional cubic cell by brute force, integrals are done by
quadrature, likelihoods are maximised numerically.
"""

import itertools
import math

import numpy as np
from scipy import integrate, optimize, stats

A_DIAMOND = 0.357


def diamond_atoms(a=A_DIAMOND, cells=2):
    """Cartesian positions (cubic axes, nm) of every atom in a block of cells."""
    fcc = np.array([[0, 0, 0], [0, 0.5, 0.5], [0.5, 0, 0.5], [0.5, 0.5, 0]])
    basis = np.vstack([fcc, fcc + 0.25])
    pts = []
    for c in itertools.product(range(-cells, cells + 1), repeat=3):
        pts.extend((basis + np.array(c)) * a)
    return np.array(pts)


def brute_neighbors(origin, a=A_DIAMOND):
    """Nearest neighbours of an atom found by scanning all atoms in range."""
    atoms = diamond_atoms(a)
    d = np.linalg.norm(atoms - origin, axis=1)
    dmin = np.min(d[d > 1e-9])
    return atoms[np.abs(d - dmin) < 1e-9], dmin


def in_plane_110(direction):
    """True when a direction lies in the (110) plane (perpendicular to [110])."""
    n = np.array([1.0, 1.0, 0.0]) / math.sqrt(2.0)
    return abs(float(np.dot(direction, n))) < 1e-12


def psf(r, z, w0=297.0, zr=852.0, i0=1.0):
    wz2 = w0 * w0 * (1.0 + (z / zr) ** 2)
    return i0 / (1.0 + (z / zr) ** 2) * math.exp(-2.0 * r * r / wz2)


def focal_integral_quad(n, w0=297.0, zr=852.0):
    """Integral of PSF**n over space by nested quadrature in (r, z)."""
    def radial(z):
        wz = w0 * math.sqrt(1.0 + (z / zr) ** 2)
        f = lambda r: 2.0 * math.pi * r * psf(r, z, w0, zr) ** n
        return integrate.quad(f, 0.0, 6.0 * wz, epsabs=0, epsrel=1e-11, limit=200)[0]
    return 2.0 * integrate.quad(radial, 0.0, np.inf, epsabs=0, epsrel=1e-10, limit=400)[0]


def coulomb_energy(items, kappa, r_cut, exponent=1.0):
    """items: list of (charge, xyz_nm); O(n^2) sum of kappa q_i q_j / r^p."""
    u = 0.0
    for (qa, pa), (qb, pb) in itertools.combinations(items, 2):
        r = float(np.linalg.norm(np.subtract(pa, pb)))
        if r < r_cut:
            u += kappa * qa * qb / r**exponent
    return u


def mle_sigma_numeric(res):
    """Maximise the 2D Gaussian likelihood by root-finding its score in sigma.

    A direct minimiser of the flat likelihood only resolves sigma to about
    sqrt(machine epsilon); the score crosses zero steeply.
    """
    res = np.asarray(res, dtype=float)
    n = len(res)
    ss = float(np.sum(res**2))
    # d/ds [n log(2 pi s^2) + ss / (2 s^2)]
    score = lambda s: 2.0 * n / s - ss / s**3
    scale = math.sqrt(ss / n)
    return optimize.brentq(score, scale * 0.1, scale * 10.0, xtol=1e-15 * scale, rtol=1e-15)


def cauchy_mle(samples):
    loc, scale = stats.cauchy.fit(samples)
    return loc, scale


def poisson_pmf(k, mu):
    return float(stats.poisson.pmf(k, mu))


def malus(theta_deg, i0, di, phi_deg):
    return i0 + di * math.cos(math.radians(theta_deg + phi_deg)) ** 2


def g2_three_level(tau, c, t2, t3):
    t = abs(tau)
    return 1.0 - c * math.exp(-t / t2) + (c - 1.0) * math.exp(-t / t3)


def echo(t, t2, alpha):
    return math.exp(-((t / t2) ** alpha))
