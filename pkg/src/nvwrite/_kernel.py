"""Compiled per-pulse dynamics.

All positions are crystal units (a/4).  The state is a bundle of flat arrays
plus two typed dicts, owned by :class:`nvwrite.kmc.DefectWorld`; these
functions mutate it in place.  Randomness comes exclusively from the numpy
``Generator`` passed in, so a run is fixed by the generator's seed.
"""

from __future__ import annotations

import numpy as np
from numba import njit, types
from numba.typed import Dict

# defect kinds
DEAD = -1
VAC = 0
INT = 1
INT_ON_NV = 2  # interstitial that moved onto an unstable NV's vacancy this pulse

# NV states
NV_GONE = 0
NV_BOUND = 1
NV_STABLE = 2

# event codes
GENERATED = 0
HOPPED = 1
RECOMBINED = 2
NV_FORMED = 3
NV_UNBOUND = 4
NV_DESTROYED = 5
NV_STABILIZED = 6
DAMAGE = 7
EVENT_COLS = 9  # pulse, type, ax, ay, az, bx, by, bz, extra

# counters
C_ND = 0
C_NNV = 1
C_PULSE = 2
C_DAMAGE = 3
C_NEV = 4
C_HOPS = 5
C_SKIPPED = 6
C_OVERFLOW = 7
C_NFREED = 8  # a nitrogen was released since the last binding sweep
N_COUNTERS = 9

# float parameters
F_UNIT = 0
F_W0 = 1
F_ZR = 2
F_E50V = 3
F_NV = 4
F_E50I = 5
F_NI = 6
F_KAPPA = 7
F_THETA = 8
F_RCUT = 9  # crystal units
F_PEXP = 10
F_PUNBIND = 11
F_RINT = 12  # crystal units
F_RSTABLE = 13  # crystal units
F_NPROB = 14  # nitrogen occupation probability per site
F_NGEN = 15
F_NU = 16
F_ZSCALE = 17
N_FPARAMS = 18

# int parameters
I_XLO = 0
I_XHI = 1
I_YLO = 2
I_YHI = 3
I_ZLO = 4
I_ZHI = 5
I_DAMAGE = 6
I_RECORD_HOPS = 7
N_IPARAMS = 8

BLOCK = 256  # block edge, crystal units (64 conventional cells)
_OFF = 1 << 20
_SQ2 = np.sqrt(2.0)

BONDS = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.int64)
BOND_CLASS = np.array([0, 3, 2, 1], dtype=np.int64)
CELL_ATOMS = np.array(
    [[0, 0, 0], [0, 2, 2], [2, 0, 2], [2, 2, 0], [1, 1, 1], [1, 3, 3], [3, 1, 3], [3, 3, 1]],
    dtype=np.int64,
)


def new_occupancy():
    return Dict.empty(key_type=types.int64, value_type=types.int64)


def new_blocks():
    return Dict.empty(key_type=types.int64, value_type=types.int64[:])


@njit(cache=True)
def site_key(x, y, z):
    return ((x + _OFF) << 42) | ((y + _OFF) << 21) | (z + _OFF)


@njit(cache=True)
def key_xyz(key):
    mask = (1 << 21) - 1
    return (key >> 42) - _OFF, ((key >> 21) & mask) - _OFF, (key & mask) - _OFF


@njit(cache=True)
def _occ_get(occ, key):
    if key in occ:
        return occ[key]
    return -1


@njit(cache=True)
def _in_box(x, y, z, ip):
    return (ip[I_XLO] <= x < ip[I_XHI]) and (ip[I_YLO] <= y < ip[I_YHI]) and (ip[I_ZLO] <= z < ip[I_ZHI])


@njit(cache=True)
def _norm_psf(x, y, z, fp):
    u = fp[F_UNIT]
    lx = (-x + y) / _SQ2 * u
    ly = z * u
    lz = (x + y) / _SQ2 * u
    s = 1.0 + (lz / fp[F_ZR]) ** 2
    wz2 = fp[F_W0] ** 2 * s
    return np.exp(-2.0 * (lx * lx + ly * ly) / wz2) / s


@njit(cache=True)
def _hop_prob(kind, x, y, z, energy, fp):
    if energy <= 0.0:
        return 0.0
    ihat = _norm_psf(x, y, z, fp)
    if kind == VAC:
        p = (energy * ihat / fp[F_E50V]) ** fp[F_NV]
    else:
        p = (energy * ihat / fp[F_E50I]) ** fp[F_NI]
    return min(1.0, p)


# ---------------------------------------------------------------- nitrogens

@njit(cache=True)
def _block_of(x, y, z):
    return x // BLOCK, y // BLOCK, z // BLOCK


@njit(cache=True)
def get_block(bx, by, bz, blocks, ip, fp, rng):
    """Nitrogens of one block as a flat [x, y, z, state]* array; sampled on first use."""
    bkey = site_key(bx, by, bz)
    if bkey in blocks:
        return blocks[bkey]
    p = fp[F_NPROB]
    ncell = BLOCK // 4
    nsites = 8 * ncell * ncell * ncell
    count = 0
    if p > 0.0:
        count = rng.binomial(nsites, p)
    picked = np.empty(count, dtype=np.int64)
    n = 0
    while n < count:
        idx = rng.integers(0, nsites)
        dup = False
        for m in range(n):
            if picked[m] == idx:
                dup = True
                break
        if not dup:
            picked[n] = idx
            n += 1
    buf = np.empty(4 * count, dtype=np.int64)
    kept = 0
    for m in range(count):
        idx = picked[m]
        atom = idx % 8
        cell = idx // 8
        cx = cell % ncell
        cy = (cell // ncell) % ncell
        cz = cell // (ncell * ncell)
        x = bx * BLOCK + 4 * cx + CELL_ATOMS[atom, 0]
        y = by * BLOCK + 4 * cy + CELL_ATOMS[atom, 1]
        z = bz * BLOCK + 4 * cz + CELL_ATOMS[atom, 2]
        if _in_box(x, y, z, ip):
            buf[4 * kept] = x
            buf[4 * kept + 1] = y
            buf[4 * kept + 2] = z
            buf[4 * kept + 3] = 0
            kept += 1
    arr = buf[: 4 * kept].copy()
    blocks[bkey] = arr
    return arr


@njit(cache=True)
def nitrogen_slot(x, y, z, blocks, ip, fp, rng):
    """Index of the nitrogen record at a site within its block array, or -1."""
    bx, by, bz = _block_of(x, y, z)
    arr = get_block(bx, by, bz, blocks, ip, fp, rng)
    for m in range(arr.shape[0] // 4):
        if arr[4 * m] == x and arr[4 * m + 1] == y and arr[4 * m + 2] == z:
            return m
    return -1


@njit(cache=True)
def set_nitrogen_state(x, y, z, state, blocks, ip, fp, rng):
    bx, by, bz = _block_of(x, y, z)
    arr = get_block(bx, by, bz, blocks, ip, fp, rng)
    for m in range(arr.shape[0] // 4):
        if arr[4 * m] == x and arr[4 * m + 1] == y and arr[4 * m + 2] == z:
            arr[4 * m + 3] = state
            return True
    return False


@njit(cache=True)
def add_nitrogen(x, y, z, blocks, ip, fp, rng):
    bx, by, bz = _block_of(x, y, z)
    arr = get_block(bx, by, bz, blocks, ip, fp, rng)
    for m in range(arr.shape[0] // 4):
        if arr[4 * m] == x and arr[4 * m + 1] == y and arr[4 * m + 2] == z:
            return
    out = np.empty(arr.shape[0] + 4, dtype=np.int64)
    out[: arr.shape[0]] = arr
    out[arr.shape[0]] = x
    out[arr.shape[0] + 1] = y
    out[arr.shape[0] + 2] = z
    out[arr.shape[0] + 3] = 0
    blocks[site_key(bx, by, bz)] = out


# ---------------------------------------------------------------- events

@njit(cache=True)
def _emit(ev, counts, etype, ax, ay, az, bx, by, bz, extra):
    n = counts[C_NEV]
    if n >= ev.shape[0]:
        counts[C_OVERFLOW] += 1
        return
    ev[n, 0] = counts[C_PULSE]
    ev[n, 1] = etype
    ev[n, 2] = ax
    ev[n, 3] = ay
    ev[n, 4] = az
    ev[n, 5] = bx
    ev[n, 6] = by
    ev[n, 7] = bz
    ev[n, 8] = extra
    counts[C_NEV] = n + 1


# ---------------------------------------------------------------- strain

@njit(cache=True)
def _pair(kappa, qq, r2, rcut2, unit, pexp):
    if r2 >= rcut2 or r2 == 0.0:
        return 0.0  # coincident only for blocked candidates
    r = np.sqrt(r2) * unit
    if pexp == 1.0:
        return kappa * qq / r
    return kappa * qq / r**pexp


@njit(cache=True)
def _energies(i, cand, ncand, dpos, dkind, nd, blocks, ip, fp, rng, out):
    """Strain energy of defect i at each candidate position (cand[0] is its own)."""
    kappa = fp[F_KAPPA]
    unit = fp[F_UNIT]
    pexp = fp[F_PEXP]
    rcut = fp[F_RCUT]
    rcut2 = rcut * rcut
    qi = -1.0 if dkind[i] == VAC else 1.0
    for c in range(ncand):
        out[c] = 0.0
    if kappa == 0.0:
        return
    reach = rcut + 2.0
    px = dpos[i, 0]
    py = dpos[i, 1]
    pz = dpos[i, 2]
    for j in range(nd):
        if j == i:
            continue
        kj = dkind[j]
        if kj != VAC and kj != INT:
            continue
        dx = dpos[j, 0] - px
        dy = dpos[j, 1] - py
        dz = dpos[j, 2] - pz
        if abs(dx) > reach or abs(dy) > reach or abs(dz) > reach:
            continue
        qq = qi * (-1.0 if kj == VAC else 1.0)
        for c in range(ncand):
            ex = dpos[j, 0] - cand[c, 0]
            ey = dpos[j, 1] - cand[c, 1]
            ez = dpos[j, 2] - cand[c, 2]
            out[c] += _pair(kappa, qq, float(ex * ex + ey * ey + ez * ez), rcut2, unit, pexp)
    r = int(np.ceil(reach))
    for bx in range((px - r) // BLOCK, (px + r) // BLOCK + 1):
        for by in range((py - r) // BLOCK, (py + r) // BLOCK + 1):
            for bz in range((pz - r) // BLOCK, (pz + r) // BLOCK + 1):
                arr = get_block(bx, by, bz, blocks, ip, fp, rng)
                for m in range(arr.shape[0] // 4):
                    if arr[4 * m + 3] != 0:
                        continue  # bound in an NV: neutral
                    for c in range(ncand):
                        ex = arr[4 * m] - cand[c, 0]
                        ey = arr[4 * m + 1] - cand[c, 1]
                        ez = arr[4 * m + 2] - cand[c, 2]
                        out[c] += _pair(kappa, qi, float(ex * ex + ey * ey + ez * ez), rcut2, unit, pexp)


# ---------------------------------------------------------------- defect bookkeeping

@njit(cache=True)
def _add_defect(kind, x, y, z, dpos, dkind, occ, counts):
    n = counts[C_ND]
    if n >= dpos.shape[0]:
        counts[C_OVERFLOW] += 1
        return -1
    dpos[n, 0] = x
    dpos[n, 1] = y
    dpos[n, 2] = z
    dpos[n, 3] = 1
    dkind[n] = kind
    occ[site_key(x, y, z)] = n
    counts[C_ND] = n + 1
    return n


@njit(cache=True)
def _compact(dpos, dkind, occ, counts):
    n = counts[C_ND]
    w = 0
    for r in range(n):
        k = dkind[r]
        if k == DEAD:
            continue
        if w != r:
            dpos[w, 0] = dpos[r, 0]
            dpos[w, 1] = dpos[r, 1]
            dpos[w, 2] = dpos[r, 2]
            dpos[w, 3] = dpos[r, 3]
            dkind[w] = k
            if k != INT_ON_NV:
                occ[site_key(dpos[w, 0], dpos[w, 1], dpos[w, 2])] = w
        w += 1
    counts[C_ND] = w


@njit(cache=True)
def _site_free(x, y, z, occ, blocks, ip, fp, rng):
    if not _in_box(x, y, z, ip):
        return False
    if site_key(x, y, z) in occ:
        return False
    return nitrogen_slot(x, y, z, blocks, ip, fp, rng) < 0


@njit(cache=True)
def _nearest_site(px, py, pz):
    """Nearest diamond site to a continuous point in crystal units."""
    best_d = 1e300
    bx = 0
    by = 0
    bz = 0
    for shift in range(2):
        q0 = px - shift
        q1 = py - shift
        q2 = pz - shift
        r0 = 2.0 * np.round(q0 / 2.0)
        r1 = 2.0 * np.round(q1 / 2.0)
        r2 = 2.0 * np.round(q2 / 2.0)
        if int(r0 + r1 + r2) % 4 != 0:
            e0 = q0 - r0
            e1 = q1 - r1
            e2 = q2 - r2
            if abs(e0) >= abs(e1) and abs(e0) >= abs(e2):
                r0 += 2.0 if e0 > 0 else -2.0
            elif abs(e1) >= abs(e2):
                r1 += 2.0 if e1 > 0 else -2.0
            else:
                r2 += 2.0 if e2 > 0 else -2.0
        c0 = r0 + shift
        c1 = r1 + shift
        c2 = r2 + shift
        d = (c0 - px) ** 2 + (c1 - py) ** 2 + (c2 - pz) ** 2
        if d < best_d:
            best_d = d
            bx = int(c0)
            by = int(c1)
            bz = int(c2)
    return bx, by, bz


@njit(cache=True)
def generate_pairs(mu, dpos, dkind, occ, blocks, ev, counts, ip, fp, rng):
    """Poisson(mu) Frenkel pairs placed with density ∝ Î**n_gen."""
    if mu <= 0.0:
        return 0
    npairs = rng.poisson(mu)
    unit = fp[F_UNIT]
    made = 0
    for _ in range(npairs):
        placed = False
        for _attempt in range(10):
            t = rng.standard_normal() / np.sqrt(rng.chisquare(fp[F_NU]) / fp[F_NU])
            lz = fp[F_ZSCALE] * t
            wz = fp[F_W0] * np.sqrt(1.0 + (lz / fp[F_ZR]) ** 2)
            sig = wz / (2.0 * np.sqrt(fp[F_NGEN]))
            lx = sig * rng.standard_normal()
            ly = sig * rng.standard_normal()
            cx = (lz - lx) / _SQ2 / unit
            cy = (lz + lx) / _SQ2 / unit
            cz = ly / unit
            vx, vy, vz = _nearest_site(cx, cy, cz)
            if not _site_free(vx, vy, vz, occ, blocks, ip, fp, rng):
                continue
            sign = 1 if (vx & 1) == 0 else -1
            start = rng.integers(0, 4)
            for m in range(4):
                b = (start + m) % 4
                ix = vx + sign * BONDS[b, 0]
                iy = vy + sign * BONDS[b, 1]
                iz = vz + sign * BONDS[b, 2]
                if _site_free(ix, iy, iz, occ, blocks, ip, fp, rng):
                    if _add_defect(VAC, vx, vy, vz, dpos, dkind, occ, counts) < 0:
                        return made
                    if _add_defect(INT, ix, iy, iz, dpos, dkind, occ, counts) < 0:
                        return made
                    _emit(ev, counts, GENERATED, vx, vy, vz, ix, iy, iz, 0)
                    placed = True
                    break
            if placed:
                break
        if placed:
            made += 1
        else:
            counts[C_SKIPPED] += 1
    return made


# ---------------------------------------------------------------- one pulse

@njit(cache=True)
def _nv_at(key, occ):
    code = _occ_get(occ, key)
    if code <= -2:
        return -2 - code
    return -1


@njit(cache=True)
def _touches_interstitial(x, y, z, occ, dkind):
    sign = 1 if (x & 1) == 0 else -1
    for b in range(4):
        j = _occ_get(occ, site_key(x + sign * BONDS[b, 0], y + sign * BONDS[b, 1], z + sign * BONDS[b, 2]))
        if j >= 0 and dkind[j] == INT:
            return True
    return False


@njit(cache=True)
def _any_interstitial_within(x, y, z, r, dpos, dkind, nd):
    r2 = r * r
    for j in range(nd):
        if dkind[j] != INT:
            continue
        dx = float(dpos[j, 0] - x)
        dy = float(dpos[j, 1] - y)
        dz = float(dpos[j, 2] - z)
        if dx * dx + dy * dy + dz * dz <= r2:
            return True
    return False


@njit(cache=True)
def diffusion_pulse(energy, mu, dpos, dkind, occ, blocks, nv_n, nv_v, nv_info, nv_u, nv_bound,
                    ev, counts, ip, fp, rng):
    """One diffusion pulse; returns True if the damage flag was raised."""
    record_hops = ip[I_RECORD_HOPS] != 0
    # (1) generation
    generate_pairs(mu, dpos, dkind, occ, blocks, ev, counts, ip, fp, rng)
    nd = counts[C_ND]

    # (2) hops in random order
    order = rng.permutation(nd)
    cand = np.empty((5, 3), dtype=np.int64)
    ok = np.zeros(5, dtype=np.bool_)
    energies = np.empty(5)
    weights = np.empty(4)
    theta = fp[F_THETA]
    for oi in range(nd):
        i = order[oi]
        kind = dkind[i]
        if kind != VAC and kind != INT:
            continue
        px = dpos[i, 0]
        py = dpos[i, 1]
        pz = dpos[i, 2]
        if rng.random() >= _hop_prob(kind, px, py, pz, energy, fp):
            continue
        sign = 1 if (px & 1) == 0 else -1
        cand[0, 0] = px
        cand[0, 1] = py
        cand[0, 2] = pz
        nok = 0
        for b in range(4):
            qx = px + sign * BONDS[b, 0]
            qy = py + sign * BONDS[b, 1]
            qz = pz + sign * BONDS[b, 2]
            cand[b + 1, 0] = qx
            cand[b + 1, 1] = qy
            cand[b + 1, 2] = qz
            good = _in_box(qx, qy, qz, ip)
            if good:
                code = _occ_get(occ, site_key(qx, qy, qz))
                if code >= 0:
                    good = False
                elif code <= -2:
                    good = kind == INT and nv_info[-2 - code, 0] == NV_BOUND
                elif nitrogen_slot(qx, qy, qz, blocks, ip, fp, rng) >= 0:
                    good = False
            ok[b + 1] = good
            if good:
                nok += 1
        if nok == 0:
            continue
        _energies(i, cand, 5, dpos, dkind, nd, blocks, ip, fp, rng, energies)
        # exp(-max(0, dU)/theta), rescaled by the smallest penalty to avoid underflow
        floor = 1e300
        for b in range(4):
            if ok[b + 1]:
                floor = min(floor, max(0.0, energies[b + 1] - energies[0]))
        total = 0.0
        for b in range(4):
            if ok[b + 1]:
                w = np.exp(-(max(0.0, energies[b + 1] - energies[0]) - floor) / theta)
            else:
                w = 0.0
            weights[b] = w
            total += w
        pick = rng.random() * total
        chosen = 3
        acc = 0.0
        for b in range(4):
            acc += weights[b]
            if pick < acc and weights[b] > 0.0:
                chosen = b
                break
        while weights[chosen] == 0.0:
            chosen -= 1
        qx = cand[chosen + 1, 0]
        qy = cand[chosen + 1, 1]
        qz = cand[chosen + 1, 2]
        del occ[site_key(px, py, pz)]
        dpos[i, 0] = qx
        dpos[i, 1] = qy
        dpos[i, 2] = qz
        dpos[i, 3] = 1
        qkey = site_key(qx, qy, qz)
        if qkey in occ:
            dkind[i] = INT_ON_NV
        else:
            occ[qkey] = i
        counts[C_HOPS] += 1
        if record_hops:
            _emit(ev, counts, HOPPED, px, py, pz, qx, qy, qz, kind)

    # (3) recombination of adjacent V-I pairs; only defects that moved or
    # appeared since the last sweep can have gained a partner
    for m in range(nd):
        if dpos[m, 3] == 0:
            continue
        km = dkind[m]
        if km != VAC and km != INT:
            continue
        other = INT if km == VAC else VAC
        sign = 1 if (dpos[m, 0] & 1) == 0 else -1
        for b in range(4):
            qx = dpos[m, 0] + sign * BONDS[b, 0]
            qy = dpos[m, 1] + sign * BONDS[b, 1]
            qz = dpos[m, 2] + sign * BONDS[b, 2]
            j = _occ_get(occ, site_key(qx, qy, qz))
            if j >= 0 and dkind[j] == other:
                i = m if km == VAC else j
                k = j if km == VAC else m
                _emit(ev, counts, RECOMBINED, dpos[i, 0], dpos[i, 1], dpos[i, 2],
                      dpos[k, 0], dpos[k, 1], dpos[k, 2], 0)
                del occ[site_key(dpos[m, 0], dpos[m, 1], dpos[m, 2])]
                del occ[site_key(qx, qy, qz)]
                dkind[m] = DEAD
                dkind[j] = DEAD
                break

    # (4) binding of vacancies adjacent to free nitrogen
    nbr_ok = np.zeros(4, dtype=np.bool_)
    sweep_all = counts[C_NFREED] != 0
    counts[C_NFREED] = 0
    for i in range(nd):
        if dkind[i] != VAC:
            continue
        if dpos[i, 3] == 0 and not sweep_all:
            continue
        vx = dpos[i, 0]
        vy = dpos[i, 1]
        vz = dpos[i, 2]
        sign = 1 if (vx & 1) == 0 else -1
        nfree = 0
        for b in range(4):
            qx = vx + sign * BONDS[b, 0]
            qy = vy + sign * BONDS[b, 1]
            qz = vz + sign * BONDS[b, 2]
            nbr_ok[b] = False
            bx, by, bz = _block_of(qx, qy, qz)
            arr = get_block(bx, by, bz, blocks, ip, fp, rng)
            for m in range(arr.shape[0] // 4):
                if arr[4 * m] == qx and arr[4 * m + 1] == qy and arr[4 * m + 2] == qz and arr[4 * m + 3] == 0:
                    nbr_ok[b] = True
                    nfree += 1
        if nfree == 0:
            continue
        sel = rng.integers(0, nfree) if nfree > 1 else 0
        b = 0
        seen = 0
        for bb in range(4):
            if nbr_ok[bb]:
                if seen == sel:
                    b = bb
                    break
                seen += 1
        nx_ = vx + sign * BONDS[b, 0]
        ny_ = vy + sign * BONDS[b, 1]
        nz_ = vz + sign * BONDS[b, 2]
        k = counts[C_NNV]
        if k >= nv_n.shape[0]:
            counts[C_OVERFLOW] += 1
            continue
        set_nitrogen_state(nx_, ny_, nz_, 1, blocks, ip, fp, rng)
        nv_n[k, 0] = nx_
        nv_n[k, 1] = ny_
        nv_n[k, 2] = nz_
        nv_v[k, 0] = vx
        nv_v[k, 1] = vy
        nv_v[k, 2] = vz
        nv_info[k, 0] = NV_BOUND
        nv_info[k, 1] = BOND_CLASS[b]
        nv_info[k, 2] = counts[C_PULSE]
        nv_u[k] = rng.random()
        nv_bound[k] = 0
        counts[C_NNV] = k + 1
        occ[site_key(vx, vy, vz)] = -2 - k
        dkind[i] = DEAD
        _emit(ev, counts, NV_FORMED, nx_, ny_, nz_, vx, vy, vz, k)

    for i in range(nd):
        dpos[i, 3] = 0

    # (5) unbinding while an interstitial is close
    free_sites = np.empty((3, 3), dtype=np.int64)
    safe = np.zeros(3, dtype=np.bool_)
    for k in range(counts[C_NNV]):
        if nv_info[k, 0] != NV_BOUND:
            continue
        vx = nv_v[k, 0]
        vy = nv_v[k, 1]
        vz = nv_v[k, 2]
        pending = False
        for j in range(nd):
            if dkind[j] == INT_ON_NV and dpos[j, 0] == vx and dpos[j, 1] == vy and dpos[j, 2] == vz:
                pending = True
                break
        if pending:
            continue
        if not _any_interstitial_within(vx, vy, vz, fp[F_RINT], dpos, dkind, nd):
            continue
        if rng.random() >= fp[F_PUNBIND]:
            continue
        sign = 1 if (vx & 1) == 0 else -1
        nf = 0
        for b in range(4):
            qx = vx + sign * BONDS[b, 0]
            qy = vy + sign * BONDS[b, 1]
            qz = vz + sign * BONDS[b, 2]
            if qx == nv_n[k, 0] and qy == nv_n[k, 1] and qz == nv_n[k, 2]:
                continue
            if _site_free(qx, qy, qz, occ, blocks, ip, fp, rng):
                free_sites[nf, 0] = qx
                free_sites[nf, 1] = qy
                free_sites[nf, 2] = qz
                safe[nf] = not _touches_interstitial(qx, qy, qz, occ, dkind)
                nf += 1
        if nf == 0:
            continue
        # the released vacancy steps away from the interstitial when it can
        nsafe = 0
        for m in range(nf):
            if safe[m]:
                nsafe += 1
        if nsafe > 0 and nsafe < nf:
            w = 0
            for m in range(nf):
                if safe[m]:
                    free_sites[w, 0] = free_sites[m, 0]
                    free_sites[w, 1] = free_sites[m, 1]
                    free_sites[w, 2] = free_sites[m, 2]
                    w += 1
            nf = nsafe
        s = rng.integers(0, nf) if nf > 1 else 0
        del occ[site_key(vx, vy, vz)]
        set_nitrogen_state(nv_n[k, 0], nv_n[k, 1], nv_n[k, 2], 0, blocks, ip, fp, rng)
        counts[C_NFREED] = 1
        nv_info[k, 0] = NV_GONE
        nv_info[k, 3] = counts[C_PULSE]
        _add_defect(VAC, free_sites[s, 0], free_sites[s, 1], free_sites[s, 2], dpos, dkind, occ, counts)
        _emit(ev, counts, NV_UNBOUND, nv_n[k, 0], nv_n[k, 1], nv_n[k, 2],
              free_sites[s, 0], free_sites[s, 1], free_sites[s, 2], k)
    nd_all = counts[C_ND]

    # (6) destruction by an interstitial that hopped onto the vacancy
    for j in range(nd):
        if dkind[j] != INT_ON_NV:
            continue
        key = site_key(dpos[j, 0], dpos[j, 1], dpos[j, 2])
        k = _nv_at(key, occ)
        dkind[j] = DEAD
        if k < 0:
            continue
        del occ[key]
        set_nitrogen_state(nv_n[k, 0], nv_n[k, 1], nv_n[k, 2], 0, blocks, ip, fp, rng)
        counts[C_NFREED] = 1
        nv_info[k, 0] = NV_GONE
        nv_info[k, 3] = counts[C_PULSE]
        _emit(ev, counts, NV_DESTROYED, nv_n[k, 0], nv_n[k, 1], nv_n[k, 2],
              nv_v[k, 0], nv_v[k, 1], nv_v[k, 2], k)

    # (7) stabilisation once no interstitial is near
    for k in range(counts[C_NNV]):
        if nv_info[k, 0] != NV_BOUND:
            continue
        if not _any_interstitial_within(nv_v[k, 0], nv_v[k, 1], nv_v[k, 2], fp[F_RSTABLE], dpos, dkind, nd_all):
            nv_info[k, 0] = NV_STABLE
            _emit(ev, counts, NV_STABILIZED, nv_n[k, 0], nv_n[k, 1], nv_n[k, 2],
                  nv_v[k, 0], nv_v[k, 1], nv_v[k, 2], k)

    _compact(dpos, dkind, occ, counts)
    for k in range(counts[C_NNV]):
        if nv_info[k, 0] != NV_GONE:
            nv_bound[k] += 1

    # (8) runaway damage
    n_vac = 0
    for i in range(counts[C_ND]):
        if dkind[i] == VAC:
            n_vac += 1
    counts[C_PULSE] += 1
    if n_vac > ip[I_DAMAGE]:
        counts[C_DAMAGE] = 1
        _emit(ev, counts, DAMAGE, n_vac, 0, 0, 0, 0, 0, 0)
        return True
    return False


@njit(cache=True)
def run_pulses(n, energy, mu, dpos, dkind, occ, blocks, nv_n, nv_v, nv_info, nv_u, nv_bound,
               ev, counts, ip, fp, rng, event_reserve):
    """Apply up to n diffusion pulses; stops early on damage or a nearly full event buffer."""
    done = 0
    while done < n:
        if counts[C_DAMAGE] != 0:
            break
        if counts[C_NEV] > ev.shape[0] - event_reserve:
            break
        diffusion_pulse(energy, mu, dpos, dkind, occ, blocks, nv_n, nv_v, nv_info, nv_u, nv_bound,
                        ev, counts, ip, fp, rng)
        done += 1
    return done


@njit(cache=True)
def seed_pulse(mu, dpos, dkind, occ, blocks, ev, counts, ip, fp, rng):
    made = generate_pairs(mu, dpos, dkind, occ, blocks, ev, counts, ip, fp, rng)
    counts[C_PULSE] += 1
    return made


@njit(cache=True)
def total_strain(dpos, dkind, nd, nit, kappa, rcut, unit, pexp):
    """Pairwise strain energy of defects plus a list of free nitrogens (crystal units)."""
    m = nd + nit.shape[0]
    xs = np.empty((m, 3), dtype=np.int64)
    qs = np.empty(m)
    c = 0
    for i in range(nd):
        if dkind[i] == VAC or dkind[i] == INT:
            xs[c, 0] = dpos[i, 0]
            xs[c, 1] = dpos[i, 1]
            xs[c, 2] = dpos[i, 2]
            qs[c] = -1.0 if dkind[i] == VAC else 1.0
            c += 1
    for i in range(nit.shape[0]):
        xs[c] = nit[i]
        qs[c] = 1.0
        c += 1
    u = 0.0
    rcut2 = rcut * rcut
    for a in range(c):
        for b in range(a + 1, c):
            dx = xs[a, 0] - xs[b, 0]
            dy = xs[a, 1] - xs[b, 1]
            dz = xs[a, 2] - xs[b, 2]
            r2 = float(dx * dx + dy * dy + dz * dz)
            if r2 == 0.0:
                return np.nan
            u += _pair(kappa, qs[a] * qs[b], r2, rcut2, unit, pexp)
    return u
