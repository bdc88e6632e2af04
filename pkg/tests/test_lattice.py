import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from nvwrite.lattice import (
    AXIS_CLASSES,
    DIAMOND_LATTICE_CONSTANT_NM,
    AxisClass,
    LatticeSite,
    Orientation,
    WorldConfig,
    bond_orientation,
    from_crystal,
    neighbors,
    position_nm,
    sample_nitrogens,
    to_crystal,
)

import oracles as O

NN_DISTANCE = 0.1545855345755223  # sqrt(3)/4 * 0.357, frozen from the brute-force oracle

sites = st.builds(
    LatticeSite,
    st.integers(-50, 50), st.integers(-50, 50), st.integers(-50, 50), st.integers(0, 1),
)


def test_origin_neighbors_distance_matches_brute_force():
    origin = LatticeSite(0, 0, 0, 0)
    nbrs = neighbors(origin)
    assert len(nbrs) == 4
    d = [np.linalg.norm(position_nm(s) - position_nm(origin)) for s in nbrs]
    np.testing.assert_allclose(d, NN_DISTANCE, rtol=1e-12)
    _, dmin = O.brute_neighbors(np.zeros(3))
    assert dmin == pytest.approx(NN_DISTANCE, rel=1e-14)


def test_neighbor_positions_match_brute_force_set():
    # compare in the cubic frame, where the oracle works
    from nvwrite.lattice import LAB_FROM_CRYSTAL

    a = DIAMOND_LATTICE_CONSTANT_NM
    for basis in (0, 1):
        s = LatticeSite(1, -2, 3, basis)
        cub = lambda t: to_crystal(t) * a / 4.0
        want, _ = O.brute_neighbors(cub(s))
        got = np.array([cub(n) for n in neighbors(s)])
        key = lambda arr: sorted(map(tuple, np.round(arr, 9)))
        assert key(got) == key(want)
        # lab positions are a rotation of the cubic ones
        np.testing.assert_allclose(position_nm(s), LAB_FROM_CRYSTAL @ cub(s), atol=1e-12)


@given(sites)
def test_neighbors_opposite_basis_and_symmetric(s):
    for n in neighbors(s):
        assert n.basis != s.basis
        assert s in neighbors(n)


@given(sites)
def test_two_steps_return_to_same_sublattice(s):
    for n in neighbors(s):
        for m in neighbors(n):
            assert m.basis == s.basis


def test_out_of_bounds_neighbors_flagged():
    cfg = WorldConfig(bounds=(2, 2, 2))
    lim = cfg.crystal_limits
    corner = from_crystal(lim[:, 0])
    nb = neighbors(corner, cfg)
    assert len(nb) == 4
    assert not all(nb.in_bounds)
    assert any(nb.in_bounds)
    with pytest.raises(ValueError):
        neighbors(from_crystal(lim[:, 0] - 4), cfg)


def test_position_origin_and_in_plane_cell_step():
    assert np.allclose(position_nm(LatticeSite(0, 0, 0, 0)), 0.0)
    # (i, j, k) = (1, 1, -1) is one cubic cell along [001], the lab y axis
    step = position_nm(LatticeSite(1, 1, -1, 0)) - position_nm(LatticeSite(0, 0, 0, 0))
    assert np.linalg.norm(step) == pytest.approx(DIAMOND_LATTICE_CONSTANT_NM, rel=1e-13)
    assert step[2] == pytest.approx(0.0, abs=1e-15)


@given(sites, sites, sites)
def test_distance_translation_invariant(a, b, t):
    shift = lambda s: LatticeSite(s.i + t.i, s.j + t.j, s.k + t.k, s.basis)
    d0 = np.linalg.norm(position_nm(a) - position_nm(b))
    d1 = np.linalg.norm(position_nm(shift(a)) - position_nm(shift(b)))
    assert d1 == pytest.approx(d0, rel=1e-12, abs=1e-12)


def test_crystal_roundtrip():
    for s in [LatticeSite(3, -1, 7, 1), LatticeSite(-4, 2, 0, 0)]:
        assert from_crystal(to_crystal(s)) == s
    with pytest.raises(ValueError):
        from_crystal((1, 0, 0))


def test_bond_111_is_out_of_plane():
    n = LatticeSite(0, 0, 0, 0)
    v = from_crystal((1, 1, 1))
    o = bond_orientation(n, v)
    assert o.axis_class is AxisClass.A111
    assert not o.in_plane
    assert O.in_plane_110(np.array([1, 1, 1]) / math.sqrt(3)) is False


@given(sites)
def test_four_bonds_cover_four_classes(s):
    classes = {bond_orientation(s, n).axis_class for n in neighbors(s)}
    assert classes == set(AXIS_CLASSES)


def test_in_plane_classes_match_dot_product_oracle():
    flags = {o.axis_class: o.in_plane for o in map(Orientation, AXIS_CLASSES)}
    assert sum(flags.values()) == 2
    for cls, flag in flags.items():
        assert flag == O.in_plane_110(cls.direction)
    assert flags[AxisClass.A1m11] and flags[AxisClass.Am111]


def test_out_of_plane_axes_make_55_degrees_with_image_plane():
    # the complement of the 35.26 degree angle between <111> and [110]
    for o in map(Orientation, AXIS_CLASSES):
        if not o.in_plane:
            assert o.angle_to_plane_deg == pytest.approx(math.degrees(math.asin(math.sqrt(2.0 / 3.0))), abs=1e-9)
            assert round(o.angle_to_plane_deg) == 55


def test_non_adjacent_bond_is_error():
    with pytest.raises(ValueError):
        bond_orientation(LatticeSite(0, 0, 0, 0), LatticeSite(5, 0, 0, 1))


def test_sample_nitrogens_zero_ppm_and_determinism():
    assert sample_nitrogens(WorldConfig(bounds=(20, 20, 20), nitrogen_ppm=0.0), 1) == []
    cfg = WorldConfig(bounds=(60, 60, 60), nitrogen_ppm=1.8)
    assert sample_nitrogens(cfg, 42) == sample_nitrogens(cfg, 42)


def test_sample_nitrogens_density_within_three_sigma():
    cfg = WorldConfig(bounds=(100, 100, 100), nitrogen_ppm=1.8)  # 8e6 sites
    n = cfg.n_sites
    p = 1.8e-6
    mean, sd = n * p, math.sqrt(n * p * (1 - p))
    counts = [len(sample_nitrogens(cfg, seed)) for seed in range(5)]
    for c in counts:
        assert abs(c - mean) < 3 * sd
    sites_ = sample_nitrogens(cfg, 3)
    assert len(set(sites_)) == len(sites_)
    lim = cfg.crystal_limits
    xyz = np.array([to_crystal(s) for s in sites_])
    assert np.all(xyz >= lim[:, 0]) and np.all(xyz < lim[:, 1])
