import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from invgeo import (ClassLabel, FlatTorus, InvariantPath, OutOfInjectivityError, Product, RoundRP2, WarpedTorus,
                    average_energy, catalog_entry, catalog_names, class_label, discrete_energy, homotopy_regularize,
                    identity, iota_map, iterate, nu_map, period_detect, rotation_map, straight_path, translation)
from invgeo.errors import MissingPeriodError
from invgeo.minimax import rp2_generator
from invgeo.pathspace import (dumps_path, extended_nodes, gradient, hessian, interp_homotopy, is_geometrically_distinct,
                              loads_path, loop_label, make_loop, resample, shift)
from invgeo.properties import random_path
from invgeo.solver import morse_data

F2 = FlatTorus(2)
V = np.array([0.3, 0.1])
T = translation(F2, V)


def test_flat_line_energy_any_N():
    for N in (4, 16, 64, 100):
        g = straight_path(F2, T, [[0, 0], []], N)
        assert discrete_energy(g) == pytest.approx(0.1, rel=1e-13)
        assert average_energy(g) == pytest.approx(0.1, rel=1e-13)


def test_constant_path_at_fixed_point_zero_energy():
    I = rotation_map(F2)
    g = InvariantPath(F2, I, 1.0, np.full((16, 2), 0.5), ClassLabel((0, 0), ()))
    assert discrete_energy(g) == 0.0


def test_warped_line_energy_matches_quadrature():
    W = WarpedTorus(2, "cos", 0.3, 1)
    I = translation(W, [0.3, 0.0])
    g = straight_path(W, I, [[0, 1], []], 256, base=np.array([0.1, 0.2]))
    a, d = g.nodes[0], np.array([0.3, 1.0])
    t = (np.arange(1_000_000) + 0.5) / 1_000_000
    quad = float(np.mean(W.warp.value(a + t[:, None] * d))) * (d @ d)
    assert discrete_energy(g) == pytest.approx(quad, rel=1e-6)


def test_gap_beyond_injectivity_radius_raises():
    g = InvariantPath(F2, T, 1.0, np.array([[0.0, 0.0], [0.6, 0.0]]), ClassLabel((0, 0), ()))
    with pytest.raises(OutOfInjectivityError):
        discrete_energy(g)


def test_shift_one_step_is_cyclic_relabel():
    g = random_path(F2, T, ClassLabel((1, 0), ()), np.random.default_rng(0))
    s = shift(g, g.h)
    assert np.array_equal(s.nodes[:-1], g.nodes[1:])
    assert np.allclose(s.nodes[-1], g.closure_node(), atol=1e-15)


def test_shift_by_tau_applies_isometry():
    g = random_path(F2, T, ClassLabel((1, 0), ()), np.random.default_rng(1))
    s = shift(g, g.tau)
    L, l = g.closure_map
    assert np.allclose(s.nodes, g.nodes @ L.T + l, atol=1e-14)


@settings(max_examples=30, deadline=None)
@given(name=st.sampled_from(catalog_names()), seed=st.integers(0, 10_000), j=st.integers(-200, 200))
def test_grid_shift_preserves_energy(name, seed, j):
    model, I, lab = catalog_entry(name)
    g = random_path(model, I, ClassLabel.from_any(lab, model), np.random.default_rng(seed))
    assert discrete_energy(shift(g, j * g.h)) == pytest.approx(discrete_energy(g), rel=1e-9)


def test_offgrid_shift_error_scales_like_h2():
    W = WarpedTorus(2, "cos", 0.3, 1)
    I = translation(W, [0.3, 0.0])
    errs = []
    for N in (32, 64, 128):
        g = straight_path(W, I, [[0, 1], []], N, base=np.array([0.1, 0.2]))
        errs.append(abs(discrete_energy(shift(g, 0.37 * g.h)) - discrete_energy(g)))
    assert errs[2] < errs[0]


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 16))
def test_iterate_average_energy(seed, m):
    # translation (0.5, 0): a line in class (0, 0) has period 2
    I = translation(F2, [0.5, 0.0])
    rng = np.random.default_rng(seed)
    g = straight_path(F2, I, [[0, 0], []], 8, base=rng.random(2))
    per = period_detect(g)
    it = iterate(g, m, per)
    assert it.K == round(8 * (m * per.value + 1))
    assert average_energy(it) == pytest.approx(average_energy(g), rel=1e-9)
    assert discrete_energy(it) == pytest.approx(it.tau ** 2 * average_energy(it), rel=1e-12)


def test_closed_geodesic_iterate_energy_m_squared():
    Id = identity(F2)
    loop = straight_path(F2, Id, [[1, 0], []], 16)
    for m in (2, 3, 5):
        it = iterate(loop, m - 1, period_detect(loop))
        # the m-fold loop reparametrized to unit time has energy m^2 E
        assert it.tau ** 2 * average_energy(it) == pytest.approx(m * m * discrete_energy(loop), rel=1e-12)


def test_iterate_needs_period():
    W = WarpedTorus(2, "cos", 0.3, 1)
    g = random_path(W, translation(W, [math.sqrt(2) / 5, 0.0]), ClassLabel((0, 0), ()), np.random.default_rng(3))
    with pytest.raises(MissingPeriodError):
        iterate(g, 1)


def test_period_examples():
    c = InvariantPath(F2, rotation_map(F2), 1.0, np.full((8, 2), 0.5), ClassLabel((0, 0), ()))
    assert period_detect(c).stationary
    assert period_detect(straight_path(F2, identity(F2), [[1, 0], []], 16)).value == pytest.approx(1.0)
    assert period_detect(straight_path(F2, T, [[0, 0], []], 16)).value == pytest.approx(10.0)


def test_class_label_examples():
    sched = homotopy_regularize(T, 8)
    c = InvariantPath(F2, identity(F2), 1.0, np.full((8, 2), 0.3), ClassLabel((0, 0), ()))
    assert class_label(c) == ClassLabel((0, 0), ())
    loop = straight_path(F2, identity(F2), [[2, 1], []], 16)
    assert class_label(iota_map(loop, sched), sched) == ClassLabel((2, 1), ())
    # S^1 x RP^2: a loop along the RP^2 generator once
    P = Product(FlatTorus(1), RoundRP2())
    gen = rp2_generator([0.0, 0.0, 1.0], 16)
    nodes = np.hstack([np.full((16, 1), 0.2), gen[:-1]])
    lp = make_loop(P, nodes, ClassLabel((0,), (1,)))
    assert loop_label(lp) == ClassLabel((0,), (1,))


def test_iota_of_constant_loop_energy():
    # the track of length |v| is traversed in time 1/2, so the energy is 2 |v|^2
    sched = homotopy_regularize(T, 8)
    loop = make_loop(F2, np.full((32, 2), 0.4), ClassLabel((0, 0), ()))
    g = iota_map(loop, sched)
    assert g.K == 64
    assert discrete_energy(g) == pytest.approx(2 * (V @ V), rel=1e-12)


def test_iota_nu_identity_homotopy():
    sched = homotopy_regularize(identity(F2), 8)
    loop = straight_path(F2, identity(F2), [[1, -1], []], 16)
    g = iota_map(loop, sched)
    assert np.array_equal(g.nodes[:16], loop.nodes)
    assert np.allclose(g.nodes[16:], loop.closure_node())
    back = nu_map(g, sched)
    assert loop_label(back) == loop_label(loop)


@pytest.mark.parametrize("name", catalog_names())
def test_nu_label_roundtrip(name):
    model, I, lab = catalog_entry(name)
    if not I.homotopic_to_identity:
        pytest.skip("no homotopy to the identity")
    sched = homotopy_regularize(I, 8)
    rng = np.random.default_rng(7)
    for _ in range(100):
        g = random_path(model, I, ClassLabel.from_any(lab, model), rng)
        lp = nu_map(g, sched)
        assert loop_label(lp) == class_label(g, sched)


def test_gradient_vanishes_on_straight_line():
    g = straight_path(F2, T, [[1, 2], []], 32)
    assert np.linalg.norm(gradient(g)) < 1e-10


def test_flat_line_hessian_psd_nullity_d():
    g = straight_path(F2, T, [[1, 0], []], 32)
    w = np.linalg.eigvalsh(hessian(g))
    assert w.min() > -1e-8
    index, nullity, _, _ = morse_data(g)
    assert (index, nullity) == (0, 2)


def test_interp_homotopy_examples():
    a = straight_path(F2, T, [[1, 0], []], 16, base=np.array([0.1, 0.1]))
    b = straight_path(F2, T, [[1, 0], []], 16, base=np.array([0.1, 0.2]))
    fam = interp_homotopy(a, b)
    Es = [discrete_energy(fam.at(t)) for t in np.linspace(0, 1, 11)]
    assert np.ptp(Es) < 1e-13
    for t in np.linspace(0, 1, 11):
        h = fam.at(t)
        assert np.allclose(h.closure_node(), h.nodes[0] @ h.closure_map[0].T + h.closure_map[1], atol=1e-12)
        assert class_label(h, homotopy_regularize(T, 8)) == a.label
    same = interp_homotopy(a, a)
    assert np.array_equal(same.at(0.5).nodes, a.nodes)


def test_interp_rejects_far_paths():
    a = straight_path(F2, T, [[1, 0], []], 16, base=np.array([0.1, 0.1]))
    b = straight_path(F2, T, [[1, 0], []], 16, base=np.array([0.1, 0.6]))
    with pytest.raises(OutOfInjectivityError):
        interp_homotopy(a, b)


def test_geometric_distinctness():
    I = translation(F2, [0.5, 0.0])
    g = straight_path(F2, I, [[0, 0], []], 16, base=np.array([0.1, 0.3]))
    assert not is_geometrically_distinct(g, shift(g, 0.37))
    assert not is_geometrically_distinct(g, iterate(g, 2))
    a = straight_path(F2, identity(F2), [[1, 0], []], 16)
    b = straight_path(F2, identity(F2), [[0, 1], []], 16)
    assert is_geometrically_distinct(a, b)


@settings(max_examples=25, deadline=None)
@given(name=st.sampled_from(catalog_names()), seed=st.integers(0, 10_000))
def test_serialization_roundtrip_byte_exact(name, seed):
    model, I, lab = catalog_entry(name)
    g = random_path(model, I, ClassLabel.from_any(lab, model), np.random.default_rng(seed))
    s = dumps_path(g)
    g2 = loads_path(s)
    assert dumps_path(g2) == s
    assert np.array_equal(g2.nodes, g.nodes)


def test_resample_preserves_label_and_closure():
    g = random_path(F2, T, ClassLabel((1, 1), ()), np.random.default_rng(5))
    r = resample(g, 48)
    assert r.K == 48 and r.label == g.label
    assert np.allclose(extended_nodes(r, 49)[-1], r.closure_node())
