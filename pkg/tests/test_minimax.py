import math

import numpy as np
import pytest

from invgeo import (ConfigurationError, DescentConfig, FlatTorus, MinimaxConfig, Product, RoundRP2,
                    StudyInapplicableError, WarpedTorus, bangert_excess_study, bangert_iterate_path,
                    construct_class_loop, glue_invariant_path, identity, minimax_descend, minimize_in_class,
                    nice_loop_normalize, product, rp2_generator, rp2_rotation, straight_path, sweep_loop,
                    translation)
from invgeo.minimax import PathLoop, ev_label, iterate_loop, loop_of, perturb_loop, sweep_to_minima
from invgeo.pathspace import average_energy, discrete_energy, make_loop, period_detect, shift
from invgeo.solver import _record, newton_polish

CFG = DescentConfig()
W = WarpedTorus(2, "two-well", 0.25, 1)
IW = translation(W, [0.5, 0.0])


@pytest.fixture(scope="module")
def two_well_alpha():
    seed = straight_path(W, IW, [[0, 0], []], 32, base=np.array([0.1, 0.27]))
    return minimize_in_class(W, IW, [[0, 0], []], CFG, N=32, seeds=[seed])


@pytest.fixture(scope="module")
def two_well_result(two_well_alpha):
    loop = sweep_loop(two_well_alpha.path, [0, 1], 32, perturbation=0.05)
    return minimax_descend(loop, MinimaxConfig(), CFG)


@pytest.fixture(scope="module")
def saddle_record():
    g, gn, ok = newton_polish(straight_path(W, IW, [[0, 0], []], 16, base=np.array([0.1, 0.5])), CFG)
    assert ok
    return _record(g, CFG)


def test_two_well_minimum_energy(two_well_alpha):
    assert two_well_alpha.energy == pytest.approx(0.1875, rel=1e-10)


def test_two_well_minimax_hits_saddle(two_well_result):
    r = two_well_result
    assert r.c == pytest.approx(0.3125, rel=1e-4)
    assert r.margin == pytest.approx(0.125, rel=1e-3)
    assert len(r.level_set) >= 1
    assert all(rec.index == 1 and rec.grad_norm < 1e-6 for rec in r.level_records)


def test_minimax_preserves_labels(two_well_alpha, two_well_result):
    loop = two_well_result.loop
    assert all(g.label == two_well_alpha.label for g in loop.members)
    assert ev_label(loop) == two_well_result.ev_class


def test_constant_loop_sanity(two_well_alpha):
    loop = PathLoop((two_well_alpha.path,))
    r = minimax_descend(loop, MinimaxConfig(), CFG)
    assert r.c == pytest.approx(two_well_alpha.energy, rel=1e-12) and r.margin == pytest.approx(0.0, abs=1e-12)


def test_flat_torus_has_no_torsion_generator():
    F = FlatTorus(2)
    a = straight_path(F, translation(F, [0.3, 0.1]), [[1, 0], []], 16)
    with pytest.raises(ConfigurationError):
        construct_class_loop(a, np.zeros((5, 3)))


def _s1rp2(k, N=32):
    C = FlatTorus(1)
    P = Product(C, RoundRP2())
    a = np.array([0.0, 0.0, 1.0])
    J = product(P, [translation(C, [0.3]), rp2_rotation(a, math.pi)])
    seed = straight_path(P, J, [[k], [0]], N, base=np.r_[0.1, a])
    return P, J, a, minimize_in_class(P, J, [[k], [0]], CFG, seeds=[seed])


def test_class_loop_transport_cost_decreases_with_S():
    P, J, a, al = _s1rp2(1)
    maxes = [construct_class_loop(al.path, rp2_generator(a, S), S=S).energies().max() for S in (16, 32, 64)]
    assert all(m > al.energy for m in maxes)


def test_s1rp2_minimax_value():
    P, J, a, al = _s1rp2(2)
    loop = construct_class_loop(al.path, rp2_generator(a, 32), S=32)
    r = minimax_descend(loop, MinimaxConfig(strict_margin_tol=1.0), CFG)
    assert r.c == pytest.approx((2.3) ** 2 + math.pi ** 2, rel=1e-2)
    assert r.strict_ok and r.margin > 1.0


def test_nice_loop_fixed_point(two_well_result):
    out = nice_loop_normalize(two_well_result)
    assert out.level_set == two_well_result.level_set or len(out.level_set) == 1
    assert np.allclose(out.loop.energies(), two_well_result.loop.energies(), atol=1e-9) or \
        out.loop.S <= two_well_result.loop.S


def test_nice_loop_collapses_plateau(two_well_result):
    r = two_well_result
    loop = r.loop
    j = int(r.level_set[0])
    ref = loop.members[j]
    members = list(loop.members[:j + 1]) + [shift(ref, i * ref.h) for i in range(1, 5)] + \
        [shift(g, 4 * g.h) for g in loop.members[j + 1:]]
    plateau = PathLoop(tuple(members))
    plateau.check_adjacency()
    before = np.array([discrete_energy(g) for g in members])
    from dataclasses import replace
    out = nice_loop_normalize(replace(r, loop=plateau))
    assert len(out.level_set) == len(r.level_set)
    kept = np.r_[before[:j + 1], before[j + 5:]]
    assert np.allclose(out.loop.energies()[:kept.size], kept, atol=1e-9)


def test_nice_loop_preserves_class_randomized(two_well_alpha):
    for seed in range(20):
        loop = sweep_loop(two_well_alpha.path, [0, 1], 24, perturbation=0.05, rng=np.random.default_rng(seed))
        r = minimax_descend(loop, MinimaxConfig(max_sweeps=60), CFG)
        out = nice_loop_normalize(r)
        assert ev_label(out.loop) == ev_label(loop)
        assert all(g.label == two_well_alpha.label for g in out.loop.members)


def test_perturbed_loop_descends(two_well_alpha):
    loop = perturb_loop(sweep_loop(two_well_alpha.path, [0, 1], 24), 0.03, np.random.default_rng(3))
    r = minimax_descend(loop, MinimaxConfig(), CFG)
    assert r.c <= resolved_start(loop) + 1e-12
    assert r.c == pytest.approx(0.3125, rel=1e-4)


def resolved_start(loop):
    from invgeo.minimax import resolved_max

    return resolved_max(list(loop.members), loop.model)


# -------------------------------------------------------------------------- iterated homotopies


def _psi(saddle_record):
    per = period_detect(saddle_record.path)
    psi_inv, _ = sweep_to_minima(saddle_record, [0.0, 1.0], 9)
    return psi_inv, [loop_of(g, per) for g in psi_inv], per


def test_bangert_m1_is_psi(saddle_record):
    _, psi, _ = _psi(saddle_record)
    th = bangert_iterate_path(psi, 1)
    assert all(np.array_equal(a.nodes, b.nodes) for a, b in zip(th.loops, psi))
    assert th.excess == pytest.approx(max(average_energy(g) for g in psi) - th.endpoint_energy, abs=1e-15)


@pytest.mark.parametrize("m", [2, 3, 5])
def test_bangert_endpoints_and_tracking(saddle_record, m):
    _, psi, _ = _psi(saddle_record)
    th = bangert_iterate_path(psi, m)
    assert average_energy(th.loops[0]) == pytest.approx(average_energy(psi[0]), abs=1e-9)
    assert average_energy(th.loops[-1]) == pytest.approx(average_energy(psi[-1]), abs=1e-9)
    assert np.allclose(th.loops[0].nodes, iterate_loop(psi[0], m).nodes, atol=1e-12)
    assert th.excess >= 0
    model = psi[0].model
    from invgeo.minimax import _PsiFamily
    fam = _PsiFamily(psi)
    for g, s in zip(th.loops, th.sigma):
        assert model.chart_gap(g.nodes[0], fam.base_track([s])[0]) < 1e-12
    for a, b in zip(th.loops[:-1], th.loops[1:]):
        assert np.max(model.chart_gap(a.nodes, b.nodes)) < model.r_inj


def test_bangert_flat_sweep_bounded():
    F = FlatTorus(2)
    Id = identity(F)
    base = straight_path(F, Id, [[1, 0], []], 16)
    psi = [make_loop(F, base.nodes + [0.0, y], base.label) for y in np.linspace(0, 1, 9)]
    mex = [m * bangert_iterate_path(psi, m).excess for m in (2, 4, 8, 16, 32)]
    assert max(mex) < 2 * mex[0] and mex[-1] <= mex[0]


def test_glue_constant_tail_is_iterate():
    F = FlatTorus(2)
    Id = identity(F)
    g = straight_path(F, Id, [[1, 0], []], 16)
    psi_inv = [g, g, g]
    psi = [loop_of(x) for x in psi_inv]
    for m in (1, 3):
        th = bangert_iterate_path(psi, m)
        gl = glue_invariant_path(th, psi_inv, th.sigma, m, 1, 1, level=None)
        assert np.allclose(gl.energies, average_energy(g), rtol=1e-12)
        assert gl.bound_ok


def test_glue_two_well_invariance_and_bound(saddle_record):
    psi_inv, psi, per = _psi(saddle_record)
    for m in (2, 4):
        th = bangert_iterate_path(psi, m)
        gl = glue_invariant_path(th, psi_inv, th.sigma, m, per.value, per.value, level=saddle_record.energy)
        assert gl.bound_ok and gl.m0 == m
        for path in gl.paths:
            L, l = path.closure_map
            assert np.allclose(path.closure_node(), path.nodes[0] @ L.T + l, atol=1e-12)


def test_glue_rejects_wrong_m0(saddle_record):
    psi_inv, psi, per = _psi(saddle_record)
    th = bangert_iterate_path(psi, 2)
    with pytest.raises(ConfigurationError):
        glue_invariant_path(th, psi_inv, th.sigma, 5, per.value, per.value)


def test_excess_study_two_well(saddle_record):
    st = bangert_excess_study(saddle_record, (4, 8, 16, 32))
    ex = [r["excess"] for r in st.rows]
    mex = [r["m_excess"] for r in st.rows]
    assert all(e >= 0 for e in ex)
    assert not st.increasing_trend
    assert (max(mex) - min(mex)) / np.mean(mex) < 0.25
    for a, b in zip(ex[1:], ex[2:]):
        assert b / a == pytest.approx(0.5, rel=0.3)
    assert st.threshold_m is not None


def test_excess_study_inapplicable_on_flat():
    F = FlatTorus(2)
    I = translation(F, [0.5, 0.0])
    rec = _record(straight_path(F, I, [[0, 0], []], 16), CFG)
    with pytest.raises(StudyInapplicableError):
        bangert_excess_study(rec, (2, 4))
