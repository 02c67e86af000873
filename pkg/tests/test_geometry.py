import math

import numpy as np
import pytest

from invgeo import FlatTorus, Product, RoundRP2, WarpedTorus, geodesic_shoot, shoot_boundary_value
from invgeo.errors import ConfigurationError, InvalidPointError, OutOfInjectivityError
from invgeo.geometry import RP2Model, canonicalize, christoffel, distance_local, metric_eval

from conftest import all_models


def test_flat_metric_is_identity():
    assert np.array_equal(metric_eval(FlatTorus(2), [0.3, 0.7]), np.eye(2))


def test_warped_metric_at_zero():
    W = WarpedTorus(2, "cos", 0.3, 1)
    assert np.allclose(metric_eval(W, [0.4, 0.0]), 1.3 * np.eye(2), atol=1e-15)


def test_rp2_angular_metric_matches_embedding_lengths():
    u = np.array([0.9, 0.4])
    g = RP2Model.metric_angular(u)
    eps = 1e-6
    for i in range(2):
        e = np.eye(2)[i]
        d = (RP2Model.from_angles(u + eps * e) - RP2Model.from_angles(u - eps * e)) / (2 * eps)
        assert abs(d @ d - g[i, i]) < 1e-8


def _christoffel_fd(model, p, eps=1e-5):
    n = len(p)
    dg = np.zeros((n, n, n))  # dg[k, i, j] = d_k g_ij
    for k in range(n):
        e = np.zeros(n)
        e[k] = eps
        dg[k] = (model.metric_eval(p + e) - model.metric_eval(p - e)) / (2 * eps)
    ginv = np.linalg.inv(model.metric_eval(p))
    G = np.zeros((n, n, n))
    for a in range(n):
        for i in range(n):
            for j in range(n):
                G[a, i, j] = 0.5 * sum(ginv[a, l] * (dg[i, l, j] + dg[j, l, i] - dg[l, i, j]) for l in range(n))
    return G


def test_flat_christoffel_zero():
    assert np.array_equal(christoffel(FlatTorus(2), [0.2, 0.4]), np.zeros((2, 2, 2)))


@pytest.mark.parametrize("family,axis", [("cos", 1), ("two-well", 1), ("cos-xy", 0)])
def test_warped_christoffel_matches_finite_differences(family, axis, rng):
    W = WarpedTorus(2, family, 0.3, axis)
    for p in rng.random((20, 2)):
        assert np.max(np.abs(christoffel(W, p) - _christoffel_fd(W, p))) < 1e-8


def test_product_christoffel_block_structure():
    P = Product(WarpedTorus(2, "cos", 0.3, 1), FlatTorus(1))
    G = christoffel(P, [0.1, 0.2, 0.3])
    assert np.all(G[2] == 0) and np.all(G[:, 2, :] == 0) and np.all(G[:, :, 2] == 0)


def test_flat_shoot_integer_displacement():
    arc = geodesic_shoot(FlatTorus(2), [0.0, 0.0], [1.0, 2.0], 1.0)
    assert np.allclose(canonicalize(FlatTorus(2), arc.points[-1]) % 1.0, 0.0, atol=1e-12) or \
        np.allclose(np.minimum(canonicalize(FlatTorus(2), arc.points[-1]) % 1.0,
                               1 - canonicalize(FlatTorus(2), arc.points[-1]) % 1.0), 0.0, atol=1e-12)


def test_sphere_geodesic_returns_antipodal_after_pi():
    S = RoundRP2()
    p = np.array([1.0, 0.0, 0.0])
    arc = geodesic_shoot(S, p, [0.0, 1.0, 0.0], math.pi)
    assert S.chart_gap(arc.points[-1], p) < 1e-9


def test_warped_shoot_conserves_translation_momentum():
    W = WarpedTorus(2, "cos", 0.3, 1)
    arc = geodesic_shoot(W, [0.1, 0.2], [0.7, 0.4], 1.0)
    f = W.warp.value(arc.points)
    mom = f * arc.velocities[:, 0]
    assert np.max(np.abs(mom - mom[0])) < 1e-7
    sp = np.array([W.speed2(x, v) for x, v in zip(arc.points, arc.velocities)])
    assert np.max(np.abs(sp - sp[0])) / sp[0] < 1e-8


def test_shoot_step_guard():
    with pytest.raises(ConfigurationError):
        geodesic_shoot(FlatTorus(2), [0, 0], [1, 0], 1.0, steps=8)


def test_flat_distance_examples():
    F = FlatTorus(2)
    assert abs(distance_local(F, [0.1, 0.1], [0.2, 0.1]) - 0.1) < 1e-15
    assert abs(distance_local(F, [0.95, 0.0], [0.05, 0.0]) - 0.1) < 1e-12
    with pytest.raises(OutOfInjectivityError):
        distance_local(F, [0.0, 0.0], [0.5, 0.5])


def test_warped_distance_matches_shooting():
    W = WarpedTorus(2, "cos", 0.3, 1)
    p, q = np.array([0.1, 0.1]), np.array([0.25, 0.18])
    d = distance_local(W, p, q)
    _, energy = shoot_boundary_value(W, p, q)
    assert abs(d - math.sqrt(energy)) < 1e-6


@pytest.mark.parametrize("model", all_models(), ids=lambda m: m.model_id)
def test_canonicalize_idempotent_and_metric_spd(model, rng):
    pts = model.random_points(rng, 10_000) * 3.7 - 1.3 if model.n_sphere == 0 else model.random_points(rng, 10_000)
    c = model.canonicalize(pts)
    assert np.array_equal(model.canonicalize(c), c)
    G = model.metric_eval(pts[:2000]) if model.n_sphere == 0 else None
    if G is not None:
        np.linalg.cholesky(G)


@pytest.mark.parametrize("model", all_models(), ids=lambda m: m.model_id)
def test_sqdist_derivatives(model, rng):
    pts = model.random_points(rng, 8)
    eps = 1e-6
    for a in pts:
        b = model.project(a + 0.1 * model.r_inj * np.einsum("nd,d->n", model.tangent_frame(a[None])[0],
                                                           rng.normal(size=model.dim)))
        s, ga, gb, Haa, Hab, Hbb = model.sqdist(a[None], b[None], 2)
        for i in range(model.coord_dim):
            e = np.zeros(model.coord_dim)
            e[i] = eps
            fa = (model.sqdist((a + e)[None], b[None])[0] - model.sqdist((a - e)[None], b[None])[0]) / (2 * eps)
            fb = (model.sqdist(a[None], (b + e)[None])[0] - model.sqdist(a[None], (b - e)[None])[0]) / (2 * eps)
            assert abs(fa - ga[0, i]) < 1e-7 and abs(fb - gb[0, i]) < 1e-7


def test_triangle_inequality_small_ball(rng):
    for model in all_models():
        for _ in range(50):
            a = model.random_points(rng, 1)[0]
            F = model.tangent_frame(a[None])[0]
            pts = [model.project(a + 0.2 * model.r_inj * F @ rng.uniform(-1, 1, model.dim)) for _ in range(2)]
            d = lambda x, y: model.distance_local(x, y)
            assert d(a, pts[1]) <= d(a, pts[0]) + d(pts[0], pts[1]) + 1e-9


def test_invalid_points_rejected():
    with pytest.raises(InvalidPointError):
        FlatTorus(2).canonicalize([np.nan, 0.0])
    with pytest.raises((InvalidPointError, ConfigurationError)):
        RoundRP2().canonicalize([0.0, 0.0, 0.0])
