import math

import numpy as np
import pytest

from invgeo import (AllPointsFixed, ConfigurationError, FlatTorus, NotAnIsometryError, Product, RoundRP2,
                    WarpedTorus, catalog_entry, catalog_names, check_isometry, fixed_points, homotopy_regularize,
                    identity, product, rotation_map, rp2_rotation, torus_affine, translation)
from invgeo.isometry import apply, apply_inverse


def test_translation_example():
    F = FlatTorus(2)
    assert np.allclose(apply(translation(F, [0.3, 0.1]), [0.9, 0.95]), [0.2, 0.05], atol=1e-15)


def test_rotation_map_fixes_center():
    F = FlatTorus(2)
    assert np.allclose(apply(rotation_map(F), [0.5, 0.5]), [0.5, 0.5], atol=1e-15)


def test_rp2_rotation_fixes_axis():
    P = Product(FlatTorus(1), RoundRP2())
    a = np.array([0.0, 0.6, 0.8])
    I = product(P, [None, rp2_rotation(a, math.pi)])
    for s in (1.0, -1.0):
        x = np.r_[0.3, s * a]
        assert P.chart_gap(apply(I, x), x) < 1e-14


@pytest.mark.parametrize("name", catalog_names())
def test_catalog_isometries_are_isometries(name):
    model, I, _ = catalog_entry(name)
    assert check_isometry(I, model, 200).max_metric_defect < 1e-9


def test_warped_x1_translation_valid_x2_invalid():
    W = WarpedTorus(2, "cos", 0.3, 1)
    assert check_isometry(translation(W, [0.3, 0.0])).max_metric_defect < 1e-10
    rep = check_isometry(translation(W, [0.0, 0.3]), raise_on_fail=False)
    assert not rep.passed and rep.max_metric_defect > 0.1
    with pytest.raises(NotAnIsometryError) as exc:
        check_isometry(translation(W, [0.0, 0.3]))
    assert exc.value.defect == pytest.approx(rep.max_metric_defect)


def test_check_isometry_needs_enough_samples():
    with pytest.raises(ConfigurationError):
        check_isometry(identity(FlatTorus(2)), sample_count=10)


def test_translation_has_no_fixed_points():
    assert fixed_points(translation(FlatTorus(2), [0.3, 0.1])) == []


def test_quarter_turn_fixed_points():
    # x = 1 - y and y = x modulo 1 give 2x = 1 mod 1: both (1/2, 1/2) and (0, 0)
    I = rotation_map(FlatTorus(2))
    pts = fixed_points(I)
    got = sorted(tuple(np.round(p, 9)) for p in pts)
    assert got == [(0.0, 0.0), (0.5, 0.5)]
    for p in pts:
        assert FlatTorus(2).chart_gap(apply(I, p), p) < 1e-10


def test_identity_every_point_fixed():
    with pytest.raises(AllPointsFixed):
        fixed_points(identity(FlatTorus(2)))


def test_non_unimodular_rejected():
    with pytest.raises(ConfigurationError):
        torus_affine(FlatTorus(2), [[2, 0], [0, 1]], [0, 0])


def test_apply_inverse_roundtrip(rng):
    for name in catalog_names():
        model, I, _ = catalog_entry(name)
        x = model.random_points(rng, 10_000)
        assert np.max(model.chart_gap(apply(I, apply_inverse(I, x)), x)) < 1e-12


def test_translation_track_is_straight():
    F = FlatTorus(2)
    v = np.array([0.3, 0.1])
    sch = homotopy_regularize(translation(F, v), 8)
    q = np.array([0.2, 0.7])
    assert sch.track_length(q) == pytest.approx(np.linalg.norm(v), abs=1e-14)
    t = np.linspace(0, 1, 11)
    assert np.allclose(sch.track(q, t), q + t[:, None] * v, atol=1e-14)


def test_identity_track_constant():
    sch = homotopy_regularize(identity(FlatTorus(2)), 8)
    q = np.array([0.2, 0.7])
    assert np.allclose(sch.track(q, np.linspace(0, 1, 5)), q)


def test_rotation_track_lengths():
    P = Product(FlatTorus(1), RoundRP2())
    a = np.array([0.0, 0.0, 1.0])
    I = product(P, [translation(FlatTorus(1), [0.0]), rp2_rotation(a, math.pi)])
    n = 8
    sch = homotopy_regularize(I, n)
    # equator: the rotation orbit is a great circle, so the broken track is exact
    assert sch.track_length(np.r_[0.0, 1.0, 0.0, 0.0]) == pytest.approx(math.pi, abs=1e-8)
    # latitude phi: n chords of the small circle of radius sin(phi)
    phi = 0.7
    q = np.r_[0.0, math.sin(phi), 0.0, math.cos(phi)]
    chord = 2 * math.asin(math.sin(phi) * math.sin(math.pi / (2 * n)))
    assert sch.track_length(q) == pytest.approx(n * chord, abs=1e-10)


def test_track_endpoints(rng):
    for name in catalog_names():
        model, I, _ = catalog_entry(name)
        if not I.homotopic_to_identity:
            continue
        sch = homotopy_regularize(I, 8)
        for q in model.random_points(rng, 20):
            ends = sch.track(q, [0.0, 1.0])
            assert np.array_equal(ends[0], q)
            assert model.chart_gap(ends[1], apply(I, q)) < 1e-12
