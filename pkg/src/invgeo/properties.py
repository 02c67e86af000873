"""Randomized invariant battery run over the model catalog.

Each check returns a dict with at least {"ok": bool, "worst": float}; the
suite aggregates them per catalog entry.
"""

from __future__ import annotations

import numpy as np

from .catalog import catalog_entry, catalog_names
from .isometry import identity
from .pathspace import (ClassLabel, average_energy, class_label, discrete_energy, dumps_path,
                        gradient, hessian, iota_map, loads_path, loop_label, make_loop, nu_map, shift,
                        straight_path)
from .solver import DescentConfig, _schedule_for, descend


def random_path(model, I, label, rng, N=16, tau=1.0, amplitude=0.02):
    """Straight seed through a random base point plus small smooth noise (gaps stay well inside r_inj)."""
    base = model.random_points(rng, 1)[0]
    g = straight_path(model, I, label, N, tau, base)
    K = g.K
    t = np.arange(K) / K
    noise = np.zeros(g.nodes.shape)
    for mode in (1, 2, 3):
        noise += np.outer(np.sin(2 * np.pi * mode * t + rng.uniform(0, 2 * np.pi)), rng.normal(size=g.nodes.shape[1]))
    return g.with_nodes(model.project(g.nodes + amplitude * noise))


def _tangent_direction(model, q, rng):
    F = model.tangent_frame(q)
    c = rng.normal(size=F.shape[:1] + F.shape[2:])
    d = np.einsum("knd,kd->kn", F, c)
    return d / np.linalg.norm(d)


def check_gradient(model, I, label, rng, count=100, eps=1e-6, tol=1e-5):
    worst = 0.0
    for _ in range(count):
        g = random_path(model, I, label, rng)
        G = gradient(g)
        d = _tangent_direction(model, g.nodes, rng)
        fd = (discrete_energy(g, g.nodes + eps * d) - discrete_energy(g, g.nodes - eps * d)) / (2 * eps)
        an = float(np.sum(G * d))
        worst = max(worst, abs(fd - an) / max(abs(an), np.linalg.norm(G) * 1e-3, 1e-12))
    return {"ok": worst < tol, "worst": worst, "tol": tol, "count": count}


def check_hessian(model, I, label, rng, count=20, eps=1e-5, tol=1e-4):
    worst_fd = 0.0
    worst_sym = 0.0
    for _ in range(count):
        g = random_path(model, I, label, rng)
        H = hessian(g)
        worst_sym = max(worst_sym, float(np.max(np.abs(H - H.T)) / np.max(np.abs(H))))
        d = _tangent_direction(model, g.nodes, rng)
        fd = (gradient(g, g.nodes + eps * d) - gradient(g, g.nodes - eps * d)).reshape(-1) / (2 * eps)
        an = H @ d.reshape(-1)
        worst_fd = max(worst_fd, float(np.linalg.norm(fd - an) / max(np.linalg.norm(an), 1e-12)))
    worst = max(worst_fd, worst_sym)
    return {"ok": worst < tol, "worst": worst, "fd": worst_fd, "symmetry": worst_sym, "tol": tol}


def check_shift(model, I, label, rng, count=10, tol=1e-9):
    worst = 0.0
    for _ in range(count):
        g = random_path(model, I, label, rng)
        E = discrete_energy(g)
        for j in rng.integers(-3 * g.K, 3 * g.K, size=4):
            worst = max(worst, abs(discrete_energy(shift(g, j * g.h)) - E) / max(E, 1e-12))
    return {"ok": worst < tol, "worst": worst, "tol": tol}


def check_iterate_energy(model, rng, loop_label_=None, m_max=16, count=5, tol=1e-9):
    """E^{m p} of the m-fold loop equals E^p of the loop."""
    from .minimax import iterate_loop

    Id = identity(model)
    label = loop_label_ if loop_label_ is not None else ClassLabel.from_any(_unit_label(model), model)
    worst = 0.0
    for _ in range(count):
        g = random_path(model, Id, label, rng, tau=float(rng.integers(1, 4)))
        loop = make_loop(model, g.nodes, g.label, g.tau)
        E = average_energy(loop)
        for m in range(1, m_max + 1):
            worst = max(worst, abs(average_energy(iterate_loop(loop, m)) - E) / max(E, 1e-12))
    return {"ok": worst < tol, "worst": worst, "tol": tol}


def _unit_label(model):
    k = [0] * model.n_torus
    if k:
        k[0] = 1
    return [k, [0] * model.n_sphere]


def check_label_descent(model, I, label, rng, steps=1000):
    sched = _schedule_for(I)
    g = random_path(model, I, label, rng, N=16, amplitude=0.05)
    before = class_label(g, sched) if (sched is not None or I.is_identity) else g.label
    out, it, gn = descend(g, DescentConfig(), stop_norm=0.0, max_iters=steps)
    after = class_label(out, sched) if (sched is not None or I.is_identity) else out.label
    return {"ok": before == after == ClassLabel.from_any(label, model), "worst": float(gn), "iterations": it,
            "before": str(before), "after": str(after)}


def check_iota_nu(model, I, rng, count=5):
    sched = _schedule_for(I)
    if sched is None:
        return {"ok": True, "worst": 0.0, "skipped": "isometry not homotopic to the identity"}
    Id = identity(model)
    bad = 0
    for _ in range(count):
        lab = ClassLabel.from_any([list(rng.integers(-2, 3, model.n_torus)),
                                   list(rng.integers(0, 2, model.n_sphere))], model)
        loop = random_path(model, Id, lab, rng)
        loop = make_loop(model, loop.nodes, loop.label, loop.tau)
        gam = iota_map(loop, sched)
        back = nu_map(gam, sched)
        ok = loop_label(loop) == class_label(gam, sched) == loop_label(back)
        bad += not ok
    return {"ok": bad == 0, "worst": float(bad), "count": count}


def check_serialization(model, I, label, rng, count=5):
    bad = 0
    for _ in range(count):
        g = random_path(model, I, label, rng)
        s1 = dumps_path(g)
        g2 = loads_path(s1)
        s2 = dumps_path(g2)
        bad += (s1 != s2) or not np.array_equal(g.nodes, g2.nodes)
    return {"ok": bad == 0, "worst": float(bad), "count": count}


def run_property_suite(names=None, seed=0, gradient_count=100, hessian_count=20):
    """Run every check on every named catalog entry; returns {name: {check: result}}."""
    names = catalog_names() if names is None else names
    out = {}
    for i, name in enumerate(names):
        model, I, lab = catalog_entry(name)
        label = ClassLabel.from_any(lab, model)
        rng = np.random.default_rng([seed, i])
        out[name] = {
            "gradient_fd": check_gradient(model, I, label, rng, gradient_count),
            "hessian_fd_symmetry": check_hessian(model, I, label, rng, hessian_count),
            "shift_invariance": check_shift(model, I, label, rng),
            "iterate_average_energy": check_iterate_energy(model, rng),
            "label_under_descent": check_label_descent(model, I, label, rng),
            "iota_nu_roundtrip": check_iota_nu(model, I, rng),
            "serialization_roundtrip": check_serialization(model, I, label, rng),
        }
    return out


def suite_ok(result) -> bool:
    return all(c["ok"] for checks in result.values() for c in checks.values())
