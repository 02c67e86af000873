"""Descent to critical points, Newton polishing, Morse index and the census."""

from __future__ import annotations

import math
from fractions import Fraction
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.stats import linregress

from .errors import (ConfigurationError, InvariantViolation, MissingPeriodError, NonConvergenceError,
                     OutOfInjectivityError)
from .isometry import homotopy_regularize
from .pathspace import (ClassLabel, InvariantPath, Period, class_label, discrete_energy, energy_and_gradient,
                        gauge, hessian, image_distance, _image_window, iterate, period_detect, resample, shift_direction,
                        straight_path, tangent_basis)


@dataclass(frozen=True)
class DescentConfig:
    max_iters: int = 4000
    g_tol: float = 1e-8
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    newton_switch: float = 1e-3
    newton_tol: float = 1e-11
    max_newton: int = 40
    ladder: tuple = (32, 64, 128)
    N: int = 64
    seed_count: int = 4
    rng_seed: int = 0
    perturbation: float = 0.05
    lambda_rel: float = 1e-6
    dedup_tol: float = 1e-3

    def __post_init__(self):
        if min(self.g_tol, self.armijo_c, self.newton_switch, self.newton_tol) <= 0:
            raise ConfigurationError("tolerances must be positive")
        if not 0 < self.backtrack < 1:
            raise ConfigurationError("backtrack factor must lie in (0, 1)")
        if list(self.ladder) != sorted(set(self.ladder)):
            raise ConfigurationError("refinement ladder must be strictly increasing")
        if self.seed_count < 1 or self.max_iters < 1:
            raise ConfigurationError("seed_count and max_iters must be >= 1")


@dataclass(frozen=True, eq=False)
class CriticalRecord:
    path: InvariantPath
    energy: float
    grad_norm: float
    index: int
    nullity: int
    shift_eigenvalue: float
    period: Period | None
    label: ClassLabel
    stationary: bool
    first_order_only: bool = False
    index_unstable: bool = False
    rungs: tuple = ()
    seed: int = 0
    iterations: int = 0

    def summary(self) -> dict:
        return {
            "label": self.label.to_list(),
            "energy": self.energy,
            "grad_norm": self.grad_norm,
            "index": self.index,
            "nullity": self.nullity,
            "shift_eigenvalue": self.shift_eigenvalue,
            "period": None if self.period is None else self.period.value,
            "stationary": self.stationary,
            "first_order_only": self.first_order_only,
            "index_unstable": self.index_unstable,
            "rungs": [dict(r) for r in self.rungs],
            "seed": self.seed,
            "iterations": self.iterations,
        }


# -------------------------------------------------------------------------- numerics


def tangent_gradient(gamma, nodes=None):
    q = gamma.nodes if nodes is None else nodes
    E, g = energy_and_gradient(gamma, q)
    B = tangent_basis(gamma, q)
    return E, g, B.T @ g.reshape(-1), B


def grad_norm(gamma, nodes=None) -> float:
    return float(np.linalg.norm(tangent_gradient(gamma, nodes)[2]))


def _h1_factor(gamma: InvariantPath):
    """Cholesky factor of the flat Sobolev operator used to precondition descent."""
    K, n = gamma.K, gamma.model.coord_dim
    L, _ = gamma.closure_map
    scale = gamma.tau / gamma.h
    P = np.zeros((K, n, K, n))
    I = np.eye(n)
    for i in range(K):
        P[i, :, i, :] += 4.0 * I
        if i + 1 < K:
            P[i, :, i + 1, :] -= 2.0 * I
            P[i + 1, :, i, :] -= 2.0 * I
    P[K - 1, :, 0, :] -= 2.0 * L
    P[0, :, K - 1, :] -= 2.0 * L.T
    P = P.reshape(K * n, K * n) * scale + 2.0 * gamma.tau * gamma.h * np.eye(K * n)
    P = 0.5 * (P + P.T)
    return cho_factor(P)


def _safe_energy(gamma, q):
    try:
        return discrete_energy(gamma, q)
    except OutOfInjectivityError:
        return math.inf


def descend(gamma: InvariantPath, config: DescentConfig, stop_norm=None, max_iters=None, callback=None):
    """Preconditioned gradient descent with Armijo backtracking.

    Returns (path, iterations, final tangent-gradient norm).
    """
    stop_norm = config.newton_switch if stop_norm is None else stop_norm
    max_iters = config.max_iters if max_iters is None else max_iters
    model = gamma.model
    fac = _h1_factor(gamma)
    q = model.project(np.array(gamma.nodes))
    alpha = 1.0
    it = 0
    gn = math.inf
    for it in range(1, max_iters + 1):
        E, g, gt, _ = tangent_gradient(gamma, q)
        gn = float(np.linalg.norm(gt))
        if gn < stop_norm:
            break
        d = -cho_solve(fac, g.reshape(-1)).reshape(q.shape)
        slope = float(np.sum(g * d))
        if slope >= 0:
            d, slope = -g, -float(np.sum(g * g))
        step = min(1.0, 2.0 * alpha)
        while True:
            trial = model.project(q + step * d)
            Et = _safe_energy(gamma, trial)
            if Et <= E + config.armijo_c * step * slope:
                break
            step *= config.backtrack
            if step < 1e-14:
                raise NonConvergenceError("line search failed", {"energy": E, "grad_norm": gn, "iteration": it})
        alpha = step
        q = trial
        if callback is not None:
            callback(it, Et, gn)
    return gamma.with_nodes(q), it, gn


def _shift_unit(gamma, B, nodes=None):
    xi = B.T @ shift_direction(gamma, nodes)
    nrm = np.linalg.norm(xi)
    return xi / nrm if nrm > 0 else xi


def newton_polish(gamma: InvariantPath, config: DescentConfig, tol=None, max_steps=None):
    """Newton iteration in tangent coordinates with degenerate directions removed.

    Converges to the nearby critical point of any index.  Returns (path, grad norm, success).
    """
    tol = config.newton_tol if tol is None else tol
    max_steps = config.max_newton if max_steps is None else max_steps
    model = gamma.model
    q = model.project(np.array(gamma.nodes))
    _, g, gt, B = tangent_gradient(gamma, q)
    gn = float(np.linalg.norm(gt))
    for _ in range(max_steps):
        if gn < tol:
            return gamma.with_nodes(q), gn, True
        Hh = B.T @ hessian(gamma, q) @ B
        w, V = np.linalg.eigh(Hh)
        cut = 1e-9 * max(np.max(np.abs(w)), 1e-300)
        inv = np.where(np.abs(w) > cut, 1.0 / np.where(np.abs(w) > cut, w, 1.0), 0.0)
        delta = -(V @ (inv * (V.T @ gt)))
        step = 1.0
        improved = False
        while step > 1e-4:
            trial = model.project(q + step * (B @ delta).reshape(q.shape))
            try:
                _, gtr, gtt, Btr = tangent_gradient(gamma, trial)
            except OutOfInjectivityError:
                step *= 0.5
                continue
            gnt = float(np.linalg.norm(gtt))
            if gnt < gn or gnt < tol:
                q, gt, B, gn = trial, gtt, Btr, gnt
                improved = True
                break
            step *= 0.5
        if not improved:
            break
    return gamma.with_nodes(q), gn, gn < tol


def morse_data(gamma: InvariantPath, lambda_rel=1e-6):
    """(index, nullity, shift Rayleigh quotient) of the Hessian transverse to the shift orbit."""
    B = tangent_basis(gamma)
    Hh = B.T @ hessian(gamma) @ B
    lam_tol = lambda_rel * float(np.mean(np.abs(np.diag(Hh))))
    xi = _shift_unit(gamma, B)
    if np.linalg.norm(xi) == 0:
        w = np.linalg.eigvalsh(Hh)
        return int(np.sum(w < -lam_tol)), int(np.sum(np.abs(w) <= lam_tol)), 0.0, lam_tol
    # orthonormal complement of the shift direction
    Q, _ = np.linalg.qr(np.column_stack([xi, np.eye(xi.size)]))
    C = Q[:, 1:xi.size]
    w = np.linalg.eigvalsh(C.T @ Hh @ C)
    rq = float(xi @ Hh @ xi)
    index = int(np.sum(w < -lam_tol))
    nullity = int(np.sum(np.abs(w) <= lam_tol)) + (1 if abs(rq) <= lam_tol else 0)
    return index, nullity, rq, lam_tol


def _record(gamma, config, seed=0, iterations=0, first_order_only=False):
    E = discrete_energy(gamma)
    gn = grad_norm(gamma)
    idx, nul, rq, _ = morse_data(gamma, config.lambda_rel)
    stationary = E < 1e-12
    per = period_detect(gamma)
    return CriticalRecord(gamma, E, gn, idx, nul, rq, per, gamma.label, stationary,
                          first_order_only=first_order_only, seed=seed, iterations=iterations)


def converge(gamma: InvariantPath, config: DescentConfig, seed=0) -> CriticalRecord:
    """Descent followed by Newton polishing; raises NonConvergenceError on failure."""
    path, its, gn = descend(gamma, config)
    if gn >= config.newton_switch:
        raise NonConvergenceError("descent did not reach the Newton threshold",
                                  {"grad_norm": gn, "iterations": its})
    polished, gn2, ok = newton_polish(path, config, tol=config.g_tol)
    if not ok:
        # keep descending; Newton may have been started too early
        path, its2, gn = descend(path, config, stop_norm=config.g_tol)
        its += its2
        polished, gn2, ok = newton_polish(path, config, tol=config.g_tol)
        if not ok and gn < config.g_tol:
            polished, gn2, ok = path, gn, True
    if not ok:
        raise NonConvergenceError("no convergence to g_tol", {"grad_norm": gn2, "iterations": its})
    return _record(polished, config, seed, its)


# -------------------------------------------------------------------------- per-class minimization


def _smooth_perturbation(rng, K, n, amplitude, modes=3):
    t = np.arange(K) / K
    out = np.zeros((K, n))
    for j in range(1, modes + 1):
        a = rng.normal(size=n) * amplitude / j
        b = rng.normal(size=n) * amplitude / j
        out += np.sin(2 * math.pi * j * t)[:, None] * a + (1 - np.cos(2 * math.pi * j * t))[:, None] * b
    return out


def class_seeds(model, I, label, config: DescentConfig, seed_count=None, N=None, rng=None):
    """One deterministic straight seed plus smoothly perturbed copies from random base points."""
    seed_count = config.seed_count if seed_count is None else seed_count
    N = config.N if N is None else N
    label = ClassLabel.from_any(label, model)
    if rng is None:
        rng = np.random.default_rng([config.rng_seed] + [v + 1000 for v in label.k] + list(label.h))
    seeds = [straight_path(model, I, label, N)]
    for _ in range(seed_count - 1):
        base = model.random_points(rng, 1)[0]
        g = straight_path(model, I, label, N, base=base)
        pert = _smooth_perturbation(rng, g.K, model.coord_dim, config.perturbation)
        seeds.append(g.with_nodes(model.project(g.nodes + pert)))
    return seeds


def _schedule_for(I):
    if not I.homotopic_to_identity:
        return None
    n = 8
    for _ in range(6):
        try:
            return homotopy_regularize(I, n)
        except Exception as exc:  # subdivision too coarse
            n = getattr(exc, "suggested_n", None) or 2 * n
    return None


def minimize_in_class(model, I, label, config: DescentConfig = DescentConfig(), seed_count=None, N=None,
                      seeds=None) -> CriticalRecord:
    label = ClassLabel.from_any(label, model)
    if seeds is None:
        seeds = class_seeds(model, I, label, config, seed_count, N)
    records, failures = [], []
    for j, s in enumerate(seeds):
        try:
            records.append(converge(s, config, seed=j))
        except (NonConvergenceError, OutOfInjectivityError) as exc:
            failures.append({"seed": j, "error": str(exc)})
    if not records:
        raise NonConvergenceError(f"no seed converged in class {label}", {"failures": failures})
    best = min(records, key=lambda r: (round(r.energy, 12), r.seed))
    sched = _schedule_for(I)
    if best.label != label:
        raise InvariantViolation(f"label drift {label} -> {best.label}")
    if sched is not None:
        got = class_label(best.path, sched)
        if got != label:
            raise InvariantViolation(f"recomputed class label {got} differs from {label}")
    return best


def refine_and_classify(record: CriticalRecord, config: DescentConfig = DescentConfig(), ladder=None) -> CriticalRecord:
    """Newton to newton_tol, then recompute index/nullity on every rung of the ladder."""
    ladder = config.ladder if ladder is None else ladder
    path, gn, ok = newton_polish(record.path, config)
    if not ok and gn > record.grad_norm:
        return replace(record, first_order_only=True)
    base = _record(path, config, record.seed, record.iterations)
    rungs = []
    for N in ladder:
        p = resample(path, N) if abs(path.N - N) > 1e-9 else path
        p, gnr, okr = newton_polish(p, config)
        idx, nul, rq, _ = morse_data(p, config.lambda_rel)
        rungs.append((("N", int(N)), ("energy", discrete_energy(p)), ("grad_norm", gnr),
                      ("index", idx), ("nullity", nul), ("converged", bool(okr))))
    unstable = len(rungs) >= 2 and dict(rungs[-1])["index"] != dict(rungs[-2])["index"]
    return replace(base, first_order_only=not ok, index_unstable=unstable, rungs=tuple(rungs))


# -------------------------------------------------------------------------- iteration index growth


@dataclass
class IndexGrowth:
    entries: list
    slope: float
    dichotomy_ok: bool
    nondecreasing: bool

    def to_dict(self):
        return {"entries": self.entries, "slope": self.slope, "dichotomy_ok": self.dichotomy_ok,
                "nondecreasing": self.nondecreasing}


def index_growth(record: CriticalRecord, m_max: int, config: DescentConfig = DescentConfig(), N=None,
                 m_min=0) -> IndexGrowth:
    """Morse index of the iterates gamma^{mp+1} for m = m_min .. m_max."""
    path = record.path
    if N is not None and abs(path.N - N) > 1e-9:
        path, _, _ = newton_polish(resample(path, N), config)
    per = period_detect(path)
    if per is None or per.stationary:
        raise MissingPeriodError("index growth needs a periodic non-stationary record")
    entries = []
    for m in range(m_min, m_max + 1):
        it = path if m == 0 else iterate(path, m, per)
        idx, nul, _, _ = morse_data(it, config.lambda_rel)
        entries.append({"m": m, "tau": it.tau, "index": idx, "nullity": nul})
    ms = np.array([e["m"] for e in entries], dtype=float)
    ind = np.array([e["index"] for e in entries], dtype=float)
    slope = float(linregress(ms, ind).slope) if len(ms) > 1 else 0.0
    dichotomy_ok = not (slope < 1e-3) or bool(np.all(ind == 0))
    nondecreasing = bool(np.all(np.diff(ind) >= 0))
    return IndexGrowth(entries, slope, dichotomy_ok, nondecreasing)


# -------------------------------------------------------------------------- census


def default_workers():
    env = os.environ.get("WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def _census_task(args):
    model, I, label, config = args
    try:
        rec = minimize_in_class(model, I, label, config)
        rec = replace(rec, path=gauge(rec.path))
        return label, rec, None
    except (NonConvergenceError, OutOfInjectivityError) as exc:
        return label, None, str(exc)


@dataclass
class CensusResult:
    records: list
    warnings: list
    groups: list
    witnesses: list
    distinct_count: int
    relation_symmetric: bool
    relation_transitive: bool


def _relation(records, tol):
    n = len(records)
    win = [_image_window(r.path)[0] for r in records]
    D = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i != j:
                D[i, j] = image_distance(records[i].path, records[j].path, cutoff=tol, windows=(win[i], win[j]))
    return D < tol, D


def census(model, I, labels, config: DescentConfig = DescentConfig(), workers=None) -> CensusResult:
    labels = [ClassLabel.from_any(l, model) for l in labels]
    workers = default_workers() if workers is None else workers
    tasks = [(model, I, l, config) for l in labels]
    if workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(tasks))) as ex:
            results = list(ex.map(_census_task, tasks))
    else:
        results = [_census_task(t) for t in tasks]
    records, warnings = [], []
    for label, rec, err in results:
        if rec is None:
            warnings.append({"label": label.to_list(), "warning": err})
        else:
            records.append(rec)
    geo = [r for r in records if not r.stationary]
    same, D = _relation(geo, config.dedup_tol)
    np.fill_diagonal(same, True)
    symmetric = bool(np.array_equal(same, same.T))
    transitive = bool(np.all(((same.astype(int) @ same.astype(int)) > 0) <= same))
    # connected components of the relation
    groups, seen = [], set()
    for i in range(len(geo)):
        if i in seen:
            continue
        stack, comp = [i], []
        while stack:
            a = stack.pop()
            if a in seen:
                continue
            seen.add(a)
            comp.append(a)
            stack.extend(int(b) for b in np.flatnonzero(same[a]) if b not in seen)
        groups.append(sorted(comp))
    witnesses = []
    for gi, comp in enumerate(groups):
        rep = min(comp, key=lambda i: (geo[i].energy, geo[i].label))
        for i in comp:
            if i == rep:
                continue
            ratio = geo[i].energy / geo[rep].energy
            # same image traversed at speed ratio r; integer r means an iterate
            r = Fraction(math.sqrt(ratio)).limit_denominator(64)
            relation = "shift" if r == 1 else ("iterate" if r.denominator == 1 else "rational-speed")
            witnesses.append({
                "group": gi,
                "member": geo[i].label.to_list(),
                "representative": geo[rep].label.to_list(),
                "relation": relation,
                "multiplicity": int(r) if r.denominator == 1 else str(r),
                "energy_ratio": ratio,
                "image_distance": float(D[i, rep]),
                "consistent": abs(ratio - float(r) ** 2) < 1e-6 * max(1.0, ratio),
            })
    group_ids = {}
    for gi, comp in enumerate(groups):
        for i in comp:
            group_ids[id(geo[i])] = gi
    ordered = [(r, group_ids.get(id(r))) for r in records]
    return CensusResult(ordered, warnings, [[geo[i].label.to_list() for i in comp] for comp in groups],
                        witnesses, len(groups), symmetric, transitive)
