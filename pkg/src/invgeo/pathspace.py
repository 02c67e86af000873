"""Discrete invariant paths (broken geodesics) and operations on them.

A path with shift tau is stored by K = round(N * tau) lifted nodes sampling
[0, tau) at step h = tau / K.  The node at time tau is never stored: it is the
image of node 0 under the closure map

    Phi(x) = deck(I_lift(x)),

where ``deck`` is the covering transformation recorded in the class label.
Consequently Phi(gamma(t)) = gamma(t + tau) on lifted coordinates, and the
energy is a smooth function of the free nodes q_0 .. q_{K-1}.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from . import serialize
from .errors import ConfigurationError, InvariantViolation, MissingPeriodError, OutOfInjectivityError
from .isometry import HomotopySchedule, Isometry, identity

GAUGE_FUNCTIONAL = np.array([0.7548776662466927, 0.5698402909980532, 0.4301597090019468,
                             0.3247179572447460, 0.2451223337533073, 0.1850395442376377])


@dataclass(frozen=True, order=True)
class ClassLabel:
    """Deck transformation of the universal cover: integer shift k and sphere signs h."""

    k: tuple = ()
    h: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "k", tuple(int(v) for v in self.k))
        object.__setattr__(self, "h", tuple(int(v) % 2 for v in self.h))

    def __str__(self):
        ks = ",".join(str(v) for v in self.k)
        if self.h:
            return f"({ks};{','.join(str(v) for v in self.h)})"
        return f"({ks})"

    def compose(self, other: "ClassLabel", times: int = 1) -> "ClassLabel":
        k = tuple(a + times * b for a, b in zip(self.k, other.k)) if other.k else self.k
        h = tuple(a + times * b for a, b in zip(self.h, other.h)) if other.h else self.h
        return ClassLabel(k, h)

    def to_list(self):
        return [list(self.k), list(self.h)]

    @classmethod
    def from_any(cls, value, model=None):
        if isinstance(value, ClassLabel):
            return value
        if isinstance(value, dict):
            return cls(tuple(value.get("k", ())), tuple(value.get("h", ())))
        value = list(value)
        if len(value) == 2 and all(isinstance(v, (list, tuple)) for v in value):
            return cls(tuple(value[0]), tuple(value[1]))
        if model is not None and model.n_sphere and len(value) == model.n_torus + model.n_sphere:
            return cls(tuple(value[: model.n_torus]), tuple(value[model.n_torus:]))
        return cls(tuple(value), ())


def zero_label(model) -> ClassLabel:
    return ClassLabel((0,) * model.n_torus, (0,) * model.n_sphere)


@dataclass(frozen=True, eq=False)
class InvariantPath:
    model: object
    isometry: Isometry
    tau: float
    nodes: np.ndarray
    label: ClassLabel

    def __post_init__(self):
        q = np.array(self.nodes, dtype=float)
        if q.ndim != 2 or q.shape[1] != self.model.coord_dim or q.shape[0] < 1:
            raise ConfigurationError(f"nodes must have shape (K, {self.model.coord_dim})")
        if not np.all(np.isfinite(q)):
            raise ConfigurationError("non-finite node coordinates")
        if self.tau <= 0:
            raise ConfigurationError("shift tau must be positive")
        q.setflags(write=False)
        object.__setattr__(self, "nodes", q)
        lab = ClassLabel.from_any(self.label, self.model)
        if len(lab.k) != self.model.n_torus or len(lab.h) != self.model.n_sphere:
            raise ConfigurationError(f"label {lab} does not fit model {self.model.model_id}")
        object.__setattr__(self, "label", lab)
        L, l = closure_affine(self.model, self.isometry, lab)
        object.__setattr__(self, "_L", L)
        object.__setattr__(self, "_l", l)

    @property
    def K(self) -> int:
        return self.nodes.shape[0]

    @property
    def h(self) -> float:
        return self.tau / self.K

    @property
    def N(self) -> float:
        return self.K / self.tau

    @property
    def closure_map(self):
        return self._L, self._l

    def closure_node(self, q0=None):
        q0 = self.nodes[0] if q0 is None else q0
        return q0 @ self._L.T + self._l

    def closed_nodes(self):
        """Nodes q_0 .. q_K including the implied closure node."""
        return np.vstack([self.nodes, self.closure_node()[None]])

    def with_nodes(self, nodes) -> "InvariantPath":
        return replace(self, nodes=nodes)


class LoopPath(InvariantPath):
    """Free loop: a path for the identity isometry."""

    def __post_init__(self):
        super().__post_init__()
        if not self.isometry.is_identity:
            raise ConfigurationError("a loop path needs the identity isometry")


def make_loop(model, nodes, label, tau=1.0) -> LoopPath:
    return LoopPath(model, identity(model), tau, nodes, label)


def closure_affine(model, I: Isometry, label: ClassLabel):
    """(L, l) with deck(I_lift(x)) = L x + l."""
    n = model.coord_dim
    l = model.deck_apply(I.lift(np.zeros(n)), label.k, label.h)
    L = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = 1.0
        L[:, j] = model.deck_apply(I.lift(e), label.k, label.h) - l
    return L, l


# -------------------------------------------------------------------------- energy


def _segments(gamma: InvariantPath, nodes=None, order=0):
    q = gamma.nodes if nodes is None else nodes
    ext = np.vstack([q, (q[0] @ gamma._L.T + gamma._l)[None]])
    return gamma.model.sqdist(ext[:-1], ext[1:], order)


def _check_gaps(gamma, s):
    r = gamma.model.r_inj
    smax = float(np.max(s))
    if smax >= r * r:
        raise OutOfInjectivityError(
            f"node gap {math.sqrt(smax):.4g} >= r_inj {r:.4g}; refine the discretization"
        )


def discrete_energy(gamma: InvariantPath, nodes=None) -> float:
    """Energy of the reparametrization to unit shift: tau * sum_i s_i / h."""
    s = _segments(gamma, nodes)
    _check_gaps(gamma, s)
    return float(gamma.tau * np.sum(s) / gamma.h)


def average_energy(gamma: InvariantPath, nodes=None) -> float:
    """(1/tau) * sum_i s_i / h, the mean kinetic energy per unit time."""
    s = _segments(gamma, nodes)
    _check_gaps(gamma, s)
    return float(np.sum(s) / (gamma.h * gamma.tau))


def energy_and_gradient(gamma: InvariantPath, nodes=None):
    """discrete_energy and its derivative with respect to the free nodes, shape (K, n)."""
    q = gamma.nodes if nodes is None else nodes
    s, ga, gb = _segments(gamma, q, 1)
    _check_gaps(gamma, s)
    scale = gamma.tau / gamma.h
    g = ga.copy()
    g[1:] += gb[:-1]
    g[0] += gb[-1] @ gamma._L
    return float(scale * np.sum(s)), scale * g


def gradient(gamma: InvariantPath, nodes=None) -> np.ndarray:
    return energy_and_gradient(gamma, nodes)[1]


def hessian(gamma: InvariantPath, nodes=None) -> np.ndarray:
    """Dense Hessian of discrete_energy in lifted node coordinates, (K n) x (K n)."""
    q = gamma.nodes if nodes is None else nodes
    s, ga, gb, Haa, Hab, Hbb = _segments(gamma, q, 2)
    _check_gaps(gamma, s)
    K, n = q.shape
    L = gamma._L
    H = np.zeros((K, n, K, n))
    idx = np.arange(K - 1)
    H[idx, :, idx, :] += Haa[:-1]
    H[idx + 1, :, idx + 1, :] += Hbb[:-1]
    H[idx, :, idx + 1, :] += Hab[:-1]
    H[idx + 1, :, idx, :] += np.swapaxes(Hab[:-1], -1, -2)
    # closing segment joins q_{K-1} to L q_0 + l
    a = K - 1
    H[a, :, a, :] += Haa[-1]
    H[a, :, 0, :] += Hab[-1] @ L
    H[0, :, a, :] += L.T @ Hab[-1].T
    H[0, :, 0, :] += L.T @ Hbb[-1] @ L
    H = H.reshape(K * n, K * n) * (gamma.tau / gamma.h)
    return 0.5 * (H + H.T)


def tangent_basis(gamma: InvariantPath, nodes=None) -> np.ndarray:
    """Block-diagonal basis of the tangent space of the node configuration, (K n) x (K d)."""
    q = gamma.nodes if nodes is None else nodes
    F = gamma.model.tangent_frame(q)  # (K, n, d)
    K, n, d = F.shape
    B = np.zeros((K, n, K, d))
    B[np.arange(K), :, np.arange(K), :] = F
    return B.reshape(K * n, K * d)


def shift_direction(gamma: InvariantPath, nodes=None) -> np.ndarray:
    """Discrete generator of the time-shift action (central differences)."""
    q = gamma.nodes if nodes is None else nodes
    L, l = gamma.closure_map
    nxt = np.vstack([q[1:], (q[0] @ L.T + l)[None]])
    Linv = np.linalg.inv(L)
    prv = np.vstack([((q[-1] - l) @ Linv.T)[None], q[:-1]])
    xi = 0.5 * (nxt - prv)
    return xi.reshape(-1)


# -------------------------------------------------------------------------- evaluation


def _phi_power(gamma: InvariantPath, x, j: int):
    L, l = gamma.closure_map
    if j >= 0:
        for _ in range(j):
            x = x @ L.T + l
    else:
        Linv = np.linalg.inv(L)
        for _ in range(-j):
            x = (x - l) @ Linv.T
    return x


def extended_nodes(gamma: InvariantPath, count: int) -> np.ndarray:
    """Nodes at times i*h for i = 0 .. count-1 (continuing past tau by invariance)."""
    L, l = gamma.closure_map
    blocks, cur = [], gamma.nodes
    total = 0
    while total < count:
        blocks.append(cur)
        total += cur.shape[0]
        cur = cur @ L.T + l
    return np.vstack(blocks)[:count]


def path_point(gamma: InvariantPath, t) -> np.ndarray:
    """Lifted point(s) of the broken-geodesic representative at arbitrary real times."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    ext = gamma.closed_nodes()
    j = np.floor(t / gamma.tau).astype(int)
    u = (t - j * gamma.tau) / gamma.h
    ur = np.round(u)
    u = np.where(np.abs(u - ur) < 1e-9, ur, u)
    # times that round up to tau belong to the next fundamental domain
    wrap = u >= gamma.K
    j = j + wrap
    u = np.where(wrap, u - gamma.K, u)
    i = np.minimum(np.floor(u).astype(int), gamma.K - 1)
    frac = u - i
    x = ext[i].copy()
    mid = frac > 0
    if np.any(mid):
        x[mid] = gamma.model.geodesic_interp(ext[i[mid]], ext[i[mid] + 1], frac[mid])
    out = np.empty_like(x)
    for jj in np.unique(j):
        sel = j == jj
        out[sel] = _phi_power(gamma, x[sel], int(jj))
    return out


def shift(gamma: InvariantPath, s: float) -> InvariantPath:
    """Time shift (s . gamma)(t) = gamma(t + s)."""
    u = s / gamma.h
    if abs(u - round(u)) < 1e-9:
        j = int(round(u))
        return gamma.with_nodes(extended_nodes_from(gamma, j, gamma.K))
    t = s + gamma.h * np.arange(gamma.K)
    return gamma.with_nodes(path_point(gamma, t))


def extended_nodes_from(gamma: InvariantPath, start: int, count: int) -> np.ndarray:
    """Nodes at times (start + i) * h, i = 0 .. count-1, for any integer start."""
    blk, off = divmod(start, gamma.K)
    base = _phi_power(gamma, gamma.nodes, blk)
    tmp = gamma.with_nodes(base)
    return extended_nodes(tmp, off + count)[off:]


def resample(gamma: InvariantPath, N: int) -> InvariantPath:
    K = int(round(N * gamma.tau))
    if K < 1:
        raise ConfigurationError("resampling needs at least one node")
    t = gamma.tau * np.arange(K) / K
    return gamma.with_nodes(path_point(gamma, t))


def straight_path(model, I: Isometry, label, N=64, tau=1.0, base=None) -> InvariantPath:
    """Chart-straight seed from base to its closure image in the given class."""
    label = ClassLabel.from_any(label, model)
    K = int(round(N * tau))
    if base is None:
        base = model.canonicalize(np.full(model.coord_dim, 0.1)) if not model.n_sphere \
            else model.random_points(np.random.default_rng(0), 1)[0]
    tmp = InvariantPath(model, I, tau, np.asarray(base, dtype=float)[None], label)
    end = tmp.closure_node()
    nodes = model.geodesic_interp(np.repeat(tmp.nodes, K, 0), np.repeat(end[None], K, 0), np.arange(K) / K)
    return tmp.with_nodes(nodes)


# -------------------------------------------------------------------------- periods


class Period(NamedTuple):
    value: float
    nodes: int
    deck: ClassLabel
    stationary: bool


def period_detect(gamma: InvariantPath, horizon=32.0, tol=1e-6):
    """Smallest grid-aligned p in (0, horizon] with gamma(t + p) = gamma(t) on M."""
    model = gamma.model
    K = gamma.K
    Pmax = int(math.floor(horizon / gamma.h + 1e-9))
    ext = extended_nodes(gamma, Pmax + K)
    base = ext[:K]
    spread = np.max(model.chart_gap(base[0], base))
    if spread < tol and float(np.max(model.chart_gap(base[0], gamma.closure_node()))) < tol:
        return Period(gamma.h, 1, zero_label(model), True)
    for P in range(1, Pmax + 1):
        if np.max(model.chart_gap(base, ext[P:P + K])) < tol:
            k, hh = model.deck_between(base[0], ext[P])
            return Period(P * gamma.h, P, ClassLabel(k, hh), False)
    return None


def iterate(gamma: InvariantPath, m: int, period: Period | None = None) -> InvariantPath:
    """Representative of gamma^{mp+1} in the space with shift m p + tau."""
    if m < 1:
        raise ConfigurationError("m must be >= 1")
    if period is None:
        period = period_detect(gamma)
    if period is None:
        raise MissingPeriodError("path has no period within the search horizon")
    P = period.nodes
    K_new = gamma.K + m * P
    nodes = extended_nodes(gamma, K_new)
    label = gamma.label.compose(period.deck, m)
    return InvariantPath(gamma.model, gamma.isometry, m * P * gamma.h + gamma.tau, nodes, label)


# -------------------------------------------------------------------------- labels and iota/nu


def _lift_walk(model, pts):
    """Re-lift canonical points continuously starting from the first."""
    out = np.empty(pts.shape)
    out[0] = pts[0]
    gaps = model.chart_gap(pts[:-1], pts[1:])
    if np.max(gaps, initial=0.0) >= model.r_inj:
        raise OutOfInjectivityError("consecutive points too far apart to lift uniquely")
    for i in range(1, pts.shape[0]):
        out[i] = model.nearest_lift(out[i - 1], pts[i])
    return out


def nu_map(gamma: InvariantPath, schedule: HomotopySchedule) -> LoopPath:
    """Free loop: gamma on [0, tau] at double speed, then the homotopy track reversed."""
    model = gamma.model
    K = gamma.K
    q0 = gamma.nodes[0]
    qK = gamma.closure_node()
    back = schedule.track(q0, 1.0 - np.arange(K) / K)  # from I(q0) towards q0
    back = model.deck_apply(back, gamma.label.k, gamma.label.h)
    back = np.vstack([model.nearest_lift(qK, back[0])[None], back[1:]])
    nodes = np.vstack([gamma.nodes, back])
    return make_loop(model, nodes, gamma.label, gamma.tau)


def iota_map(loop: InvariantPath, schedule: HomotopySchedule) -> InvariantPath:
    """Invariant path: loop at double speed, then the track from its end to I of it."""
    model = loop.model
    K = loop.K
    end = loop.closure_node()
    fwd = schedule.track(end, np.arange(K) / K)
    nodes = np.vstack([loop.nodes, fwd])
    return InvariantPath(model, schedule.isometry, loop.tau, nodes, loop.label)


def loop_label(loop: InvariantPath) -> ClassLabel:
    """Deck transformation carrying the start of a closed curve to its lifted end.

    The nodes are first projected to the quotient and then re-lifted step by
    step, so the result does not rely on the stored lift.
    """
    model = loop.model
    pts = model.canonicalize(loop.closed_nodes())
    lifted = _lift_walk(model, pts)
    k, h = model.deck_between(lifted[0], lifted[-1])
    return ClassLabel(k, h)


def class_label(gamma: InvariantPath, schedule: HomotopySchedule | None = None) -> ClassLabel:
    """Free homotopy class of nu(gamma) read off from the universal cover."""
    if gamma.isometry.is_identity:
        return loop_label(gamma)
    if schedule is None:
        raise ConfigurationError("a homotopy schedule is needed to label invariant paths")
    return loop_label(nu_map(gamma, schedule))


# -------------------------------------------------------------------------- homotopies between paths


@dataclass(frozen=True, eq=False)
class InterpFamily:
    """Pointwise geodesic interpolation H_t between two paths of one class."""

    start: InvariantPath
    end_nodes: np.ndarray

    def at(self, t: float) -> InvariantPath:
        a = self.start.nodes
        if t == 0.0:
            return self.start
        if t == 1.0:
            return self.start.with_nodes(self.end_nodes)
        return self.start.with_nodes(self.start.model.geodesic_interp(a, self.end_nodes, t))

    def max_energy(self, samples=33):
        return max(discrete_energy(self.at(t)) for t in np.linspace(0.0, 1.0, samples))


def interp_homotopy(gamma_a: InvariantPath, gamma_b: InvariantPath) -> InterpFamily:
    if gamma_a.K != gamma_b.K or gamma_a.tau != gamma_b.tau:
        raise ConfigurationError("paths must share tau and node count")
    if gamma_a.label != gamma_b.label:
        raise ConfigurationError("paths lie in different classes")
    model = gamma_a.model
    nb = model.nearest_lift(gamma_a.nodes, gamma_b.nodes)
    gap = np.sqrt(model.sqdist(gamma_a.nodes, nb))
    if np.max(gap) >= model.r_inj:
        raise OutOfInjectivityError("pointwise gap exceeds r_inj; cannot interpolate")
    # the re-lifted end path must close up next to the start path's closure node
    tmp = gamma_b.with_nodes(nb)
    expect = model.nearest_lift(gamma_a.closure_node(), tmp.closure_node())
    if np.max(np.abs(tmp.closure_node() - expect)) > 1e-9:
        raise InvariantViolation("re-lifted end path does not close next to the start path")
    return InterpFamily(gamma_a, nb)


# -------------------------------------------------------------------------- images and gauge


def _image_window(gamma: InvariantPath, horizon=32.0, tol=1e-6):
    per = period_detect(gamma, horizon, tol)
    if per is None:
        count = int(round(horizon / gamma.h))
    else:
        count = per.nodes
    pts = extended_nodes(gamma, count + 1)
    return pts, per


def _point_polyline_distance(model, pts, poly, cutoff=None):
    """Distance from each point to a lifted polyline, modulo deck transformations.

    With a cutoff the scan stops at the first point farther than it (points
    are visited in a spread-out order so that this happens early).
    """
    a, b = poly[:-1], poly[1:]
    ab = b - a
    den = np.sum(ab * ab, axis=-1)
    den = np.where(den > 0, den, 1.0)
    n = pts.shape[0]
    stride = max(1, int(math.sqrt(n)))
    order = np.concatenate([np.arange(r, n, stride) for r in range(stride)])
    best = np.full(n, np.inf)
    for i in order:
        xa = model.nearest_lift(a, np.broadcast_to(pts[i], a.shape))
        t = np.clip(np.sum((xa - a) * ab, axis=-1) / den, 0.0, 1.0)
        best[i] = np.sqrt(np.min(np.sum((xa - a - t[:, None] * ab) ** 2, axis=-1)))
        if cutoff is not None and best[i] > cutoff:
            return best[i:i + 1]
    return best


def _directed(model, p, q, cutoff=None):
    if q.shape[0] > 1:
        return float(np.max(_point_polyline_distance(model, p, q, cutoff)))
    return float(np.max(model.chart_gap(p, q[0])))


def image_distance(gamma1: InvariantPath, gamma2: InvariantPath, horizon=32.0, cutoff=None, windows=None) -> float:
    """Symmetric Hausdorff distance between the images over minimal periods.

    When cutoff is given, any value above it only certifies "farther than cutoff".
    """
    p1, p2 = windows if windows is not None else (_image_window(gamma1, horizon)[0],
                                                  _image_window(gamma2, horizon)[0])
    model = gamma1.model
    d12 = _directed(model, p1, p2, cutoff)
    if cutoff is not None and d12 > cutoff:
        return d12
    return max(d12, _directed(model, p2, p1, cutoff))


def is_geometrically_distinct(gamma1: InvariantPath, gamma2: InvariantPath, tol=1e-3, horizon=32.0) -> bool:
    if gamma1.model is not gamma2.model and gamma1.model.model_id != gamma2.model.model_id:
        return True
    return image_distance(gamma1, gamma2, horizon) >= tol


def gauge(gamma: InvariantPath, horizon=32.0) -> InvariantPath:
    """Shift-align so node 0 minimizes a fixed generic functional of canonical coordinates."""
    per = period_detect(gamma, horizon)
    window = gamma.K if per is None or per.stationary else per.nodes
    pts = gamma.model.canonicalize(extended_nodes(gamma, window))
    w = GAUGE_FUNCTIONAL[: pts.shape[1]]
    vals = np.round(pts @ w, 12)
    keys = [(vals[i],) + tuple(pts[i]) for i in range(window)]
    j = min(range(window), key=lambda i: keys[i])
    out = shift(gamma, j * gamma.h) if j else gamma
    # use the canonical sheet for node 0 and keep the rest continuous with it
    delta = out.model.canonicalize(out.nodes[0])
    if out.model.n_sphere == 0:
        return out.with_nodes(out.nodes + (delta - out.nodes[0]))
    return out


# -------------------------------------------------------------------------- serialization


def to_record(gamma: InvariantPath, energy=True) -> dict:
    rec = {
        "model_id": gamma.model.model_id,
        "model": gamma.model.to_dict(),
        "isometry_id": gamma.isometry.isometry_id,
        "isometry": gamma.isometry.to_dict(),
        "tau": float(gamma.tau),
        "N": float(gamma.N),
        "nodes": gamma.nodes.tolist(),
        "label": gamma.label.to_list(),
    }
    if energy:
        rec["energy"] = discrete_energy(gamma)
    return rec


def dumps_path(gamma: InvariantPath, energy=True) -> str:
    return serialize.dumps(to_record(gamma, energy))


def from_record(rec: dict, model=None, isometry=None) -> InvariantPath:
    from .catalog import build_isometry, build_model

    if model is None:
        model = build_model(rec["model"])
    if isometry is None:
        isometry = build_isometry(model, rec["isometry"])
    if model.model_id != rec["model_id"]:
        raise ConfigurationError("record belongs to a different model")
    lab = rec["label"]
    return InvariantPath(model, isometry, float(rec["tau"]), np.asarray(rec["nodes"], dtype=float),
                         ClassLabel(tuple(lab[0]), tuple(lab[1])))


def loads_path(text: str, model=None, isometry=None) -> InvariantPath:
    return from_record(serialize.loads(text), model, isometry)
