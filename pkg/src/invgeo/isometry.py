"""Isometries of the model manifolds and their homotopies to the identity.

Every isometry is stored through an affine lift x -> M x + c acting on lifted
coordinates (integer matrix plus offset on torus factors, a rotation on sphere
factors).  The lift commutes with the deck group, which is what makes class
labels of invariant paths well defined.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares
from scipy.spatial.transform import Rotation

from .errors import AllPointsFixed, ConfigurationError, NotAnIsometryError, SubdivisionTooCoarseError
from .geometry import RP2Model, TorusModel, _slices


@dataclass(frozen=True, eq=False)
class FactorMap:
    """Isometry of a single factor, given by its lift and an optional homotopy."""

    kind: str
    M: np.ndarray
    c: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def homotopic_to_identity(self) -> bool:
        if self.kind in ("identity", "translation", "rp2-rotation"):
            return True
        return bool(np.array_equal(self.M, np.eye(self.M.shape[0])))

    def at(self, t: float):
        """(M_t, c_t) of the analytic homotopy I_t with I_0 = id and I_1 = this map."""
        n = self.M.shape[0]
        if t == 1.0:
            return self.M, self.c
        if self.kind == "rp2-rotation":
            axis = np.asarray(self.params["axis"], dtype=float)
            axis = axis / np.linalg.norm(axis)
            R = Rotation.from_rotvec(t * self.params["angle"] * axis).as_matrix()
            return R, np.zeros(3)
        if not self.homotopic_to_identity:
            raise ConfigurationError(f"{self.kind} map is not homotopic to the identity")
        return np.eye(n), t * self.c

    def to_dict(self):
        d = {"kind": self.kind}
        d.update({k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in self.params.items()})
        return d


def _identity_factor(f):
    n = f.coord_dim
    return FactorMap("identity", np.eye(n), np.zeros(n))


@dataclass(frozen=True, eq=False)
class Isometry:
    model: object
    parts: tuple
    name: str = ""

    def __post_init__(self):
        if len(self.parts) != len(self.model.factors):
            raise ConfigurationError("one factor map per model factor is required")
        n = self.model.coord_dim
        M = np.zeros((n, n))
        c = np.zeros(n)
        for p, s in zip(self.parts, _slices(self.model)):
            M[s, s] = p.M
            c[s] = p.c
        M.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "Minv", np.linalg.inv(M))

    @property
    def kind(self):
        kinds = [p.kind for p in self.parts]
        return kinds[0] if len(kinds) == 1 else "product"

    @property
    def homotopic_to_identity(self):
        return all(p.homotopic_to_identity for p in self.parts)

    @property
    def is_identity(self):
        return all(p.kind == "identity" for p in self.parts) or (
            np.array_equal(self.M, np.eye(self.M.shape[0])) and not np.any(self.c)
        )

    @property
    def isometry_id(self):
        return "x".join(
            p.kind + ("" if not p.params else repr({k: np.asarray(v).tolist() for k, v in p.params.items()}))
            for p in self.parts
        )

    def to_dict(self):
        return {"kind": "product", "factors": [p.to_dict() for p in self.parts]} if len(self.parts) > 1 \
            else self.parts[0].to_dict()

    # action ------------------------------------------------------------------
    def lift(self, x):
        """Lifted image M x + c (no canonicalization)."""
        return np.asarray(x, dtype=float) @ self.M.T + self.c

    def lift_inverse(self, y):
        return (np.asarray(y, dtype=float) - self.c) @ self.Minv.T

    def lift_at(self, x, t):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape)
        for p, s in zip(self.parts, _slices(self.model)):
            Mt, ct = p.at(t)
            out[..., s] = x[..., s] @ Mt.T + ct
        return out

    def jacobian(self, p=None):
        """Differential of the lift (constant for every built-in kind)."""
        return self.M.copy()


def apply(I: Isometry, p):
    return I.model.canonicalize(I.lift(p))


def apply_inverse(I: Isometry, p):
    return I.model.canonicalize(I.lift_inverse(p))


# constructors ------------------------------------------------------------------


def identity(model, name="identity") -> Isometry:
    return Isometry(model, tuple(_identity_factor(f) for f in model.factors), name)


def translation(model, v, name="") -> Isometry:
    """Translation of the torus coordinates by v (sphere factors untouched)."""
    v = np.asarray(v, dtype=float)
    parts, o = [], 0
    for f in model.factors:
        if isinstance(f, TorusModel):
            vv = v[o:o + f.dimension]
            if vv.size != f.dimension:
                raise ConfigurationError("translation vector length does not match torus dimension")
            parts.append(FactorMap("translation", np.eye(f.dimension), vv.copy(), {"v": vv.copy()}))
            o += f.dimension
        else:
            parts.append(_identity_factor(f))
    if o != v.size:
        raise ConfigurationError("translation vector length does not match torus dimension")
    return Isometry(model, tuple(parts), name)


def torus_affine(model, A, b, name="") -> Isometry:
    if not isinstance(model, TorusModel):
        raise ConfigurationError("torus-affine maps need a single torus model")
    A = np.asarray(A, dtype=float)
    b = np.asarray(b, dtype=float)
    if A.shape != (model.dimension, model.dimension) or b.shape != (model.dimension,):
        raise ConfigurationError("matrix/offset shape mismatch")
    if not np.array_equal(A, np.round(A)) or abs(abs(np.linalg.det(A)) - 1) > 1e-12:
        raise ConfigurationError("torus map needs an integer unimodular matrix")
    return Isometry(model, (FactorMap("torus-affine", A, b, {"A": A, "b": b}),), name)


def rp2_rotation(axis, angle, name="") -> FactorMap:
    axis = np.asarray(axis, dtype=float)
    if axis.shape != (3,) or np.linalg.norm(axis) == 0:
        raise ConfigurationError("rotation axis must be a nonzero 3-vector")
    u = axis / np.linalg.norm(axis)
    R = Rotation.from_rotvec(angle * u).as_matrix()
    return FactorMap("rp2-rotation", R, np.zeros(3), {"axis": axis, "angle": float(angle)})


def product(model, factor_maps, name="") -> Isometry:
    """Combine one factor map (or single-factor Isometry) per model factor."""
    parts = []
    for fm in factor_maps:
        if isinstance(fm, Isometry):
            parts.extend(fm.parts)
        elif fm is None:
            parts.append(None)
        else:
            parts.append(fm)
    parts = [p if p is not None else _identity_factor(f) for p, f in zip(parts, model.factors)]
    return Isometry(model, tuple(parts), name)


def rotation_map(model) -> Isometry:
    """The quarter-turn (x, y) -> (1 - y, x) of the square torus."""
    return torus_affine(model, [[0.0, -1.0], [1.0, 0.0]], [1.0, 0.0], name="quarter-turn")


# chart pushforward ----------------------------------------------------------------


def _chart(model, x):
    """Intrinsic chart coordinates: torus coords as is, spheres by polar angles."""
    parts = []
    for f, s in zip(model.factors, _slices(model)):
        xs = np.asarray(x)[..., s]
        parts.append(RP2Model.to_angles(xs) if isinstance(f, RP2Model) else xs)
    return np.concatenate(parts, axis=-1)


def _unchart(model, u):
    parts, o = [], 0
    for f in model.factors:
        if isinstance(f, RP2Model):
            parts.append(RP2Model.from_angles(u[..., o:o + 2]))
            o += 2
        else:
            parts.append(u[..., o:o + f.dim])
            o += f.dim
    return np.concatenate(parts, axis=-1)


def _angle_wrap_mask(model):
    mask = []
    for f in model.factors:
        if isinstance(f, RP2Model):
            mask.extend([False, True])
        else:
            mask.extend([False] * f.dim)
    return np.array(mask)


def jacobian_fd(I: Isometry, x, step=1e-6):
    """Central finite-difference Jacobian of I in intrinsic chart coordinates."""
    model = I.model
    u = _chart(model, x)
    wrap = _angle_wrap_mask(model)
    n = u.size
    J = np.empty((n, n))
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        up = _chart(model, I.lift(_unchart(model, u + e)))
        um = _chart(model, I.lift(_unchart(model, u - e)))
        d = up - um
        d[wrap] = (d[wrap] + math.pi) % (2 * math.pi) - math.pi
        J[:, j] = d / (2 * step)
    return J


@dataclass
class IsometryReport:
    max_metric_defect: float
    worst_point: np.ndarray
    sample_count: int
    passed: bool


def check_isometry(I: Isometry, model=None, sample_count=200, tol=1e-8, rng=None, raise_on_fail=True):
    """Pull back the metric through the finite-difference differential and compare."""
    model = model or I.model
    if sample_count < 100:
        raise ConfigurationError("sample_count must be >= 100")
    rng = np.random.default_rng(0) if rng is None else rng
    worst, worst_pt, used = 0.0, None, 0
    mask = _angle_wrap_mask(model)
    polar = [i - 1 for i in np.flatnonzero(mask)]
    while used < sample_count:
        x = model.random_points(rng, 1)[0]
        ux, uy = _chart(model, x), _chart(model, I.lift(x))
        # keep away from the poles of the angular chart
        if any(min(u[i], math.pi - u[i]) < 0.1 for u in (ux, uy) for i in polar):
            continue
        J = jacobian_fd(I, x)
        gx = model.metric_eval(x)
        gy = model.metric_eval(I.lift(x))
        defect = float(np.max(np.abs(J.T @ gy @ J - gx)))
        if defect > worst or worst_pt is None:
            worst, worst_pt = defect, x
        used += 1
    rep = IsometryReport(worst, worst_pt, used, worst < tol)
    if not rep.passed and raise_on_fail:
        raise NotAnIsometryError(
            f"metric defect {worst:.3e} >= {tol:.1e} at point {np.round(worst_pt, 6).tolist()}",
            defect=worst, worst_point=worst_pt,
        )
    return rep


# fixed points ------------------------------------------------------------------------


def _fixed_residual(I, x):
    y = I.model.project(x)
    return I.model.nearest_lift(y, I.lift(y)) - y


def fixed_points(I: Isometry, model=None, grid_resolution=32, dedup=1e-6):
    """Newton-polished fixed points of I seeded from grid local minima of the displacement."""
    model = model or I.model
    if grid_resolution < 8:
        raise ConfigurationError("grid_resolution must be >= 8")
    if I.is_identity:
        raise AllPointsFixed("every point is fixed by the identity")
    all_torus = all(isinstance(f, TorusModel) for f in model.factors)
    if all_torus:
        d = model.coord_dim
        axes = [np.arange(grid_resolution) / grid_resolution] * d
        G = np.array(list(itertools.product(*axes)))
        disp = model.chart_gap(G, I.lift(G)).reshape((grid_resolution,) * d)
        is_min = np.ones(disp.shape, dtype=bool)
        for ax in range(d):
            for sh in (1, -1):
                is_min &= disp <= np.roll(disp, sh, axis=ax)
        thr = 2.0 * math.sqrt(d) * (1.0 + np.linalg.norm(I.M, 2)) / grid_resolution
        seeds = G[(is_min & (disp < thr)).ravel()]
    else:
        seeds = _sample_grid(model, grid_resolution)
        disp = model.chart_gap(seeds, I.lift(seeds))
        seeds = seeds[disp < 4.0 / grid_resolution]
    found = []
    for s in seeds:
        sol = least_squares(lambda x: _fixed_residual(I, x), s, xtol=1e-15, ftol=1e-15, gtol=1e-15)
        x = model.canonicalize(model.project(sol.x))
        if np.max(np.abs(_fixed_residual(I, x))) > 1e-10:
            continue
        if all(model.chart_gap(x, y) > dedup for y in found):
            found.append(x)
    found.sort(key=lambda p: tuple(p))
    return found


def _sample_grid(model, res):
    blocks = []
    for f in model.factors:
        if isinstance(f, RP2Model):
            n = 2 * res * res
            i = np.arange(n) + 0.5
            phi = np.arccos(1 - i / n)  # upper hemisphere suffices on RP2
            th = math.pi * (1 + 5**0.5) * i
            blocks.append(np.stack([np.cos(th) * np.sin(phi), np.sin(th) * np.sin(phi), np.cos(phi)], -1))
        else:
            ax = [np.arange(res) / res] * f.dim
            blocks.append(np.array(list(itertools.product(*ax))))
    out = blocks[0]
    for b in blocks[1:]:
        out = np.array([np.concatenate([u, v]) for u in out for v in b])
    return out


# homotopy schedules -------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class HomotopySchedule:
    """Homotopy I_t sampled at t = i/n, joined by constant-speed minimizing arcs."""

    isometry: Isometry
    n: int

    @property
    def model(self):
        return self.isometry.model

    def nodes(self, q):
        """Lifted images I_{i/n}(q), i = 0..n; node 0 is q and node n is the lift of I(q)."""
        q = np.asarray(q, dtype=float)
        pts = [q]
        for i in range(1, self.n):
            pts.append(self.isometry.lift_at(q, i / self.n))
        pts.append(self.isometry.lift(q))
        out = np.stack(pts, axis=-2)
        # keep consecutive nodes on nearby sheets of the cover
        for i in range(1, self.n + 1):
            out[..., i, :] = self.model.nearest_lift(out[..., i - 1, :], out[..., i, :])
        return out

    def track(self, q, t):
        """Points on the broken-geodesic track at times t in [0, 1]."""
        nodes = self.nodes(q)
        t = np.atleast_1d(np.asarray(t, dtype=float))
        u = np.clip(t * self.n, 0.0, self.n)
        i = np.minimum(np.floor(u).astype(int), self.n - 1)
        frac = u - i
        out = self.model.geodesic_interp(nodes[i], nodes[i + 1], frac)
        out[t >= 1.0] = nodes[-1]
        out[t <= 0.0] = nodes[0]
        return out

    def track_length(self, q):
        nodes = self.nodes(q)
        return float(np.sum(np.sqrt(self.model.sqdist(nodes[:-1], nodes[1:]))))

    def to_dict(self):
        return {"n": self.n}


def homotopy_regularize(I: Isometry, n=8, sample_count=64, rng=None) -> HomotopySchedule:
    if not I.homotopic_to_identity:
        raise ConfigurationError(f"isometry {I.isometry_id} has no homotopy to the identity")
    if n < 1:
        raise ConfigurationError("n must be >= 1")
    model = I.model
    rng = np.random.default_rng(1) if rng is None else rng
    sched = HomotopySchedule(I, int(n))
    qs = model.random_points(rng, sample_count)
    nodes = sched.nodes(qs)
    gaps = np.sqrt(model.sqdist(nodes[:, :-1], nodes[:, 1:]))
    gmax = float(gaps.max()) if gaps.size else 0.0
    if gmax >= model.r_inj:
        suggested = int(math.ceil(n * gmax / model.r_inj * 1.25)) + 1
        raise SubdivisionTooCoarseError(
            f"consecutive homotopy images {gmax:.4g} apart (r_inj {model.r_inj:.4g})", suggested_n=suggested
        )
    return sched
