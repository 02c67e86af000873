"""Chart-based model manifolds.

Three factor kinds are provided: flat tori, conformally warped tori and the
round projective plane (realized as the unit sphere with the antipodal
identification).  Products of factors are built with :class:`ProductModel`.

All point arithmetic is carried out on *lifted* coordinates: torus coordinates
live in R^d and sphere coordinates on S^2, i.e. in the universal (double) cover.
Deck transformations are integer translations on torus coordinates and a sign
flip on every sphere block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_bvp

from .errors import ConfigurationError, InvalidPointError, OutOfInjectivityError

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True, eq=False)
class ChartPoint:
    coords: np.ndarray
    model_id: str = ""

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if not np.all(np.isfinite(c)):
            raise InvalidPointError(f"non-finite coordinates {c}")
        object.__setattr__(self, "coords", c)


@dataclass(frozen=True, eq=False)
class GeodesicArc:
    start: np.ndarray
    velocity: np.ndarray
    duration: float
    steps: int
    points: np.ndarray
    velocities: np.ndarray


def _coords(p) -> np.ndarray:
    c = p.coords if isinstance(p, ChartPoint) else np.asarray(p, dtype=float)
    if not np.all(np.isfinite(c)):
        raise InvalidPointError(f"non-finite coordinates {c}")
    return c


# --------------------------------------------------------------------------
# warps


@dataclass(frozen=True)
class Warp:
    """Conformal factor f(x) = 1 + A * profile(x), 1-periodic in every coordinate.

    ``cos``:       profile = cos(2 pi x_axis)
    ``two-well``:  profile = cos(4 pi x_axis)   (two minima per period)
    ``cos-xy``:    profile = cos(2 pi x_0) cos(2 pi x_1)
    """

    family: str = "cos"
    amplitude: float = 0.3
    axis: int = 1

    FAMILIES = ("cos", "two-well", "cos-xy")

    def __post_init__(self):
        if self.family not in self.FAMILIES:
            raise ConfigurationError(f"unknown warp family {self.family!r}")
        if not 0.0 <= abs(self.amplitude) < 1.0:
            raise ConfigurationError("warp amplitude must satisfy |A| < 1")

    def _freq(self):
        return TWO_PI * (2.0 if self.family == "two-well" else 1.0)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        A = self.amplitude
        if self.family == "cos-xy":
            return 1.0 + A * np.cos(TWO_PI * x[..., 0]) * np.cos(TWO_PI * x[..., 1])
        w = self._freq()
        return 1.0 + A * np.cos(w * x[..., self.axis])

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        A = self.amplitude
        g = np.zeros(x.shape)
        if self.family == "cos-xy":
            c0, c1 = np.cos(TWO_PI * x[..., 0]), np.cos(TWO_PI * x[..., 1])
            s0, s1 = np.sin(TWO_PI * x[..., 0]), np.sin(TWO_PI * x[..., 1])
            g[..., 0] = -A * TWO_PI * s0 * c1
            g[..., 1] = -A * TWO_PI * c0 * s1
            return g
        w = self._freq()
        g[..., self.axis] = -A * w * np.sin(w * x[..., self.axis])
        return g

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        A = self.amplitude
        d = x.shape[-1]
        H = np.zeros(x.shape + (d,))
        if self.family == "cos-xy":
            c0, c1 = np.cos(TWO_PI * x[..., 0]), np.cos(TWO_PI * x[..., 1])
            s0, s1 = np.sin(TWO_PI * x[..., 0]), np.sin(TWO_PI * x[..., 1])
            k2 = TWO_PI**2
            H[..., 0, 0] = -A * k2 * c0 * c1
            H[..., 1, 1] = -A * k2 * c0 * c1
            H[..., 0, 1] = H[..., 1, 0] = A * k2 * s0 * s1
            return H
        w = self._freq()
        H[..., self.axis, self.axis] = -A * w * w * np.cos(w * x[..., self.axis])
        return H

    def depends_on(self, axis: int) -> bool:
        if self.family == "cos-xy":
            return axis in (0, 1)
        return axis == self.axis

    def to_dict(self):
        return {"family": self.family, "amplitude": self.amplitude, "axis": self.axis}


# --------------------------------------------------------------------------
# factor models


class _Factor:
    """Shared helpers; concrete factors fill in the geometry."""

    kind: str
    dim: int
    coord_dim: int
    r_inj: float
    n_torus: int = 0
    n_sphere: int = 0

    @property
    def factors(self):
        return (self,)

    def check_point(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise InvalidPointError("non-finite coordinates")
        return x


@dataclass(frozen=True, eq=False)
class TorusModel(_Factor):
    """R^d / Z^d with metric f(x) * delta (f == 1 for the flat torus)."""

    dimension: int = 2
    warp: Warp | None = None
    r_inj_value: float | None = None

    def __post_init__(self):
        if self.dimension < 1:
            raise ConfigurationError("torus dimension must be >= 1")
        if self.warp is not None:
            if self.dimension < 2 and self.warp.family == "cos-xy":
                raise ConfigurationError("cos-xy warp needs dimension >= 2")
            if self.warp.family != "cos-xy" and self.warp.axis >= self.dimension:
                raise ConfigurationError("warp axis out of range")

    # identity --------------------------------------------------------------
    @property
    def kind(self):
        return "flat-torus" if self.warp is None else "warped-torus"

    @property
    def dim(self):
        return self.dimension

    @property
    def coord_dim(self):
        return self.dimension

    @property
    def n_torus(self):
        return self.dimension

    @property
    def r_inj(self):
        if self.r_inj_value is not None:
            return self.r_inj_value
        # flat: half the systole; warped: conservative configured value
        return 0.5 if self.warp is None else 0.25

    @property
    def model_id(self):
        if self.warp is None:
            return f"flat-torus-{self.dimension}"
        w = self.warp
        return f"warped-torus-{self.dimension}({w.family},A={w.amplitude!r},axis={w.axis})"

    def to_dict(self):
        d = {"kind": self.kind, "dimension": self.dimension}
        if self.warp is not None:
            d["warp"] = self.warp.to_dict()
        return d

    # conformal factor -------------------------------------------------------
    def _f(self, x):
        if self.warp is None:
            return np.ones(np.shape(x)[:-1])
        return self.warp.value(x)

    def _df(self, x):
        if self.warp is None:
            return np.zeros(np.shape(x))
        return self.warp.grad(x)

    def _d2f(self, x):
        if self.warp is None:
            s = np.shape(x)
            return np.zeros(s + (s[-1],))
        return self.warp.hess(x)

    # covering space ------------------------------------------------------------
    def canonicalize(self, x):
        x = np.mod(self.check_point(x), 1.0)
        return np.where(x >= 1.0, 0.0, x)

    def nearest_lift(self, ref, x):
        x = np.asarray(x, dtype=float)
        return x + np.round(np.asarray(ref) - x)

    def deck_apply(self, x, k, h):
        return np.asarray(x, dtype=float) + np.asarray(k, dtype=float)

    def deck_between(self, x, y):
        """Deck (k, h) with y ~= deck(x); y and x must represent the same point."""
        k = np.round(np.asarray(y) - np.asarray(x)).astype(int)
        return tuple(int(v) for v in np.atleast_1d(k)), ()

    def chart_gap(self, a, b):
        d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
        d = d - np.round(d)
        return np.linalg.norm(d, axis=-1)

    def project(self, x):
        return np.asarray(x, dtype=float)

    def random_points(self, rng, n):
        return rng.random((n, self.dimension))

    # metric ------------------------------------------------------------------------
    def metric_eval(self, p):
        x = self.check_point(p)
        return self._f(x)[..., None, None] * np.eye(self.dimension)

    def metric_grad(self, p):
        """dg[k, i, j] = d g_ij / d x_k."""
        x = self.check_point(p)
        df = self._df(x)
        return df[..., :, None, None] * np.eye(self.dimension)

    def christoffel(self, p):
        x = self.check_point(p)
        f = self._f(x)
        df = self._df(x)
        d = self.dimension
        I = np.eye(d)
        # Gamma^k_ij = (delta_ki d_j f + delta_kj d_i f - delta_ij d_k f) / (2 f)
        G = (
            np.einsum("ki,...j->...kij", I, df)
            + np.einsum("kj,...i->...kij", I, df)
            - np.einsum("ij,...k->...kij", I, df)
        )
        return G / (2.0 * f[..., None, None, None])

    def coord_metric(self, x):
        return self.metric_eval(x)

    def tangent_frame(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(self.dimension), x.shape[:-1] + (self.dimension, self.dimension)).copy()

    def speed2(self, x, v):
        return self._f(x) * np.sum(np.asarray(v) ** 2, axis=-1)

    def accel(self, x, v):
        if self.warp is None:
            return np.zeros(np.shape(v))
        f = self._f(x)[..., None]
        df = self._df(x)
        vdf = np.sum(v * df, axis=-1, keepdims=True)
        v2 = np.sum(v * v, axis=-1, keepdims=True)
        return -(v * vdf - 0.5 * v2 * df) / f

    # squared segment distance -------------------------------------------------------
    def sqdist(self, a, b, order=0):
        """Squared length of the segment joining lifted points a and b.

        Exact for the flat torus.  For a warped torus the conformal factor is
        evaluated at the chart midpoint, a second-order accurate approximation
        of the squared Riemannian distance for short segments.
        """
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        D = b - a
        D2 = np.sum(D * D, axis=-1)
        if self.warp is None:
            s = D2
            if order == 0:
                return s
            ga, gb = -2.0 * D, 2.0 * D
            if order == 1:
                return s, ga, gb
            I = np.broadcast_to(np.eye(self.dimension), D.shape + (self.dimension,))
            return s, ga, gb, 2.0 * I, -2.0 * I, 2.0 * I
        m = 0.5 * (a + b)
        f = self._f(m)
        s = f * D2
        if order == 0:
            return s
        G = self._df(m)
        ga = 0.5 * G * D2[..., None] - 2.0 * f[..., None] * D
        gb = 0.5 * G * D2[..., None] + 2.0 * f[..., None] * D
        if order == 1:
            return s, ga, gb
        F = self._d2f(m)
        I = np.eye(self.dimension)
        GD = np.einsum("...i,...j->...ij", G, D)
        DG = np.swapaxes(GD, -1, -2)
        base = 0.25 * F * D2[..., None, None]
        fI = 2.0 * f[..., None, None] * I
        Haa = base - GD - DG + fI
        Hbb = base + GD + DG + fI
        Hab = base + GD - DG - fI
        return s, ga, gb, Haa, Hab, Hbb

    def geodesic_interp(self, a, b, t):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        t = np.asarray(t, dtype=float)
        return a + t[..., None] * (b - a) if t.ndim else a + t * (b - a)

    # distances -----------------------------------------------------------------------
    def distance_local(self, p, q, return_arc=False, samples=33):
        p = self.check_point(p)
        q = self.nearest_lift(p, self.check_point(q))
        chord = float(np.linalg.norm(q - p))
        if self.warp is None:
            if chord >= self.r_inj:
                raise OutOfInjectivityError(f"chart distance {chord:.6g} >= r_inj {self.r_inj}")
            if not return_arc:
                return chord
            s = np.linspace(0.0, 1.0, samples)
            return chord, p + s[:, None] * (q - p)
        fmax = 1.0 + abs(self.warp.amplitude)
        if chord * math.sqrt(fmax) >= self.r_inj or chord * math.sqrt(2.0 - fmax) >= self.r_inj:
            raise OutOfInjectivityError(f"points too far apart (chart distance {chord:.6g})")
        if chord == 0.0:
            return (0.0, np.repeat(p[None], samples, axis=0)) if return_arc else 0.0
        d = self.dimension

        def rhs(s, y):
            x, v = y[:d].T, y[d:].T
            return np.vstack([v.T, self.accel(x, v).T])

        def bc(ya, yb):
            return np.concatenate([ya[:d] - p, yb[:d] - q])

        s0 = np.linspace(0.0, 1.0, 17)
        y0 = np.vstack([p[:, None] + (q - p)[:, None] * s0, np.repeat((q - p)[:, None], s0.size, axis=1)])
        sol = solve_bvp(rhs, bc, s0, y0, tol=1e-11, max_nodes=20000)
        if not sol.success:
            raise OutOfInjectivityError(f"boundary-value solve failed: {sol.message}")
        ss = np.linspace(0.0, 1.0, 257)
        Y = sol.sol(ss)
        sp = np.sqrt(self.speed2(Y[:d].T, Y[d:].T))
        length = float(np.trapezoid(sp, ss))
        if not return_arc:
            return length
        s = np.linspace(0.0, 1.0, samples)
        return length, sol.sol(s)[:d].T


@dataclass(frozen=True, eq=False)
class RP2Model(_Factor):
    """Unit round sphere S^2 with antipodal identification."""

    n_sphere: int = 1

    kind = "round-rp2"
    dim = 2
    coord_dim = 3
    model_id = "round-rp2"

    @property
    def r_inj(self):
        return math.pi / 2.0

    def check_point(self, x):
        x = super().check_point(x)
        if np.any(np.linalg.norm(x, axis=-1) < 1e-12):
            raise InvalidPointError("the zero vector is not a point of the sphere")
        return x

    def to_dict(self):
        return {"kind": "round-rp2"}

    def _unit(self, x):
        x = np.asarray(x, dtype=float)
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        # leave already-unit vectors bit-identical so canonicalization is idempotent
        return x / np.where(np.abs(n - 1.0) < 4e-16, 1.0, n)

    def canonicalize(self, x):
        x = self._unit(self.check_point(x))
        flat = x.reshape(-1, 3)
        out = flat.copy()
        for i, row in enumerate(flat):
            nz = np.flatnonzero(np.abs(row) > 1e-15)
            if nz.size and row[nz[0]] < 0:
                out[i] = -row
        return out.reshape(x.shape)

    def nearest_lift(self, ref, x):
        x = np.asarray(x, dtype=float)
        sgn = np.where(np.sum(np.asarray(ref) * x, axis=-1, keepdims=True) < 0, -1.0, 1.0)
        return sgn * x

    def deck_apply(self, x, k, h):
        h = int(np.atleast_1d(h)[0]) if np.size(h) else 0
        return -np.asarray(x, dtype=float) if h % 2 else np.asarray(x, dtype=float)

    def deck_between(self, x, y):
        return (), (0 if float(np.dot(x, y)) >= 0 else 1,)

    def chart_gap(self, a, b):
        a, b = self._unit(a), self._unit(b)
        return np.minimum(np.linalg.norm(a - b, axis=-1), np.linalg.norm(a + b, axis=-1))

    def project(self, x):
        return self._unit(x)

    def random_points(self, rng, n):
        return self.canonicalize(rng.normal(size=(n, 3)))

    # angular chart (polar angle from e_z, azimuth) ----------------------------------
    @staticmethod
    def to_angles(p):
        p = np.asarray(p, dtype=float)
        p = p / np.linalg.norm(p, axis=-1, keepdims=True)
        theta = np.arccos(np.clip(p[..., 2], -1.0, 1.0))
        phi = np.arctan2(p[..., 1], p[..., 0])
        return np.stack([theta, phi], axis=-1)

    @staticmethod
    def from_angles(u):
        u = np.asarray(u, dtype=float)
        th, ph = u[..., 0], u[..., 1]
        return np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)

    @staticmethod
    def metric_angular(u):
        u = np.asarray(u, dtype=float)
        g = np.zeros(u.shape[:-1] + (2, 2))
        g[..., 0, 0] = 1.0
        g[..., 1, 1] = np.sin(u[..., 0]) ** 2
        return g

    @staticmethod
    def christoffel_angular(u):
        u = np.asarray(u, dtype=float)
        th = u[..., 0]
        G = np.zeros(u.shape[:-1] + (2, 2, 2))
        G[..., 0, 1, 1] = -np.sin(th) * np.cos(th)
        G[..., 1, 0, 1] = G[..., 1, 1, 0] = np.cos(th) / np.sin(th)
        return G

    def metric_eval(self, p):
        return self.metric_angular(self.to_angles(self.check_point(p)))

    def christoffel(self, p):
        return self.christoffel_angular(self.to_angles(self.check_point(p)))

    def coord_metric(self, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(3), x.shape[:-1] + (3, 3)).copy()

    def tangent_frame(self, x):
        n = self._unit(x)
        flat = n.reshape(-1, 3)
        out = np.empty((flat.shape[0], 3, 2))
        for i, v in enumerate(flat):
            e = np.eye(3)[int(np.argmin(np.abs(v)))]
            t1 = e - np.dot(e, v) * v
            t1 /= np.linalg.norm(t1)
            out[i, :, 0] = t1
            out[i, :, 1] = np.cross(v, t1)
        return out.reshape(n.shape[:-1] + (3, 2))

    def speed2(self, x, v):
        return np.sum(np.asarray(v) ** 2, axis=-1)

    def accel(self, x, v):
        x = np.asarray(x, dtype=float)
        v2 = np.sum(np.asarray(v) ** 2, axis=-1, keepdims=True)
        return -v2 * x / np.sum(x * x, axis=-1, keepdims=True)

    # squared distance -----------------------------------------------------------------
    @staticmethod
    def _theta_series(w):
        """theta^2 and its first two derivatives as functions of w = 1 - cos(theta)."""
        w = np.asarray(w, dtype=float)
        w = np.clip(w, 0.0, 2.0 - 1e-15)
        theta = 2.0 * np.arcsin(np.sqrt(w / 2.0))
        small = theta < 1e-4
        st = np.sin(theta)
        safe_st = np.where(small, 1.0, st)
        G = theta * theta
        G1 = np.where(small, 2.0 + theta**2 / 3.0, 2.0 * theta / safe_st)
        G2 = np.where(small, 2.0 / 3.0 + 4.0 * theta**2 / 15.0,
                      2.0 * (st - theta * np.cos(theta)) / np.where(small, 1.0, st**3))
        return G, G1, G2

    def sqdist(self, a, b, order=0):
        """Exact squared great-circle distance between the radial projections of a and b."""
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        ra = np.linalg.norm(a, axis=-1, keepdims=True)
        rb = np.linalg.norm(b, axis=-1, keepdims=True)
        na, nb = a / ra, b / rb
        c = np.sum(na * nb, axis=-1)
        # 1 - c from the chord avoids cancellation for nearby points
        w = 0.5 * np.sum((na - nb) ** 2, axis=-1)
        G, G1, G2 = self._theta_series(w)
        if order == 0:
            return G
        pa = (nb - c[..., None] * na) / ra
        pb = (na - c[..., None] * nb) / rb
        ga, gb = -G1[..., None] * pa, -G1[..., None] * pb
        if order == 1:
            return G, ga, gb
        I = np.eye(3)
        Pa = I - np.einsum("...i,...j->...ij", na, na)
        Pb = I - np.einsum("...i,...j->...ij", nb, nb)
        ra2, rb2 = ra[..., None], rb[..., None]
        caa = -(np.einsum("...i,...j->...ij", na, pa * ra) + np.einsum("...i,...j->...ij", pa * ra, na)
                + c[..., None, None] * Pa) / (ra2 * ra2)
        cbb = -(np.einsum("...i,...j->...ij", nb, pb * rb) + np.einsum("...i,...j->...ij", pb * rb, nb)
                + c[..., None, None] * Pb) / (rb2 * rb2)
        cab = np.einsum("...ij,...jk->...ik", Pa, Pb) / (ra2 * rb2)

        def outer(u, v):
            return np.einsum("...i,...j->...ij", u, v)

        G1e, G2e = G1[..., None, None], G2[..., None, None]
        Haa = G2e * outer(pa, pa) - G1e * caa
        Hbb = G2e * outer(pb, pb) - G1e * cbb
        Hab = G2e * outer(pa, pb) - G1e * cab
        return G, ga, gb, Haa, Hab, Hbb

    def geodesic_interp(self, a, b, t):
        a, b = self._unit(a), self._unit(b)
        t = np.asarray(t, dtype=float)
        c = np.clip(np.sum(a * b, axis=-1), -1.0, 1.0)
        om = np.arccos(c)
        so = np.sin(om)
        tt = t[..., None] if t.ndim else t
        safe = np.where(so < 1e-12, 1.0, so)[..., None]
        wa = np.where((so < 1e-12)[..., None], 1.0 - tt, np.sin((1.0 - tt) * om[..., None]) / safe)
        wb = np.where((so < 1e-12)[..., None], tt, np.sin(tt * om[..., None]) / safe)
        out = wa * a + wb * b
        anti = c < -1.0 + 1e-12
        if np.any(anti):
            # antipodal ends: half great circle through the first frame direction at a
            e = self.tangent_frame(a)[..., 0]
            half = np.cos(np.pi * tt) * a + np.sin(np.pi * tt) * e
            out = np.where(anti[..., None], half, out)
        return self._unit(out)

    def distance_local(self, p, q, return_arc=False, samples=33):
        p = self._unit(self.check_point(p))
        q = self.nearest_lift(p, self._unit(self.check_point(q)))
        ang = float(np.arccos(np.clip(np.dot(p, q), -1.0, 1.0)))
        if ang >= self.r_inj:
            raise OutOfInjectivityError(f"angle {ang:.6g} >= r_inj")
        if not return_arc:
            return ang
        s = np.linspace(0.0, 1.0, samples)
        return ang, self.geodesic_interp(np.repeat(p[None], samples, 0), np.repeat(q[None], samples, 0), s)


# --------------------------------------------------------------------------
# products


@dataclass(frozen=True, eq=False)
class ProductModel:
    """Riemannian product of factor models with block-diagonal metric."""

    parts: tuple = field(default_factory=tuple)

    kind = "product"

    def __post_init__(self):
        flat = []
        for f in self.parts:
            flat.extend(f.factors)
        if len(flat) < 1:
            raise ConfigurationError("product needs at least one factor")
        object.__setattr__(self, "parts", tuple(flat))
        sl, o = [], 0
        for f in flat:
            sl.append(slice(o, o + f.coord_dim))
            o += f.coord_dim
        object.__setattr__(self, "_slices", tuple(sl))

    @property
    def factors(self):
        return self.parts

    @property
    def slices(self):
        return self._slices

    @property
    def dim(self):
        return sum(f.dim for f in self.parts)

    @property
    def coord_dim(self):
        return sum(f.coord_dim for f in self.parts)

    @property
    def n_torus(self):
        return sum(f.n_torus for f in self.parts)

    @property
    def n_sphere(self):
        return sum(f.n_sphere for f in self.parts)

    @property
    def r_inj(self):
        return min(f.r_inj for f in self.parts)

    @property
    def model_id(self):
        return "product(" + ",".join(f.model_id for f in self.parts) + ")"

    def to_dict(self):
        return {"kind": "product", "factors": [f.to_dict() for f in self.parts]}

    def check_point(self, x):
        x = np.asarray(x, dtype=float)
        if not np.all(np.isfinite(x)):
            raise InvalidPointError("non-finite coordinates")
        return x

    def _map(self, name, x, *rest):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape)
        for f, s in zip(self.parts, self.slices):
            out[..., s] = getattr(f, name)(x[..., s], *[np.asarray(r)[..., s] for r in rest])
        return out

    def canonicalize(self, x):
        return self._map("canonicalize", x)

    def nearest_lift(self, ref, x):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape)
        for f, s in zip(self.parts, self.slices):
            out[..., s] = f.nearest_lift(np.asarray(ref)[..., s], x[..., s])
        return out

    def _split_deck(self, k, h):
        k = list(np.atleast_1d(k).astype(int)) if np.size(k) else []
        h = list(np.atleast_1d(h).astype(int)) if np.size(h) else []
        out = []
        for f in self.parts:
            out.append((k[: f.n_torus], h[: f.n_sphere]))
            k, h = k[f.n_torus:], h[f.n_sphere:]
        return out

    def deck_apply(self, x, k, h):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape)
        for f, s, (kk, hh) in zip(self.parts, self.slices, self._split_deck(k, h)):
            out[..., s] = f.deck_apply(x[..., s], kk, hh)
        return out

    def deck_between(self, x, y):
        K, H = [], []
        for f, s in zip(self.parts, self.slices):
            k, h = f.deck_between(np.asarray(x)[s], np.asarray(y)[s])
            K.extend(k)
            H.extend(h)
        return tuple(K), tuple(H)

    def chart_gap(self, a, b):
        tot = 0.0
        for f, s in zip(self.parts, self.slices):
            tot = tot + f.chart_gap(np.asarray(a)[..., s], np.asarray(b)[..., s]) ** 2
        return np.sqrt(tot)

    def project(self, x):
        return self._map("project", x)

    def random_points(self, rng, n):
        return np.concatenate([f.random_points(rng, n) for f in self.parts], axis=-1)

    def _blockdiag(self, mats):
        n = sum(m.shape[-1] for m in mats)
        lead = mats[0].shape[:-2]
        out = np.zeros(lead + (n, n))
        o = 0
        for m in mats:
            k = m.shape[-1]
            out[..., o:o + k, o:o + k] = m
            o += k
        return out

    def metric_eval(self, p):
        x = self.check_point(p)
        return self._blockdiag([f.metric_eval(x[..., s]) for f, s in zip(self.parts, self.slices)])

    def christoffel(self, p):
        x = self.check_point(p)
        blocks = [f.christoffel(x[..., s]) for f, s in zip(self.parts, self.slices)]
        n = self.dim
        out = np.zeros(x.shape[:-1] + (n, n, n))
        o = 0
        for b in blocks:
            k = b.shape[-1]
            out[..., o:o + k, o:o + k, o:o + k] = b
            o += k
        return out

    def coord_metric(self, x):
        x = np.asarray(x, dtype=float)
        return self._blockdiag([f.coord_metric(x[..., s]) for f, s in zip(self.parts, self.slices)])

    def tangent_frame(self, x):
        x = np.asarray(x, dtype=float)
        frames = [f.tangent_frame(x[..., s]) for f, s in zip(self.parts, self.slices)]
        out = np.zeros(x.shape[:-1] + (self.coord_dim, self.dim))
        ro = co = 0
        for F in frames:
            r, c = F.shape[-2:]
            out[..., ro:ro + r, co:co + c] = F
            ro += r
            co += c
        return out

    def speed2(self, x, v):
        return sum(f.speed2(np.asarray(x)[..., s], np.asarray(v)[..., s]) for f, s in zip(self.parts, self.slices))

    def accel(self, x, v):
        return self._map("accel", x, v)

    def sqdist(self, a, b, order=0):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        res = [f.sqdist(a[..., s], b[..., s], order) for f, s in zip(self.parts, self.slices)]
        if order == 0:
            return sum(res)
        s_tot = sum(r[0] for r in res)
        ga = np.concatenate([r[1] for r in res], axis=-1)
        gb = np.concatenate([r[2] for r in res], axis=-1)
        if order == 1:
            return s_tot, ga, gb
        Haa = self._blockdiag([r[3] for r in res])
        Hab = self._blockdiag([r[4] for r in res])
        Hbb = self._blockdiag([r[5] for r in res])
        return s_tot, ga, gb, Haa, Hab, Hbb

    def geodesic_interp(self, a, b, t):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        out = np.empty(np.broadcast_shapes(a.shape, b.shape))
        for f, s in zip(self.parts, self.slices):
            out[..., s] = f.geodesic_interp(a[..., s], b[..., s], t)
        return out

    def distance_local(self, p, q, return_arc=False, samples=33):
        p = self.check_point(p)
        q = self.check_point(q)
        res = [f.distance_local(p[s], q[s], return_arc, samples) for f, s in zip(self.parts, self.slices)]
        if not return_arc:
            return float(math.sqrt(sum(r * r for r in res)))
        length = math.sqrt(sum(r[0] ** 2 for r in res))
        return length, np.concatenate([r[1] for r in res], axis=-1)


def FlatTorus(dimension=2):
    return TorusModel(dimension=dimension)


def WarpedTorus(dimension=2, family="cos", amplitude=0.3, axis=1, r_inj=None):
    return TorusModel(dimension=dimension, warp=Warp(family, amplitude, axis), r_inj_value=r_inj)


def RoundRP2():
    return RP2Model()


def Product(*parts):
    return ProductModel(tuple(parts))


def torus_axes(model) -> list[int]:
    """Coordinate indices belonging to torus factors."""
    out = []
    for f, s in zip(model.factors, _slices(model)):
        if f.n_torus:
            out.extend(range(s.start, s.stop))
    return out


def sphere_blocks(model) -> list[slice]:
    return [s for f, s in zip(model.factors, _slices(model)) if f.n_sphere]


def _slices(model):
    if isinstance(model, ProductModel):
        return model.slices
    return (slice(0, model.coord_dim),)


# --------------------------------------------------------------------------
# module-level operations


def metric_eval(model, p) -> np.ndarray:
    return model.metric_eval(_coords(p))


def christoffel(model, p) -> np.ndarray:
    return model.christoffel(_coords(p))


def canonicalize(model, p) -> np.ndarray:
    return model.canonicalize(_coords(p))


def distance_local(model, p, q, return_arc=False):
    return model.distance_local(_coords(p), _coords(q), return_arc=return_arc)


def default_steps(model, p, v, T, arc_step=2e-3):
    sp = float(math.sqrt(model.speed2(np.asarray(p, float), np.asarray(v, float))))
    return max(16, int(math.ceil(T * sp / arc_step)))


def geodesic_shoot(model, p, v, T=1.0, steps=None) -> GeodesicArc:
    """Integrate the geodesic equation with classical fixed-step RK4."""
    x = _coords(p).copy()
    u = np.asarray(v, dtype=float).copy()
    if T < 0:
        raise ConfigurationError("duration must be non-negative")
    if steps is None:
        steps = default_steps(model, x, u, T)
    if steps < 16:
        raise ConfigurationError("steps must be >= 16")
    speed = float(math.sqrt(model.speed2(x, u)))
    if T * speed / steps > model.r_inj / 8.0:
        raise ConfigurationError(
            f"step too coarse: arc step {T * speed / steps:.4g} exceeds r_inj/8 = {model.r_inj / 8:.4g}"
        )
    dt = T / steps
    X = np.empty((steps + 1, x.size))
    V = np.empty((steps + 1, x.size))
    X[0], V[0] = x, u
    acc = model.accel
    for i in range(steps):
        k1x, k1v = u, acc(x, u)
        k2x, k2v = u + 0.5 * dt * k1v, acc(x + 0.5 * dt * k1x, u + 0.5 * dt * k1v)
        k3x, k3v = u + 0.5 * dt * k2v, acc(x + 0.5 * dt * k2x, u + 0.5 * dt * k2v)
        k4x, k4v = u + dt * k3v, acc(x + dt * k3x, u + dt * k3v)
        x = x + dt / 6.0 * (k1x + 2 * k2x + 2 * k3x + k4x)
        u = u + dt / 6.0 * (k1v + 2 * k2v + 2 * k3v + k4v)
        X[i + 1], V[i + 1] = x, u
    return GeodesicArc(start=X[0], velocity=V[0], duration=float(T), steps=int(steps), points=X, velocities=V)


def shoot_boundary_value(model, p, q, v0=None, T=1.0, steps=None):
    """Two-point boundary-value solve by Newton shooting on the initial velocity.

    Returns (velocity, energy) where energy = T * g(v, v) is the energy of the
    constant-speed geodesic on [0, T] joining p to the lifted point q.
    """
    from scipy.optimize import root

    p = _coords(p)
    q = _coords(q)
    if v0 is None:
        v0 = (q - p) / T

    def resid(v):
        return geodesic_shoot(model, p, v, T, steps).points[-1] - q

    sol = root(resid, v0, method="hybr", tol=1e-13)
    if not sol.success or np.max(np.abs(resid(sol.x))) > 1e-9:
        raise OutOfInjectivityError(f"shooting failed: {sol.message}")
    v = sol.x
    return v, float(T * model.speed2(p, v))
