"""Loops of invariant paths, minimax values and energy-controlled homotopies.

The minimax engine deforms a closed chain of invariant paths (a discrete loop
in the path space) by descending every member orthogonally to the chain and
redistributing members at equal spacing, so that the largest energy along the
chain decreases towards the mountain-pass level.  The top member is finally
Newton-polished onto the critical point at that level.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve
from scipy.optimize import minimize_scalar
from scipy.stats import kendalltau

from .errors import (ConfigurationError, ConstructionError, InvariantViolation, NonConvergenceError,
                     OutOfInjectivityError, RefinementError, StudyInapplicableError)
from .isometry import HomotopySchedule, homotopy_regularize
from .pathspace import (ClassLabel, InvariantPath, LoopPath, average_energy, discrete_energy, extended_nodes,
                        extended_nodes_from,
                        image_distance, loop_label, make_loop, path_point, period_detect, shift)
from .solver import (CriticalRecord, DescentConfig, _h1_factor, _record, grad_norm, newton_polish,
                     tangent_gradient)


# -------------------------------------------------------------------------- loops


@dataclass(frozen=True, eq=False)
class PathLoop:
    """Closed chain Theta(s_0), ..., Theta(s_{S-1}) of invariant paths; member 0 is the base."""

    members: tuple

    def __post_init__(self):
        ms = tuple(self.members)
        if len(ms) < 1:
            raise ConfigurationError("a loop needs at least one member")
        first = ms[0]
        for g in ms[1:]:
            if (g.K != first.K or g.tau != first.tau or g.label != first.label
                    or g.isometry is not first.isometry):
                raise ConfigurationError("loop members must share model, isometry, tau, N and label")
        object.__setattr__(self, "members", ms)

    @property
    def S(self):
        return len(self.members)

    @property
    def base(self):
        return self.members[0]

    @property
    def model(self):
        return self.base.model

    def energies(self):
        return np.array([discrete_energy(g) for g in self.members])

    def gaps(self):
        """Pointwise gap between consecutive members (cyclically), modulo the deck group."""
        ms = self.members
        out = np.empty(len(ms))
        for j in range(len(ms)):
            a, b = ms[j].nodes, ms[(j + 1) % len(ms)].nodes
            out[j] = float(np.max(self.model.chart_gap(a, b)))
        return out

    def check_adjacency(self):
        g = self.gaps()
        r = self.model.r_inj
        if len(self.members) > 1 and np.max(g) >= r:
            raise OutOfInjectivityError(f"adjacent members {np.max(g):.4g} apart (r_inj {r:.4g})")
        return g


def ev_label(loop: PathLoop) -> ClassLabel:
    """Free homotopy class of the closed curve s -> Theta(s)(0)."""
    pts = np.array([g.nodes[0] for g in loop.members] + [loop.members[0].nodes[0]])
    tmp = make_loop(loop.model, pts[:-1], _zero(loop.model), 1.0)
    return loop_label(tmp)


def _zero(model):
    return ClassLabel((0,) * model.n_torus, (0,) * model.n_sphere)


def _lifted_members(loop: PathLoop):
    """Member node arrays lifted continuously along the chain, plus the lifted closing copy of member 0."""
    model = loop.model
    arrs = [np.array(loop.members[0].nodes)]
    for g in loop.members[1:]:
        arrs.append(model.nearest_lift(arrs[-1], g.nodes))
    arrs.append(model.nearest_lift(arrs[-1], loop.members[0].nodes))
    return arrs


def construct_class_loop(alpha: InvariantPath, generator, schedule: HomotopySchedule | None = None, S=None):
    """Loop of invariant paths whose base points trace a torsion generator of the fundamental group.

    ``generator`` is an (S+1, n) array of lifted points of the sphere factor
    closing up to a deck image of its first point; alpha must be constant on
    that factor at a point fixed by the isometry.  Member j replaces alpha's
    sphere component by the homotopy track of generator[j].
    """
    model = alpha.model
    blocks = [s for f, s in zip(model.factors, _slices(model)) if f.n_sphere]
    if not blocks:
        raise ConfigurationError("no torsion generator exists for a model without projective factor")
    generator = np.asarray(generator, dtype=float)
    if generator.ndim != 2:
        raise ConfigurationError("generator must be an (S+1, n) array")
    if S is not None and generator.shape[0] != S + 1:
        raise ConfigurationError("generator length must be S + 1")
    sl = blocks[0]
    comp = alpha.nodes[:, sl]
    if np.max(np.abs(comp - comp[0])) > 1e-12 or np.max(model.chart_gap(comp[0], generator[0][None])) > 1e-9:
        raise ConfigurationError("alpha must be constant on the generator factor at the generator start")
    if schedule is None:
        schedule = homotopy_regularize(alpha.isometry, 8)
    K = alpha.K
    times = np.arange(K) / K * alpha.tau
    members = []
    for x in generator[:-1]:
        # full-dimensional point whose sphere part is x, then track it under the homotopy
        q = np.array(alpha.nodes[0])
        q[sl] = x
        track = schedule.track(q, np.clip(times / alpha.tau, 0.0, 1.0))
        nodes = np.array(alpha.nodes)
        nodes[:, sl] = track[:, sl]
        members.append(alpha.with_nodes(nodes))
    members[0] = alpha
    loop = PathLoop(tuple(members))
    loop.check_adjacency()
    # closing: the last generator point must represent the first point of the quotient
    if model.chart_gap(generator[-1], generator[0]) > 1e-9:
        raise ConfigurationError("generator does not close up in the quotient")
    return loop


def _slices(model):
    from .geometry import _slices as s

    return s(model)


def rp2_generator(axis, S, through=None):
    """Half great circle from axis to -axis (a closed geodesic of RP^2), S + 1 samples."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    if through is None:
        e = np.eye(3)[int(np.argmin(np.abs(a)))]
        through = e - np.dot(e, a) * a
    b = np.asarray(through, dtype=float)
    b = b - np.dot(b, a) * a
    b /= np.linalg.norm(b)
    th = math.pi * np.arange(S + 1) / S
    return np.cos(th)[:, None] * a + np.sin(th)[:, None] * b


def sweep_loop(alpha: InvariantPath, direction, S: int, perturbation=0.0, rng=None):
    """Loop of translates alpha + u * direction, u in [0, 1); direction must be an integer vector."""
    model = alpha.model
    d = np.asarray(direction, dtype=float)
    if model.n_sphere or d.shape != (model.coord_dim,) or not np.array_equal(d, np.round(d)):
        raise ConfigurationError("sweep loops need a torus model and an integer direction")
    rng = np.random.default_rng(0) if rng is None else rng
    t = np.arange(alpha.K) / alpha.K
    members = [alpha]
    for j in range(1, S):
        nodes = alpha.nodes + (j / S) * d
        if perturbation:
            w = np.zeros_like(nodes)
            for mode in (1, 2):
                w += np.outer(np.sin(2 * math.pi * mode * t), rng.normal(size=nodes.shape[1])) / mode
            nodes = nodes + perturbation * math.sin(math.pi * j / S) * w
        members.append(alpha.with_nodes(nodes))
    loop = PathLoop(tuple(members))
    loop.check_adjacency()
    return loop


# -------------------------------------------------------------------------- minimax descent


@dataclass(frozen=True)
class MinimaxConfig:
    max_sweeps: int = 400
    saddle_g_tol: float = 1e-6
    level_tol_rel: float = 1e-6
    S_max: int = 256
    max_step: float = 0.05
    stall_sweeps: int = 25
    stall_rel: float = 1e-10
    strict_margin_tol: float | None = None
    reparametrize: bool = True


@dataclass(frozen=True, eq=False)
class MinimaxResult:
    c: float
    loop: PathLoop
    level_set: tuple
    level_records: tuple
    margin: float
    base_energy: float
    trace: tuple
    strict_ok: bool | None = None
    ev_class: ClassLabel | None = None

    def to_dict(self):
        return {
            "c": self.c,
            "margin": self.margin,
            "base_energy": self.base_energy,
            "S": self.loop.S,
            "level_set": list(self.level_set),
            "level_records": [r.summary() for r in self.level_records],
            "strict_ok": self.strict_ok,
            "ev_class": None if self.ev_class is None else self.ev_class.to_list(),
            "trace": [list(t) for t in self.trace],
        }


def _refine_loop(members, model, r_inj, S_max):
    """Insert midpoint members wherever neighbours drifted too far apart."""
    out = [members[0]]
    changed = False
    for j in range(1, len(members) + 1):
        nxt = members[j % len(members)]
        prev = out[-1]
        gap = float(np.max(model.chart_gap(prev.nodes, nxt.nodes)))
        if gap >= 0.5 * r_inj:
            if len(members) + 1 > S_max:
                raise RefinementError(f"loop refinement exceeded S_max={S_max}")
            mid = model.geodesic_interp(prev.nodes, model.nearest_lift(prev.nodes, nxt.nodes), 0.5)
            out.append(prev.with_nodes(mid))
            changed = True
        if j < len(members):
            out.append(nxt)
    return out, changed


def _reparametrize(arrs, model):
    """Equal-spacing redistribution of members (base fixed); arrs include the lifted closing copy."""
    S = len(arrs) - 1
    seg = np.array([np.linalg.norm(arrs[j + 1] - arrs[j]) for j in range(S)])
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    if cum[-1] == 0:
        return [a.copy() for a in arrs[:-1]]
    targets = cum[-1] * np.arange(S) / S
    out = [arrs[0].copy()]
    for tgt in targets[1:]:
        k = int(np.searchsorted(cum, tgt, side="right") - 1)
        k = min(k, S - 1)
        w = (tgt - cum[k]) / seg[k] if seg[k] > 0 else 0.0
        out.append(model.project((1 - w) * arrs[k] + w * arrs[k + 1]))
    return out


def resolved_max(members, model):
    """Largest energy over members and the midpoints joining consecutive members.

    The discrete loop stands for the piecewise interpolated loop; midpoints
    make its maximum visible between members.
    """
    loop = PathLoop(tuple(members))
    arrs = _lifted_members(loop)
    best = max(discrete_energy(g) for g in members)
    for j in range(len(members)):
        if len(members) == 1:
            break
        mid = model.geodesic_interp(arrs[j], arrs[j + 1], 0.5)
        best = max(best, discrete_energy(members[0], mid))
    return float(best)


def _sweep(members, fac, model, step_cap):
    """One perpendicular descent step of every non-base member; returns (node arrays, perp norms)."""
    arrs = _lifted_members(PathLoop(tuple(members)))
    S = len(members)
    new_arrs = [arrs[0]]
    perp = np.zeros(S)
    for j in range(1, S):
        q = arrs[j]
        E, g, gt, _ = tangent_gradient(members[j], q)
        tang = (arrs[j + 1] - arrs[j - 1]).reshape(-1)
        tn = np.linalg.norm(tang)
        tang = tang / tn if tn > 0 else tang
        gf = g.reshape(-1)
        gperp = gf - (gf @ tang) * tang
        perp[j] = np.linalg.norm(gperp)
        d = -cho_solve(fac, gperp)
        d = d - (d @ tang) * tang
        slope = float(gf @ d)
        if slope >= 0 or not np.any(d):
            new_arrs.append(q)
            continue
        step = min(1.0, step_cap / float(np.max(np.abs(d))))
        accepted = None
        while step > 1e-12:
            trial = model.project(q + step * d.reshape(q.shape))
            try:
                Et = discrete_energy(members[j], trial)
            except OutOfInjectivityError:
                step *= 0.5
                continue
            if Et <= E + 1e-4 * step * slope:
                accepted = trial
                break
            step *= 0.5
        new_arrs.append(q if accepted is None else accepted)
    return new_arrs, perp


def minimax_descend(loop: PathLoop, config: MinimaxConfig = MinimaxConfig(),
                    descent: DescentConfig = DescentConfig()) -> MinimaxResult:
    """Lower the maximum energy of the loop by perpendicular descent and equal spacing.

    Every accepted sweep leaves the resolved loop maximum non-increasing;
    sweeps that would raise it are retried with half the step cap.
    """
    model = loop.model
    loop.check_adjacency()
    base = loop.base
    E_base = discrete_energy(base)
    ev0 = ev_label(loop) if loop.S > 1 else None
    fac = _h1_factor(base)
    members = list(loop.members)
    trace = []
    best_max = resolved_max(members, model)
    trace.append((0, best_max, 0.0, len(members)))
    stall = 0
    step_cap = config.max_step
    for sweep in range(1, config.max_sweeps + 1):
        if len(members) == 1:
            break
        new_arrs, perp = _sweep(members, fac, model, step_cap)
        S = len(members)
        if config.reparametrize:
            lifted = new_arrs + [model.nearest_lift(new_arrs[-1], members[0].nodes)]
            new_arrs = _reparametrize(lifted, model)
        candidate = [members[0]] + [members[j].with_nodes(new_arrs[j]) for j in range(1, S)]
        try:
            candidate, _ = _refine_loop(candidate, model, model.r_inj, config.S_max)
            cur_max = resolved_max(candidate, model)
        except OutOfInjectivityError:
            cur_max = math.inf
        if cur_max > best_max * (1 + 1e-13):
            step_cap *= 0.5
            if step_cap < 1e-9:
                break
            continue
        members = candidate
        energies = np.array([discrete_energy(g) for g in members])
        jmax = int(np.argmax(energies))
        trace.append((sweep, cur_max, float(perp.max()), len(members)))
        if best_max - cur_max <= config.stall_rel * max(abs(best_max), 1e-300):
            stall += 1
        else:
            stall = 0
        best_max = min(best_max, cur_max)
        step_cap = min(config.max_step, 1.5 * step_cap)
        top_perp = perp[jmax] if jmax < len(perp) else math.inf
        if top_perp < config.saddle_g_tol or stall >= config.stall_sweeps:
            break
    return _finish(PathLoop(tuple(members)), E_base, trace, config, descent, ev0)


def _finish(loop, E_base, trace, config, descent, ev0):
    """Polish the highest member onto the critical point it approximates and report the level set."""
    members = list(loop.members)
    energies = np.array([discrete_energy(g) for g in members])
    records = []
    if len(members) > 1:
        # polish every near-top local maximum: a loop may cross several saddles of one level
        S = len(members)
        top = float(np.max(energies))
        band = max(1e-3 * abs(top - E_base), 1e-12)
        peaks = [j for j in range(1, S) if energies[j] >= top - band
                 and energies[j] >= energies[j - 1] and energies[j] >= energies[(j + 1) % S]]
        polished = []
        for j in sorted(peaks, key=lambda j: -energies[j]):
            pol, gn, ok = newton_polish(members[j], descent, tol=min(config.saddle_g_tol, 1e-9))
            if not ok:
                continue
            prev = members[j]
            members[j] = pol
            try:
                PathLoop(tuple(members)).check_adjacency()
            except OutOfInjectivityError:
                members[j] = prev
                continue
            energies[j] = discrete_energy(pol)
            polished.append(j)
        if not polished:
            raise NonConvergenceError("could not polish the top member onto a critical point",
                                      {"peaks": peaks})
        trial = PathLoop(tuple(members))
        trial.check_adjacency()
        # the loop maximum must be one of the polished critical points
        jmax = int(np.argmax(energies))
        if jmax not in polished:
            raise NonConvergenceError("polished critical point is not the loop maximum",
                                      {"polished": [float(energies[j]) for j in polished],
                                       "max": float(np.max(energies))})
    c = float(np.max(energies))
    level_tol = config.level_tol_rel * max(abs(c), 1e-300)
    level = tuple(int(j) for j in np.flatnonzero(energies >= c - level_tol))
    for j in level:
        records.append(_record(members[j], descent))
    final = PathLoop(tuple(members))
    if ev0 is not None and ev_label(final) != ev0:
        raise InvariantViolation("loop class changed during minimax descent")
    for g in final.members:
        if g.label != final.base.label:
            raise InvariantViolation("member label changed")
    margin = c - E_base
    strict_ok = None if config.strict_margin_tol is None else bool(margin > config.strict_margin_tol)
    return MinimaxResult(c, final, level, tuple(records), margin, E_base, tuple(trace), strict_ok, ev0)


# -------------------------------------------------------------------------- nice loops


def _best_grid_shift(a: InvariantPath, b: InvariantPath):
    """Grid shift j minimizing the node distance between shift(a, j h) and b (modulo deck)."""
    model = a.model
    best, bj = math.inf, 0
    for j in range(-a.K, a.K + 1):
        seg = extended_nodes_from(a, j, a.K)
        d = float(np.max(model.chart_gap(seg, b.nodes)))
        if d < best:
            best, bj = d, j
    return bj, best


def nice_loop_normalize(result: MinimaxResult, level_tol=None, descent: DescentConfig = DescentConfig(),
                        saddle_g_tol=1e-6, orbit_tol=1e-3, max_push=200):
    """Leave the level set only at isolated polished critical points.

    (a) members at the level with non-negligible gradient are pushed below it;
    (b) runs of consecutive level members lying on one critical orbit are
        collapsed to a single member;
    (c) the shift offset accumulated over a collapsed run is compensated on the
        following members with grid-aligned shifts, then ramped back to zero.
    """
    c = result.c
    level_tol = 1e-6 * abs(c) if level_tol is None else level_tol
    loop = result.loop
    model = loop.model
    members = list(loop.members)
    ev0 = ev_label(loop) if loop.S > 1 else None
    label0 = loop.base.label
    fac = _h1_factor(loop.base)
    # (a) push down non-critical level members
    for j in range(1, len(members)):
        g = members[j]
        E = discrete_energy(g)
        if E < c - level_tol or grad_norm(g) < saddle_g_tol:
            continue
        for _ in range(max_push):
            E, gr, gt, _ = tangent_gradient(g)
            d = -cho_solve(fac, gr.reshape(-1)).reshape(gr.shape)
            step = min(1.0, 0.05 * model.r_inj / max(float(np.max(np.abs(d))), 1e-300))
            trial = g.with_nodes(model.project(g.nodes + step * d))
            g = trial
            if discrete_energy(g) < c - level_tol:
                break
        members[j] = g
    energies = np.array([discrete_energy(g) for g in members])
    on = energies >= c - level_tol
    # (b) maximal runs of consecutive level samples (not wrapping through the base)
    runs, j = [], 1
    while j < len(members):
        if on[j]:
            k = j
            while k + 1 < len(members) and on[k + 1]:
                k += 1
            runs.append((j, k))
            j = k + 1
        else:
            j += 1
    out = list(members)
    removed = set()
    offsets = {}
    for (a, b) in runs:
        if b == a:
            continue
        ref = members[a]
        shifts = [0]
        for k in range(a + 1, b + 1):
            if image_distance(ref, members[k]) > orbit_tol:
                raise RefinementError(f"level run {a}..{b} spans distinct critical orbits")
            jsh, dist = _best_grid_shift(ref, members[k])
            if dist > orbit_tol:
                raise RefinementError("level run members are not grid shifts of one orbit")
            shifts.append(jsh)
            removed.add(k)
        offsets[b] = shifts[-1]
    # (c) compensate: members after a collapsed run are shifted back by its offset,
    # which is then ramped down one grid step per member
    new_members = [out[0]]
    pending = 0
    last = out[0]
    for j in range(1, len(out)):
        if j in removed:
            pending += offsets.get(j, 0)
            continue
        g = last = out[j]
        if pending:
            g = shift(g, -pending * g.h)
            pending -= int(np.sign(pending))
        new_members.append(g)
    # finish the ramp with shifted copies of the last member before closing at the base
    while pending:
        new_members.append(shift(last, -pending * last.h))
        pending -= int(np.sign(pending))
    final = PathLoop(tuple(new_members))
    final.check_adjacency()
    energies = final.energies()
    level = tuple(int(j) for j in np.flatnonzero(energies >= c - level_tol))
    recs = []
    for j in level:
        pol, gn, ok = newton_polish(final.members[j], descent, tol=saddle_g_tol)
        if not ok:
            raise NonConvergenceError("level member does not polish to a critical point", {"member": j})
        recs.append(_record(pol, descent))
    off = energies[[j for j in range(len(energies)) if j not in level]]
    if off.size and np.max(off) >= c - level_tol:
        raise InvariantViolation("off-level member at the critical level")
    if ev0 is not None and ev_label(final) != ev0:
        raise InvariantViolation("normalization changed the loop class")
    if any(g.label != label0 for g in final.members):
        raise InvariantViolation("normalization changed a member label")
    return replace(result, loop=final, level_set=level, level_records=tuple(recs))


def perturb_loop(loop: PathLoop, amplitude, rng=None, modes=2):
    """Smooth perturbation of every non-base member, tapered to vanish at the base."""
    rng = np.random.default_rng(0) if rng is None else rng
    model = loop.model
    S = loop.S
    K = loop.base.K
    t = np.arange(K) / K
    out = [loop.base]
    for j in range(1, S):
        g = loop.members[j]
        w = np.zeros(g.nodes.shape)
        for mode in range(1, modes + 1):
            w += np.outer(np.sin(2 * math.pi * mode * t), rng.normal(size=g.nodes.shape[1])) / mode
        out.append(g.with_nodes(model.project(g.nodes + amplitude * math.sin(math.pi * j / S) * w)))
    res = PathLoop(tuple(out))
    res.check_adjacency()
    return res


# -------------------------------------------------------------------------- iterated paths of loops


def loop_of(gamma: InvariantPath, period=None) -> LoopPath:
    """The closed curve gamma restricted to one minimal period."""
    per = period_detect(gamma) if period is None else period
    if per is None or per.stationary:
        raise ConstructionError("a periodic non-stationary path is required")
    nodes = extended_nodes(gamma, per.nodes)
    return make_loop(gamma.model, nodes, per.deck, per.value)


def iterate_loop(loop: LoopPath, m: int) -> LoopPath:
    nodes = extended_nodes(loop, m * loop.K)
    k = tuple(m * v for v in loop.label.k)
    h = tuple(m * v for v in loop.label.h)
    return make_loop(loop.model, nodes, ClassLabel(k, h), m * loop.tau)


def _align(model, pts, target):
    """Apply the deck transformation moving pts[0] to the lift of it nearest to target."""
    from .geometry import sphere_blocks, torus_axes

    pts = np.array(pts, dtype=float)
    nl = model.nearest_lift(target, pts[0])
    ax = torus_axes(model)
    if ax:
        pts[:, ax] += np.round(nl[ax] - pts[0, ax])
    for sl in sphere_blocks(model):
        if np.dot(nl[sl], pts[0, sl]) < 0:
            pts[:, sl] *= -1.0
    return pts


class _PsiFamily:
    """Continuous path sigma -> Psi(sigma) of loops, interpolated between members."""

    def __init__(self, members):
        self.members = list(members)
        self.model = self.members[0].model
        arrs = [np.array(self.members[0].nodes)]
        for g in self.members[1:]:
            arrs.append(self.model.nearest_lift(arrs[-1], g.nodes))
        self.arrs = arrs
        self.grid = np.linspace(0.0, 1.0, len(self.members))
        # cumulative base-point arclength on a fine sigma grid
        self._fine = np.linspace(0.0, 1.0, 64 * max(len(self.members) - 1, 1) + 1)
        track = self.base_track(self._fine)
        steps = np.linalg.norm(np.diff(track, axis=0), axis=1)
        self._arc = np.concatenate([[0.0], np.cumsum(steps)])

    def arc(self, sigma):
        return np.interp(sigma, self._fine, self._arc)

    def sigma_at_arc(self, a, b, frac):
        """sigma values moving from a to b at constant base-point speed."""
        la, lb = self.arc(a), self.arc(b)
        target = la + (lb - la) * np.asarray(frac)
        # _arc is nondecreasing; inverse by interpolation on its strictly increasing part
        keep = np.concatenate([[True], np.diff(self._arc) > 0])
        return np.interp(target, self._arc[keep], self._fine[keep])

    def _locate(self, sigma):
        n = len(self.arrs) - 1
        if n == 0:
            return 0, 0.0
        u = min(max(sigma, 0.0), 1.0) * n
        j = min(int(math.floor(u)), n - 1)
        w = u - j
        if abs(w) < 1e-12:
            w = 0.0
        if abs(w - 1.0) < 1e-12:
            j, w = j + 1, 0.0
            if j == n:
                j, w = n - 1, 1.0
        return j, w

    def member(self, sigma) -> LoopPath:
        j, w = self._locate(sigma)
        if w == 0.0:
            nodes = self.arrs[j]
        elif w == 1.0:
            nodes = self.arrs[j + 1]
        else:
            nodes = self.model.geodesic_interp(self.arrs[j], self.arrs[j + 1], w)
        return self.members[0].with_nodes(nodes)

    def base_track(self, sigmas):
        out = np.empty((len(sigmas), self.model.coord_dim))
        for i, s in enumerate(sigmas):
            j, w = self._locate(s)
            if w == 0.0:
                out[i] = self.arrs[j][0]
            elif w == 1.0:
                out[i] = self.arrs[j + 1][0]
            else:
                out[i] = self.model.geodesic_interp(self.arrs[j][0], self.arrs[j + 1][0], w)
        return out


def _stage_pieces(kind, m, x, p, fam=None):
    """Pieces (type, duration, data) of the concatenated loop at one parameter value.

    prologue(u):  [b: u->0] Psi(0)^m [b: 0->u]
    stage j(sig): Psi(1)^j [b: 1->sig] Psi(sig) [b: sig->0] Psi(0)^(m-1-j) [b: 0->1]
    epilogue(u):  Psi(1)^m [b: 1->u] [b: u->1]
    """
    pieces = []

    total = fam.arc(1.0) if fam is not None else 1.0

    def conn(a, b):
        if a == b or total <= 0.0:
            return
        dur = p * abs(b - a) if fam is None else p * abs(fam.arc(b) - fam.arc(a)) / total
        if dur > 1e-14 * p:
            pieces.append(("conn", dur, (a, b)))

    def copies(sig, n):
        for _ in range(n):
            pieces.append(("copy", p, sig))

    if kind == "prologue":
        conn(x, 0.0)
        copies(0.0, m)
        conn(0.0, x)
    elif kind == "epilogue":
        copies(1.0, m)
        conn(1.0, x)
        conn(x, 1.0)
    else:
        j = kind
        copies(1.0, j)
        conn(1.0, x)
        copies(x, 1)
        conn(x, 0.0)
        copies(0.0, m - 1 - j)
        conn(0.0, 1.0)
    return pieces


def _assemble(fam: _PsiFamily, pieces, m):
    """Resample the concatenation at m K uniform times; returns a LoopPath on [0, m p)."""
    model = fam.model
    proto = fam.members[0]
    K, p = proto.K, proto.tau
    total = sum(d for _, d, _ in pieces)
    Kt = m * K
    times = total * np.arange(Kt) / Kt
    out = np.empty((Kt, model.coord_dim))
    end = fam.base_track([pieces[0][2][0] if pieces[0][0] == "conn" else pieces[0][2]])[0]
    start_pt = None
    t0 = 0.0
    for idx, (typ, dur, data) in enumerate(pieces):
        lo = t0
        hi = t0 + dur
        sel = np.flatnonzero((times >= lo - 1e-12) & (times < hi - 1e-12)) if idx < len(pieces) - 1 \
            else np.flatnonzero(times >= lo - 1e-12)
        loc = np.clip(times[sel] - lo, 0.0, dur)
        if typ == "copy":
            loopm = fam.member(data)
            pts = path_point(loopm, np.concatenate([[0.0], loc, [dur]]))
        else:
            a, b = data
            sig = fam.sigma_at_arc(a, b, np.concatenate([[0.0], loc, [dur]]) / dur)
            pts = fam.base_track(sig)
        pts = _align(model, pts, end)
        if start_pt is None:
            start_pt = pts[0]
        out[sel] = pts[1:-1]
        end = pts[-1]
        t0 = hi
    k = tuple(m * v for v in proto.label.k)
    h = tuple(m * v for v in proto.label.h)
    res = make_loop(model, out, ClassLabel(k, h), m * p)
    if np.max(np.abs(res.closure_node() - end)) > 1e-9:
        raise ConstructionError("concatenated loop does not close up in its class")
    return res


@dataclass(frozen=True, eq=False)
class BangertPath:
    m: int
    loops: tuple
    sigma: np.ndarray
    stages: tuple
    energies: np.ndarray
    endpoint_energy: float

    @property
    def max_energy(self):
        return float(np.max(self.energies))

    @property
    def excess(self):
        return self.max_energy - self.endpoint_energy


def bangert_iterate_path(psi, m: int, samples=None) -> BangertPath:
    """Energy-controlled homotopy of the m-fold iterated path of loops.

    The m copies of the loop are moved along psi one at a time while the
    others wait at an endpoint; connecting arcs along the base-point track
    of psi join the copies.  Endpoints are the m-fold iterates of psi's
    endpoints, and Theta_m(s)(0) = psi(sigma_m(s))(0).
    """
    psi = list(psi)
    if m < 1:
        raise ConfigurationError("m must be >= 1")
    if not all(isinstance(g, LoopPath) or g.isometry.is_identity for g in psi):
        raise ConfigurationError("psi must consist of free loops")
    fam = _PsiFamily(psi)
    E_end = max(average_energy(psi[0]), average_energy(psi[-1]))
    grid = fam.grid if samples is None else np.linspace(0.0, 1.0, samples)
    if m == 1:
        loops = tuple(fam.member(s) for s in grid)
        en = np.array([average_energy(g) for g in loops])
        return BangertPath(1, loops, np.array(grid), tuple(("psi", float(s)) for s in grid), en, E_end)
    p = psi[0].tau
    loops, sig, stages = [], [], []
    plan = [("prologue", u) for u in grid]
    for j in range(m):
        plan += [(j, x) for x in grid[1:]]
    plan += [("epilogue", u) for u in grid[1:]]
    for kind, x in plan:
        loops.append(_assemble(fam, _stage_pieces(kind, m, float(x), p, fam), m))
        sig.append(float(x) if kind == "prologue" else 1.0)
        stages.append((kind, float(x)))
    en = np.array([average_energy(g) for g in loops])
    return BangertPath(m, tuple(loops), np.array(sig), tuple(stages), en, E_end)


@dataclass(frozen=True, eq=False)
class GluedPath:
    paths: tuple
    energies: np.ndarray
    bounds: np.ndarray
    bound_ok: bool
    max_energy: float
    below_level: bool | None
    m0: int


def glue_invariant_path(theta: BangertPath, psi_inv, sigma, m: int, p: int, p_i: int, level=None) -> GluedPath:
    """Join Theta_{m0}(s) on [0, m0 p_i] with Psi(sigma(s)) on [m0 p_i, m p + 1].

    psi_inv: invariant paths (unit shift) whose p_i-loops formed the input of
    the iterated homotopy, in the same order.
    """
    m0 = theta.m
    if not (m0 * p_i < m * p + 1 <= (m0 + 1) * p_i):
        raise ConfigurationError("m0 must be the largest integer with m0 p_i < m p + 1")
    fam_inv = _PsiFamily(list(psi_inv))
    proto = psi_inv[0]
    N = proto.K / proto.tau
    K_head = theta.loops[0].K
    K_tot = int(round(N * (m * p + 1)))
    paths, energies, bounds = [], [], []
    model = proto.model
    for loop_s, s_sig in zip(theta.loops, sigma):
        g = fam_inv.member(s_sig)
        head = loop_s.nodes
        t_tail = np.arange(K_head, K_tot) / N
        tail = path_point(g, t_tail)
        # the tail must continue the head across the junction
        junction_head = loop_s.closure_node()
        junction_tail = path_point(g, [K_head / N])[0]
        tail_al = _align(model, np.vstack([junction_tail, tail]), junction_head)
        if np.max(np.abs(tail_al[0] - junction_head)) > 1e-9:
            raise ConstructionError("junction mismatch: sigma is inconsistent with the iterated path")
        nodes = np.vstack([head, tail_al[1:]])
        # closure: the glued curve at time m p + 1 must be I of its start
        end = _align(model, path_point(g, [0.0, m * p + 1.0]), nodes[0])[1]
        tmp = InvariantPath(model, proto.isometry, float(m * p + 1), nodes, proto.label)
        k, hh = model.deck_between(tmp.closure_node(), end)
        lab = tmp.label.compose(ClassLabel(k, hh))
        glued = InvariantPath(model, proto.isometry, float(m * p + 1), nodes, lab)
        if np.max(np.abs(glued.closure_node() - end)) > 1e-9:
            raise ConstructionError("glued path violates the invariance closure")
        paths.append(glued)
        energies.append(average_energy(glued))
        loop_g = loop_of(g)
        bounds.append((m0 * p_i * average_energy(loop_s) + p_i * average_energy(loop_g)) / (m * p + 1))
    energies = np.array(energies)
    bounds = np.array(bounds)
    mx = float(np.max(energies))
    return GluedPath(tuple(paths), energies, bounds, bool(np.all(energies <= bounds * (1 + 1e-9) + 1e-12)), mx,
                     None if level is None else bool(mx < level), m0)


# -------------------------------------------------------------------------- excess study


def sweep_to_minima(record: CriticalRecord, direction, members=9, search=0.5):
    """Path of invariant translates of gamma from the energy minimum on one side to the other."""
    gamma = record.path
    d = np.asarray(direction, dtype=float)

    def E(y):
        return discrete_energy(gamma.with_nodes(gamma.nodes + y * d))

    lo = minimize_scalar(E, bounds=(-search, 0.0), method="bounded", options={"xatol": 1e-10})
    hi = minimize_scalar(E, bounds=(0.0, search), method="bounded", options={"xatol": 1e-10})
    E0 = discrete_energy(gamma)
    if not (lo.fun < E0 - 1e-8 and hi.fun < E0 - 1e-8):
        raise StudyInapplicableError("no lower-energy endpoints on either side of the critical path")
    ys = np.concatenate([np.linspace(lo.x, 0.0, members // 2 + 1), np.linspace(0.0, hi.x, members // 2 + 1)[1:]])
    return [gamma.with_nodes(gamma.nodes + y * d) for y in ys], ys


@dataclass
class ExcessStudy:
    rows: list
    sup_m_excess: float
    trend_tau: float
    trend_pvalue: float
    increasing_trend: bool
    period: float
    level: float = float("nan")

    @property
    def threshold_m(self):
        """Smallest tabulated m from which every glued path stays below the level."""
        best = None
        for r in reversed(self.rows):
            if not r.get("glued_below_level"):
                break
            best = r["m"]
        return best

    def to_dict(self):
        return {"rows": self.rows, "level": self.level, "threshold_m": self.threshold_m, "sup_m_excess": self.sup_m_excess, "trend_tau": self.trend_tau,
                "trend_pvalue": self.trend_pvalue, "increasing_trend": self.increasing_trend,
                "period": self.period}


def bangert_excess_study(record: CriticalRecord, m_range=(2, 4, 8, 16, 32), direction=None, members=9,
                         alpha=0.05, glue=True) -> ExcessStudy:
    """Tabulate the excess of the iterated homotopy over its endpoint level for each m."""
    gamma = record.path
    per = period_detect(gamma)
    if per is None or per.stationary:
        raise StudyInapplicableError("the critical path must be periodic")
    model = gamma.model
    if direction is None:
        # sweep across the torus direction not travelled by the geodesic
        v = gamma.closure_node() - gamma.nodes[0]
        axes = np.argsort(np.abs(v[: model.n_torus]))
        direction = np.zeros(model.coord_dim)
        direction[axes[0]] = 1.0
    psi_inv, _ = sweep_to_minima(record, direction, members)
    psi = [loop_of(g, per) for g in psi_inv]
    p_i = per.value
    level = average_energy(gamma)
    rows = []
    for m in m_range:
        th = bangert_iterate_path(psi, m)
        row = {"m": int(m), "max_energy": th.max_energy, "endpoint_energy": th.endpoint_energy,
               "excess": th.excess, "m_excess": m * th.excess}
        if glue:
            gl = glue_invariant_path(th, psi_inv, th.sigma, int(m), p_i, p_i, level=level)
            row.update(glued_max=gl.max_energy, glued_bound_ok=gl.bound_ok, glued_below_level=gl.below_level)
        rows.append(row)
    ms = np.array([r["m"] for r in rows], dtype=float)
    me = np.array([r["m_excess"] for r in rows])
    if len(ms) >= 3:
        res = kendalltau(ms, me, alternative="greater")
        tau_stat, pval = float(res.statistic), float(res.pvalue)
    else:
        tau_stat, pval = 0.0, 1.0
    return ExcessStudy(rows, float(np.max(me)), tau_stat, pval, bool(pval < alpha), float(p_i), level)
