"""Shooting-method reference energies for invariant geodesics on warped tori.

Independent of the broken-geodesic discretization: for a translation isometry
x -> x + a on a torus whose metric depends on one coordinate only, the class
(k) minimizer is the shortest geodesic from (x0, y) to (x0, y) + a + k over all
starting heights y, which is found by an outer scalar minimization over y of
the two-point boundary-value energy.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import ConfigurationError, OutOfInjectivityError
from .geometry import TorusModel, shoot_boundary_value


def _bvp_energy(model, start, offset, v_guess, steps):
    v, e = shoot_boundary_value(model, start, start + offset, v_guess, 1.0, steps)
    return e, v


def shooting_class_energy(model: TorusModel, translation, k, grid=12, steps=None, xatol=1e-10):
    """Minimal energy of an invariant geodesic in class k by shooting.

    Returns (energy, start point, initial velocity).
    """
    if not isinstance(model, TorusModel) or model.warp is None:
        raise ConfigurationError("shooting oracle needs a warped torus")
    offset = np.asarray(translation, dtype=float) + np.asarray(k, dtype=float)
    axis = model.warp.axis
    d = model.dimension
    steps = steps or max(64, int(80 * np.linalg.norm(offset)) + 1)

    cache = {}

    def E(y):
        start = np.zeros(d)
        start[axis] = y
        try:
            e, v = _bvp_energy(model, start, offset, offset, steps)
        except OutOfInjectivityError:
            return 1e300
        cache[float(y)] = (e, start, v)
        return e

    ys = np.arange(grid) / grid
    vals = np.array([E(y) for y in ys])
    if not (vals < 1e300).any():
        raise OutOfInjectivityError("shooting failed at every starting height")
    j = int(np.nanargmin(vals))
    lo, hi = ys[j] - 1.0 / grid, ys[j] + 1.0 / grid
    res = minimize_scalar(E, bounds=(lo, hi), method="bounded", options={"xatol": xatol})
    e = float(res.fun)
    if e > vals[j]:
        return float(vals[j]), *cache[float(ys[j])][1:]
    return (e, *cache[float(res.x)][1:])
