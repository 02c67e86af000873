"""Model and isometry construction from plain dicts, plus the shipped catalog."""

from __future__ import annotations

import math

from .errors import ConfigurationError
from .geometry import FlatTorus, Product, RoundRP2, WarpedTorus
from .isometry import identity, product, rotation_map, rp2_rotation, torus_affine, translation

MODEL_KINDS = ("flat-torus", "warped-torus", "round-rp2", "product")
ISOMETRY_KINDS = ("identity", "translation", "torus-affine", "quarter-turn", "rp2-rotation", "product")


def build_model(d: dict):
    kind = d.get("kind")
    if kind == "flat-torus":
        return FlatTorus(int(d.get("dimension", 2)))
    if kind == "warped-torus":
        w = d.get("warp", {})
        return WarpedTorus(int(d.get("dimension", 2)), w.get("family", "cos"), float(w.get("amplitude", 0.3)),
                           int(w.get("axis", 1)), d.get("r_inj"))
    if kind == "round-rp2":
        return RoundRP2()
    if kind == "product":
        return Product(*[build_model(f) for f in d["factors"]])
    raise ConfigurationError(f"unknown model kind {kind!r}")


def _factor_isometry(f, d):
    kind = d.get("kind")
    if kind == "identity":
        return identity(f)
    if kind == "translation":
        return translation(f, d["v"])
    if kind == "torus-affine":
        return torus_affine(f, d["A"], d["b"])
    if kind == "quarter-turn":
        return rotation_map(f)
    if kind == "rp2-rotation":
        if f.kind != "round-rp2":
            raise ConfigurationError("rp2-rotation needs a round RP2 factor")
        return rp2_rotation(d.get("axis", [0.0, 0.0, 1.0]), float(d.get("angle", math.pi)))
    raise ConfigurationError(f"unknown isometry kind {kind!r}")


def build_isometry(model, d: dict):
    kind = d.get("kind")
    factors = model.factors
    if kind == "product":
        if len(d["factors"]) != len(factors):
            raise ConfigurationError("one factor map per model factor is required")
        return product(model, [_factor_isometry(f, fd) for f, fd in zip(factors, d["factors"])])
    if kind in ("identity", "translation"):
        return identity(model) if kind == "identity" else translation(model, d["v"])
    if len(factors) != 1:
        raise ConfigurationError(f"{kind!r} needs a single-factor model; use kind 'product'")
    I = _factor_isometry(model, d)
    if kind == "rp2-rotation":
        I = product(model, [I])
    return I


# name -> (model dict, isometry dict, default class label)
CATALOG = {
    "flat-t2": ({"kind": "flat-torus", "dimension": 2},
                {"kind": "translation", "v": [0.3, 0.1]}, [[0, 0], []]),
    "flat-t2-identity": ({"kind": "flat-torus", "dimension": 2},
                         {"kind": "identity"}, [[1, 0], []]),
    "quarter-turn": ({"kind": "flat-torus", "dimension": 2},
                     {"kind": "quarter-turn"}, [[0, 0], []]),
    "warped-cos": ({"kind": "warped-torus", "dimension": 2,
                    "warp": {"family": "cos", "amplitude": 0.3, "axis": 1}},
                   {"kind": "translation", "v": [0.3, 0.0]}, [[1, 0], []]),
    "two-well": ({"kind": "warped-torus", "dimension": 2,
                  "warp": {"family": "two-well", "amplitude": 0.25, "axis": 1}},
                 {"kind": "translation", "v": [0.5, 0.0]}, [[0, 0], []]),
    "s1xrp2": ({"kind": "product", "factors": [{"kind": "flat-torus", "dimension": 1}, {"kind": "round-rp2"}]},
               {"kind": "product", "factors": [{"kind": "translation", "v": [0.3]},
                                               {"kind": "rp2-rotation", "axis": [0.0, 0.0, 1.0],
                                                "angle": math.pi}]},
               [[1], [0]]),
}


def catalog_entry(name: str):
    """(model, isometry, label list) for a catalog name."""
    if name not in CATALOG:
        raise ConfigurationError(f"unknown catalog entry {name!r}; known: {sorted(CATALOG)}")
    md, idict, lab = CATALOG[name]
    model = build_model(md)
    return model, build_isometry(model, idict), lab


def catalog_names():
    return list(CATALOG)
