"""Config-driven experiment runner.

    python -m invgeo run config.json [--set task.m_max=6 ...]
    python -m invgeo validate config.json
    python -m invgeo schema

Exit codes: 0 success, 2 configuration error, 3 numerical nonconvergence,
4 a task assertion failed.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import jsonschema
import numpy as np

from . import serialize
from .catalog import CATALOG, ISOMETRY_KINDS, MODEL_KINDS, build_isometry, build_model
from .errors import ConfigurationError, InvgeoError, NonConvergenceError
from .solver import DescentConfig

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_ASSERTION = 0, 2, 3, 4

TASKS = ("check-isometry", "minimize", "census", "minimax", "index-growth", "bangert-bound", "oracle-shoot",
         "property-suite")

_num_array = {"type": "array", "items": {"type": "number"}}
_label = {"type": "array", "minItems": 2, "maxItems": 2,
          "items": {"type": "array", "items": {"type": "integer"}}}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "invgeo experiment config",
    "type": "object",
    "additionalProperties": False,
    "required": ["task"],
    "properties": {
        "catalog": {"enum": sorted(CATALOG)},
        "model": {"$ref": "#/$defs/model"},
        "isometry": {"$ref": "#/$defs/isometry"},
        "task": {"$ref": "#/$defs/task"},
        "numerics": {"$ref": "#/$defs/numerics"},
        "rng_seed": {"type": "integer", "minimum": 0},
        "output_dir": {"type": "string"},
    },
    "$defs": {
        "model": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": list(MODEL_KINDS)},
                "dimension": {"type": "integer", "minimum": 1},
                "r_inj": {"type": "number", "exclusiveMinimum": 0},
                "warp": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "family": {"enum": ["cos", "two-well", "cos-xy"]},
                        "amplitude": {"type": "number"},
                        "axis": {"type": "integer", "minimum": 0},
                    },
                },
                "factors": {"type": "array", "items": {"$ref": "#/$defs/model"}},
            },
        },
        "isometry": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": list(ISOMETRY_KINDS)},
                "v": _num_array,
                "A": {"type": "array", "items": _num_array},
                "b": _num_array,
                "axis": _num_array,
                "angle": {"type": "number"},
                "factors": {"type": "array", "items": {"$ref": "#/$defs/isometry"}},
            },
        },
        "numerics": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "max_iters": {"type": "integer", "minimum": 1},
                "g_tol": {"type": "number", "exclusiveMinimum": 0},
                "newton_switch": {"type": "number", "exclusiveMinimum": 0},
                "newton_tol": {"type": "number", "exclusiveMinimum": 0},
                "max_newton": {"type": "integer", "minimum": 1},
                "ladder": {"type": "array", "items": {"type": "integer", "minimum": 4}},
                "N": {"type": "integer", "minimum": 4},
                "seed_count": {"type": "integer", "minimum": 1},
                "perturbation": {"type": "number", "minimum": 0},
                "lambda_rel": {"type": "number", "exclusiveMinimum": 0},
                "dedup_tol": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "task": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": list(TASKS)},
                "label": _label,
                "labels": {"type": "array", "items": _label},
                "label_box": {"type": "integer", "minimum": 0},
                "base": _num_array,
                "direction": _num_array,
                "axis": _num_array,
                "setup": {"enum": ["sweep", "rp2-generator"]},
                "S": {"type": "integer", "minimum": 4},
                "perturbation": {"type": "number", "minimum": 0},
                "strict_margin": {"type": ["number", "null"]},
                "sample_count": {"type": "integer", "minimum": 100},
                "tol": {"type": "number", "exclusiveMinimum": 0},
                "rel_tol": {"type": "number", "exclusiveMinimum": 0},
                "N": {"type": "integer", "minimum": 4},
                "m_min": {"type": "integer", "minimum": 0},
                "m_max": {"type": "integer", "minimum": 0},
                "m_range": {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1},
                "members": {"type": "integer", "minimum": 3},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "entries": {"type": "array", "items": {"enum": sorted(CATALOG)}},
                "gradient_count": {"type": "integer", "minimum": 1},
                "hessian_count": {"type": "integer", "minimum": 1},
            },
        },
    },
}

# per-task parameters and their defaults; None means "derived from the model/catalog"
TASK_DEFAULTS = {
    "check-isometry": {"sample_count": 200, "tol": 1e-8},
    "minimize": {"labels": None},
    "census": {"labels": None, "label_box": 2},
    "minimax": {"setup": "sweep", "label": None, "base": None, "direction": [0.0, 1.0], "axis": [0.0, 0.0, 1.0],
                "S": 32, "perturbation": 0.05, "strict_margin": None},
    "index-growth": {"label": None, "base": None, "N": 16, "m_min": 0, "m_max": 8},
    "bangert-bound": {"label": None, "base": None, "N": 16, "direction": None, "m_range": [2, 4, 8, 16, 32],
                      "members": 9, "alpha": 0.05},
    "oracle-shoot": {"labels": None, "N": 128, "rel_tol": 1e-4},
    "property-suite": {"entries": None, "gradient_count": 100, "hessian_count": 20},
}

NUMERIC_KEYS = ("max_iters", "g_tol", "newton_switch", "newton_tol", "max_newton", "ladder", "N", "seed_count",
                "perturbation", "lambda_rel", "dedup_tol")


# -------------------------------------------------------------------------- config


def _all_labels(model, box):
    import itertools

    ks = itertools.product(range(-box, box + 1), repeat=model.n_torus)
    hs = list(itertools.product((0, 1), repeat=model.n_sphere))
    return [[list(k), list(h)] for k in ks for h in hs]


def effective_config(raw: dict) -> dict:
    """Validate against the schema and materialize every default."""
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"config invalid at {path}: {exc.message}") from None
    cfg = copy.deepcopy(raw)
    kind = cfg["task"]["kind"]
    extra = set(cfg["task"]) - set(TASK_DEFAULTS[kind]) - {"kind"}
    if extra:
        raise ConfigurationError(f"task {kind!r} does not take {sorted(extra)}")
    cat_label = None
    if "catalog" in cfg:
        md, idict, cat_label = CATALOG[cfg["catalog"]]
        cfg.setdefault("model", copy.deepcopy(md))
        cfg.setdefault("isometry", copy.deepcopy(idict))
    if kind != "property-suite" and ("model" not in cfg or "isometry" not in cfg):
        raise ConfigurationError("model and isometry blocks (or a catalog name) are required")
    task = {"kind": kind}
    for k, v in TASK_DEFAULTS[kind].items():
        task[k] = copy.deepcopy(cfg["task"].get(k, v))
    if kind != "property-suite":
        model = build_model(cfg["model"])
        build_isometry(model, cfg["isometry"])
        zero = [[0] * model.n_torus, [0] * model.n_sphere]
        default_label = cat_label or zero
        if "label" in task and task["label"] is None:
            task["label"] = copy.deepcopy(default_label)
        if "labels" in task and task["labels"] is None:
            task["labels"] = _all_labels(model, task["label_box"]) if kind == "census" else [default_label]
    elif task["entries"] is None:
        task["entries"] = sorted(CATALOG)
    cfg["task"] = task
    dc = DescentConfig()
    num = {k: getattr(dc, k) for k in NUMERIC_KEYS}
    num.update(cfg.get("numerics", {}))
    num["ladder"] = list(num["ladder"])
    cfg["numerics"] = num
    cfg.setdefault("rng_seed", 0)
    cfg.setdefault("output_dir", "out")
    return cfg


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not of the form path=value")
        path, value = item.split("=", 1)
        try:
            value = json.loads(value)
        except json.JSONDecodeError:
            pass
        keys = path.split(".")
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override path {path!r} crosses a non-object")
        node[keys[-1]] = value
    return cfg


def descent_config(cfg) -> DescentConfig:
    num = dict(cfg["numerics"])
    num["ladder"] = tuple(num["ladder"])
    return DescentConfig(rng_seed=cfg["rng_seed"], **num)


# -------------------------------------------------------------------------- tasks


def _seed_record(model, I, task, dc):
    """Polish a straight seed through task.base, or minimize in the class when no base is given."""
    from .pathspace import straight_path
    from .solver import _record, minimize_in_class, newton_polish

    N = task.get("N", dc.N)
    if task.get("base") is None:
        return minimize_in_class(model, I, task["label"], dc, N=N), "class-minimum"
    g = straight_path(model, I, task["label"], N, base=np.asarray(task["base"], dtype=float))
    g, gn, ok = newton_polish(g, dc)
    if not ok:
        raise NonConvergenceError("Newton polish from the given base did not converge", {"grad_norm": gn})
    return _record(g, dc), "polished-seed"


def task_check_isometry(model, I, task, dc, seed):
    from .isometry import check_isometry

    rep = check_isometry(I, model, task["sample_count"], task["tol"], np.random.default_rng(seed),
                         raise_on_fail=False)
    res = {"max_metric_defect": rep.max_metric_defect, "sample_count": rep.sample_count, "passed": rep.passed,
           "worst_point": None if rep.worst_point is None else np.asarray(rep.worst_point).tolist()}
    return res, [res], {"isometry": rep.passed}


def task_minimize(model, I, task, dc, seed):
    from .solver import minimize_in_class

    recs = [minimize_in_class(model, I, lab, dc) for lab in task["labels"]]
    rows = [_row(r) for r in recs]
    return {"records": [r.summary() for r in recs]}, rows, {"converged": all(not r.first_order_only for r in recs)}


def _row(rec):
    return {"label": str(rec.label), "energy": rec.energy, "grad_norm": rec.grad_norm, "index": rec.index,
            "nullity": rec.nullity, "stationary": rec.stationary,
            "period": None if rec.period is None else rec.period.value}


def task_census(model, I, task, dc, seed):
    from .solver import census, default_workers

    res = census(model, I, task["labels"], dc, workers=default_workers())
    rows = []
    for rec, gid in res.records:
        row = _row(rec)
        row["group"] = gid
        rows.append(row)
    out = {"records": [dict(r.summary(), group=g) for r, g in res.records], "warnings": res.warnings,
           "groups": res.groups, "witnesses": res.witnesses, "distinct_count": res.distinct_count,
           "relation_symmetric": res.relation_symmetric, "relation_transitive": res.relation_transitive}
    checks = {"relation_symmetric": res.relation_symmetric, "relation_transitive": res.relation_transitive,
              "witnesses_consistent": all(w["consistent"] for w in res.witnesses)}
    return out, rows, checks


def task_minimax(model, I, task, dc, seed):
    from .minimax import MinimaxConfig, construct_class_loop, minimax_descend, rp2_generator, sweep_loop
    from .pathspace import straight_path
    from .solver import minimize_in_class

    N = dc.N
    if task["setup"] == "rp2-generator":
        axis = np.asarray(task["axis"], dtype=float)
        base = task["base"] if task["base"] is not None else [0.1] * model.n_torus + list(axis)
        seeds = [straight_path(model, I, task["label"], N, base=np.asarray(base, dtype=float))]
        alpha = minimize_in_class(model, I, task["label"], dc, seeds=seeds)
        loop = construct_class_loop(alpha.path, rp2_generator(axis, task["S"]), S=task["S"])
    else:
        seeds = None if task["base"] is None else \
            [straight_path(model, I, task["label"], N, base=np.asarray(task["base"], dtype=float))]
        alpha = minimize_in_class(model, I, task["label"], dc, seeds=seeds)
        loop = sweep_loop(alpha.path, task["direction"], task["S"], task["perturbation"],
                          np.random.default_rng(seed))
    res = minimax_descend(loop, MinimaxConfig(strict_margin_tol=task["strict_margin"]), dc)
    out = res.to_dict()
    out["alpha"] = alpha.summary()
    rows = [{"sample": j, "energy": e} for j, e in enumerate(res.loop.energies())]
    checks = {"level_critical": all(r.grad_norm <= MinimaxConfig().saddle_g_tol for r in res.level_records)}
    if task["strict_margin"] is not None:
        checks["strict_margin"] = bool(res.strict_ok)
    return out, rows, checks


def task_index_growth(model, I, task, dc, seed):
    from .solver import index_growth

    rec, source = _seed_record(model, I, task, dc)
    ig = index_growth(rec, task["m_max"], dc, m_min=task["m_min"])
    out = ig.to_dict()
    out.update(seed_source=source, record=rec.summary())
    return out, ig.entries, {"dichotomy": ig.dichotomy_ok, "nondecreasing": ig.nondecreasing}


def task_bangert(model, I, task, dc, seed):
    from .minimax import bangert_excess_study

    rec, source = _seed_record(model, I, task, dc)
    st = bangert_excess_study(rec, task["m_range"], task["direction"], task["members"], task["alpha"])
    out = st.to_dict()
    out.update(seed_source=source, record=rec.summary())
    rows = st.rows
    checks = {"no_increasing_trend": not st.increasing_trend,
              "excess_decreases": rows[-1]["excess"] < rows[0]["excess"] if len(rows) > 1 else True,
              "glue_bound": all(r.get("glued_bound_ok", True) for r in rows)}
    return out, rows, checks


def task_oracle(model, I, task, dc, seed):
    from .oracle import shooting_class_energy
    from .solver import minimize_in_class

    if I.kind != "translation":
        raise ConfigurationError("the shooting oracle needs a translation isometry")
    rows = []
    for lab in task["labels"]:
        e_or, start, v = shooting_class_energy(model, I.c, lab[0])
        rec = minimize_in_class(model, I, lab, dc, N=task["N"])
        rows.append({"label": str(rec.label), "oracle_energy": e_or, "solver_energy": rec.energy,
                     "rel_diff": abs(rec.energy - e_or) / e_or})
    return {"rows": rows}, rows, {"oracle_agreement": all(r["rel_diff"] <= task["rel_tol"] for r in rows)}


def task_property_suite(model, I, task, dc, seed):
    from .properties import run_property_suite, suite_ok

    res = run_property_suite(task["entries"], seed, task["gradient_count"], task["hessian_count"])
    rows = [{"entry": n, "check": c, "ok": v["ok"], "worst": v["worst"]} for n, cs in res.items()
            for c, v in cs.items()]
    return res, rows, {"all_properties": suite_ok(res)}


RUNNERS = {
    "check-isometry": task_check_isometry,
    "minimize": task_minimize,
    "census": task_census,
    "minimax": task_minimax,
    "index-growth": task_index_growth,
    "bangert-bound": task_bangert,
    "oracle-shoot": task_oracle,
    "property-suite": task_property_suite,
}


# -------------------------------------------------------------------------- outputs


def _csv_text(rows) -> str:
    buf = io.StringIO()
    if rows:
        cols = []
        for r in rows:
            cols += [k for k in r if k not in cols]
        w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("%.17g" % v if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()


def _version():
    try:
        from importlib.metadata import version

        return version("artifact")
    except Exception:
        return "unknown"


def run(cfg: dict, out_dir=None):
    """Execute one task; returns (exit code, manifest dict)."""
    started = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    kind = cfg["task"]["kind"]
    dc = descent_config(cfg)
    model = I = None
    if kind != "property-suite":
        model = build_model(cfg["model"])
        I = build_isometry(model, cfg["isometry"])
    result, rows, checks = RUNNERS[kind](model, I, cfg["task"], dc, cfg["rng_seed"])
    checks = {k: bool(v) for k, v in checks.items()}
    out = Path(out_dir or cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    payload = serialize.dumps({"config": cfg, "task": kind, "result": result, "assertions": checks})
    files = {"result.json": payload + "\n", "summary.csv": _csv_text(rows)}
    index = {}
    for name, text in files.items():
        data = text.encode()
        (out / name).write_bytes(data)
        index[name] = {"sha256": hashlib.sha256(data).hexdigest(), "bytes": len(data)}
    code = EXIT_OK if all(checks.values()) else EXIT_ASSERTION
    manifest = {"config": cfg, "version": _version(), "started": started,
                "wall_clock_s": time.perf_counter() - t0, "files": index, "assertions": checks,
                "exit_code": code}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")
    return code, manifest


def _load(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="invgeo", description="Isometry-invariant geodesic experiments")
    sub = ap.add_subparsers(dest="cmd", required=True)
    p_run = sub.add_parser("run", help="run the task of a config file")
    p_run.add_argument("config")
    p_run.add_argument("--set", action="append", default=[], metavar="PATH=VALUE",
                       help="override a config entry by dotted path (value parsed as JSON when possible)")
    p_run.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    p_val = sub.add_parser("validate", help="check a config and print the effective version")
    p_val.add_argument("config")
    p_val.add_argument("--set", action="append", default=[], metavar="PATH=VALUE")
    sub.add_parser("schema", help="print the config JSON schema")
    args = ap.parse_args(argv)

    if args.cmd == "schema":
        print(json.dumps(SCHEMA, indent=2))
        return EXIT_OK
    try:
        cfg = effective_config(apply_overrides(_load(args.config), args.set))
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.cmd == "validate":
        print(json.dumps(cfg, indent=2, sort_keys=True))
        return EXIT_OK
    try:
        code, manifest = run(cfg, args.out)
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvgeoError as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    for name, ok in manifest["assertions"].items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    print(f"outputs in {args.out or cfg['output_dir']}")
    return code


if __name__ == "__main__":
    sys.exit(main())
