import csv
import hashlib
import json
from pathlib import Path

import pytest

from invgeo import cli
from invgeo.errors import NonConvergenceError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _rows(out):
    with open(out / "summary.csv") as fh:
        return list(csv.DictReader(fh))


def test_census_exit_ok_and_rows(tmp_path, capsys):
    code = cli.main(["run", str(CONFIGS / "census_flat.json"), "--out", str(tmp_path)])
    assert code == cli.EXIT_OK
    assert len(_rows(tmp_path)) == 25
    assert "PASS" in capsys.readouterr().out


def test_failed_isometry_check_exit_code(tmp_path):
    code = cli.main(["run", str(CONFIGS / "check_isometry_bad.json"), "--out", str(tmp_path)])
    assert code == cli.EXIT_ASSERTION
    res = json.loads((tmp_path / "result.json").read_text())
    assert not all(res["assertions"].values())


@pytest.mark.parametrize("raw", [
    {"catalog": "flat-t2", "task": {"kind": "census", "label_box": -1}},
    {"catalog": "no-such-entry", "task": {"kind": "census"}},
    {"catalog": "flat-t2", "task": {"kind": "census", "N": 16}},
    {"catalog": "flat-t2", "task": {"kind": "frobnicate"}},
    {"catalog": "flat-t2", "task": {"kind": "census"}, "unknown_key": 1},
])
def test_bad_config_exit_code(tmp_path, raw, capsys):
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(raw))
    assert cli.main(["run", str(p), "--out", str(tmp_path / "o")]) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_unreadable_config(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    assert cli.main(["validate", str(p)]) == cli.EXIT_CONFIG


def test_nonconvergence_exit_code(tmp_path, monkeypatch):
    def boom(*args):
        raise NonConvergenceError("stalled", {})

    monkeypatch.setitem(cli.RUNNERS, "census", boom)
    code = cli.main(["run", str(CONFIGS / "census_flat.json"), "--out", str(tmp_path)])
    assert code == cli.EXIT_NONCONVERGENCE


def test_census_deterministic_across_workers(tmp_path, monkeypatch):
    outs = []
    for w in ("1", "3"):
        monkeypatch.setenv("WORKERS", w)
        d = tmp_path / w
        assert cli.main(["run", str(CONFIGS / "census_flat.json"), "--out", str(d)]) == 0
        outs.append(((d / "result.json").read_bytes(), (d / "summary.csv").read_bytes()))
    assert outs[0] == outs[1]


def test_manifest_hashes(tmp_path):
    cli.main(["run", str(CONFIGS / "property_suite.json"), "--out", str(tmp_path),
              "--set", "task.gradient_count=5", "--set", "task.hessian_count=2"])
    man = json.loads((tmp_path / "manifest.json").read_text())
    assert man["exit_code"] == 0
    for name, meta in man["files"].items():
        data = (tmp_path / name).read_bytes()
        assert hashlib.sha256(data).hexdigest() == meta["sha256"]
        assert len(data) == meta["bytes"]


def test_validate_materializes_defaults(capsys):
    assert cli.main(["validate", str(CONFIGS / "census_flat.json"), "--set", "rng_seed=7"]) == 0
    cfg = json.loads(capsys.readouterr().out)
    assert cfg["rng_seed"] == 7
    assert cfg["task"]["label_box"] == 2
    assert cfg["model"]["kind"] == "flat-torus"


def test_override_parses_json_values():
    cfg = cli.apply_overrides({"task": {"kind": "census"}}, ["task.labels=[[1,0]]", "task.note=plain"])
    assert cfg["task"]["labels"] == [[1, 0]]
    assert cfg["task"]["note"] == "plain"


def test_schema_command(capsys):
    assert cli.main(["schema"]) == 0
    schema = json.loads(capsys.readouterr().out)
    assert "properties" in schema and "task" in schema["properties"]


def test_all_shipped_configs_validate():
    for p in sorted(CONFIGS.glob("*.json")):
        cfg = cli.effective_config(json.loads(p.read_text()))
        assert cfg["task"]["kind"] in cli.TASKS
