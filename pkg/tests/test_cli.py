import csv
import json
import os

import pytest

from rwrelab import config as cfgmod
from rwrelab.cli import EXIT_INVALID, EXIT_OK, EXIT_PARTIAL, main, run

WALK = {"command": "walk", "seed": 1, "law": {"kind": "two-point", "d": 2, "params": {"a": 0.03}},
        "domain": {"type": "box", "M": 2}, "walk": {"n_env": 2, "n_walks": 200}}
CRIT = {"command": "criterion", "seed": 2,
        "law": {"kind": "two-point", "d": 2, "params": {"a": 0.01, "lam": 0.02}},
        "criterion": {"r": 1, "caps": {"n_env": 2, "n_walks": 100}}}


def _write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def test_walk_archive_layout(tmp_path):
    code, path, _ = run(dict(WALK), str(tmp_path))
    assert code == EXIT_OK
    assert os.path.basename(path) == cfgmod.run_id(WALK)
    names = set(os.listdir(path))
    assert {"config.json", "report.json", "warnings.log"} <= names
    rep = json.loads((tmp_path / path / "report.json").read_text())
    assert rep["run_id"] == cfgmod.run_id(WALK) and rep["command"] == "walk"


def test_run_id_ignores_workers_but_not_seed():
    a = cfgmod.run_id(WALK)
    assert cfgmod.run_id(dict(WALK, workers=8, out="elsewhere")) == a
    assert cfgmod.run_id(dict(WALK, seed=2)) != a


def test_validate_reports_schedule_flag(tmp_path, capsys):
    cfg = json.loads(json.dumps(CRIT))
    cfg["criterion"]["caps"]["c1"] = 0.8
    assert main(["validate", "--config", _write(tmp_path, cfg)]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert any(d["severity"] == "warning" and "eps L < 3/4" in d["message"] for d in out)


def test_state_cap_rejection(tmp_path, capsys):
    cfg = dict(WALK, domain={"type": "box", "M": 500})
    assert main(["walk", "--config", _write(tmp_path, cfg), "--out", str(tmp_path)]) \
        == EXIT_INVALID
    err = capsys.readouterr().err
    assert "exceed the cap" in err and "state_cap >=" in err


def test_invalid_inputs_exit_2(tmp_path):
    assert main(["walk", "--config", str(tmp_path / "missing.json")]) == EXIT_INVALID
    assert main(["green", "--config", _write(tmp_path, WALK)]) == EXIT_INVALID
    bad = dict(WALK, law={"kind": "two-point", "d": 2, "params": {"a": 0.5}})
    assert main(["walk", "--config", _write(tmp_path, bad), "--out", str(tmp_path)]) \
        == EXIT_INVALID


def test_set_override_and_seed_flag(tmp_path, capsys):
    p = _write(tmp_path, WALK)
    assert main(["walk", "--config", p, "--out", str(tmp_path), "--seed", "7",
                 "--set", "walk.n_walks=100"]) == EXIT_OK
    path = capsys.readouterr().out.strip()
    saved = json.loads(open(os.path.join(path, "config.json")).read())
    assert saved["seed"] == 7 and saved["walk"]["n_walks"] == 100


def test_partial_result_exit_3(tmp_path):
    cfg = {"command": "concentration", "seed": 3,
           "law": {"kind": "two-point", "d": 2, "params": {"a": 0.02, "lam": 0.01}},
           "slab": {"L": 2, "W": 4},
           "concentration": {"n_env": 8, "inner_replicates": 2, "min_tail_samples": 1000}}
    code, path, _ = run(cfg, str(tmp_path))
    assert code == EXIT_PARTIAL
    rep = json.loads(open(os.path.join(path, "report.json")).read())
    assert "tail" in rep["errors"] and rep["result"]["bblm"]


def test_criterion_for_deterministic_drift_is_complete(tmp_path):
    cfg = dict(CRIT, law={"kind": "deterministic-drift", "d": 2, "params": {"lam": 0.02}})
    code, path, _ = run(cfg, str(tmp_path))
    assert code == EXIT_OK
    with open(os.path.join(path, "criterion_row.csv"), newline="") as fh:
        (row,) = list(csv.DictReader(fh))
    assert row["theorem_condition.status"] == "holds"


def test_sweep_one_row_per_cell(tmp_path):
    cfg = {"command": "sweep", "seed": 4,
           "law": {"kind": "two-point", "d": 4, "params": {"a": 0.01, "lam": 0.0}},
           "sweep": {"grid": [{"epsilon": 0.1, "lam": 0.003}, {"epsilon": 0.1, "lam": 0.01},
                              {"a": 0.005, "lam": 0.01}]}}
    code, path, _ = run(cfg, str(tmp_path))
    assert code == EXIT_OK
    with open(os.path.join(path, "sweep.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    rid = cfgmod.run_id(cfg)
    assert [r["cell_id"] for r in rows] == [f"{rid}-{i:03d}" for i in range(3)]
    assert float(rows[0]["epsilon"]) == pytest.approx(0.1)
