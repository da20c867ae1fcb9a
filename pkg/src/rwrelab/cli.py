"""Command line entry point.

    rwrelab <walk|green|criterion|concentration|sweep|validate> --config cfg.json
        [--seed N] [--workers N] [--deterministic] [--out DIR] [--set key.path=JSON ...]

Each run writes ``<out>/<run_id>/`` containing ``config.json`` (the exact
canonical config), ``report.json``, one or more CSV tables and
``warnings.log``.  The directory is assembled under a temporary name and
renamed into place.  Exit codes: 0 success, 2 validation failure, 3 partial
sub-task failure.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import math
import os
import shutil
import sys
import tempfile
import warnings

import numpy as np

from . import config as cfgmod
from .concentration import bblm_inequality, efron_stein_ensemble, mean_bound_check, tail_check
from .criterion import DeskCaps, run_pipeline
from .env import law_from_dict, sample_environment
from .green import SlabSpec, gamma_weight_sum, green_apply_exact, green_apply_mc
from .rng import derive_seed
from .walk import BACK, FRONT, SIDE, annealed_face_counts, default_step_cap, estimate_from_counts

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 2, 3


# ----------------------------------------------------------------------
# serialisation
# ----------------------------------------------------------------------
def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.bool_, bool)):
        return bool(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return x


def dumps(obj) -> str:
    return json.dumps(_clean(obj), sort_keys=True, indent=2) + "\n"


def _csv(rows: list[dict], columns: list[str] | None = None) -> str:
    buf = io.StringIO()
    if not rows:
        return ""
    columns = columns or list(rows[0])
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row.get(k)) for k in columns})
    return buf.getvalue()


def _fmt(v):
    v = _clean(v)
    return repr(v) if isinstance(v, float) else v


class Result:
    def __init__(self):
        self.report: dict = {}
        self.tables: dict[str, str] = {}
        self.warnings: list[str] = []
        self.errors: dict[str, str] = {}


# ----------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------
def _cmd_walk(cfg, seed, workers, res: Result):
    law = law_from_dict(cfg["law"])
    dom = cfgmod.build_domain(cfg["domain"], law.dimension)
    block = cfg.get("walk", {})
    n_env, n_walks = block.get("n_env", 10), block.get("n_walks", 1000)
    cap = block.get("step_cap") or default_step_cap(dom, np.zeros(law.dimension, np.int64))
    counts = annealed_face_counts(law, dom, n_env, n_walks, seed, cap, workers)
    tot = counts.sum(axis=0)
    notfront = estimate_from_counts(counts, [BACK, SIDE])
    front = estimate_from_counts(counts, [FRONT])
    back = estimate_from_counts(counts, [BACK])
    res.report = {"domain": dom.to_dict(), "n_env": n_env, "n_walks": n_walks, "step_cap": cap,
                  "face_counts": dict(zip(("front", "back", "side", "censored"), tot)),
                  "not_front": notfront.to_dict(), "front": front.to_dict(),
                  "back": back.to_dict()}
    if tot[3]:
        res.warnings.append(f"censoring: {int(tot[3])} of {int(tot.sum())} walks hit the "
                            f"step cap {cap}")
    rows = [{"env": i, "front": c[0], "back": c[1], "side": c[2], "censored": c[3]}
            for i, c in enumerate(counts)]
    res.tables["face_counts.csv"] = _csv(rows)


def _green_starts(spec, slab: SlabSpec):
    if spec in (None, "origin"):
        return slab.origin.reshape(1, -1)
    if spec == "all":
        return slab.domain().sites()
    return np.asarray(spec, dtype=np.int64)


def _cmd_green(cfg, seed, workers, res: Result):
    law = law_from_dict(cfg["law"])
    s = cfg["slab"]
    slab = SlabSpec(s["L"], s["W"], law.dimension)
    block = cfg.get("green", {})
    f = block.get("f", "drift-e1")
    if isinstance(f, dict):
        f = ("point", tuple(f["point"]))
    env = sample_environment(law, slab.domain(), derive_seed(seed, "env", 0))
    if block.get("method", "exact") == "exact":
        gf = green_apply_exact(env, slab, f, state_cap=cfg.get("state_cap", 200_000))
    else:
        starts = _green_starts(block.get("starts"), slab)
        gf = green_apply_mc(env, slab, f, block.get("n_walks", 10_000),
                            derive_seed(seed, "walks"), starts=starts, workers=workers)
    res.report = {"header": gf.header(), "slab": slab.to_dict(),
                  "value_at_origin": gf.at(slab.origin)}
    rows = []
    for i, x in enumerate(gf.sites):
        row = {f"x{j + 1}": int(v) for j, v in enumerate(x)}
        row["value"] = gf.values[i]
        if gf.std_error is not None:
            row["std_error"] = gf.std_error[i]
        rows.append(row)
    res.tables["green_field.csv"] = _csv(rows)


def _cmd_criterion(cfg, seed, workers, res: Result):
    law = law_from_dict(cfg["law"])
    block = cfg.get("criterion", {})
    rep = run_pipeline(law, block.get("r", 1), DeskCaps.from_dict(block.get("caps")), seed,
                       workers, block.get("mode", "both"))
    res.report = rep.to_dict()
    res.errors.update(rep.errors)
    res.tables["criterion_row.csv"] = _csv([rep.flat_row()])


def _cmd_sweep(cfg, seed, workers, res: Result):
    base = law_from_dict(cfg["law"])
    block = cfg["sweep"]
    caps = DeskCaps.from_dict(block.get("caps"))
    rid = cfgmod.run_id(cfg)
    rows, cells = [], []
    for i, cell in enumerate(block["grid"]):
        cell_id = f"{rid}-{i:03d}"
        try:
            law = cfgmod.cell_law(base, cell)
            rep = run_pipeline(law, cell.get("r", block.get("r", 1)), caps,
                               derive_seed(seed, "cell", i), workers,
                               block.get("mode", "paper-schedule"))
        except (ValueError, ArithmeticError) as exc:
            res.errors[cell_id] = str(exc)
            continue
        for k, v in rep.errors.items():
            res.errors[f"{cell_id}/{k}"] = v
        row = {"cell_id": cell_id, **{f"cell.{k}": v for k, v in cell.items()},
               **rep.flat_row()}
        rows.append(row)
        cells.append({"cell_id": cell_id, "cell": cell, "report": rep.to_dict()})
    cols = []
    for row in rows:
        cols += [k for k in row if k not in cols]
    res.report = {"cells": cells}
    res.tables["sweep.csv"] = _csv(rows, cols)


def _cmd_concentration(cfg, seed, workers, res: Result):
    law = law_from_dict(cfg["law"])
    s = cfg["slab"]
    slab = SlabSpec(s["L"], s["W"], law.dimension)
    block = cfg.get("concentration", {})
    n_env = block.get("n_env", 200)
    ens = efron_stein_ensemble(law, slab, n_env, block.get("inner_replicates", 8),
                               derive_seed(seed, "es"), workers)
    zens = ens.z_ensemble()
    report = {"ensemble": ens.to_dict(), "z_moments": zens.to_dict()["central_moments"],
              "bblm": [bblm_inequality(ens, float(q)) for q in block.get("q", [2, 4])]}
    try:
        report["mean_bound"] = mean_bound_check(law, slab, n_env, ensemble=zens)
    except ValueError as exc:
        res.errors["mean_bound"] = str(exc)
    r = block.get("r", 2)
    grid = block.get("u_grid", "auto")
    if grid == "auto":
        dev = np.abs(zens.centered())
        grid = [float(np.quantile(dev, p)) for p in (0.5, 0.9, 0.99)] if dev.any() else [0.0]
    try:
        rows = tail_check(zens, r, grid, block.get("c7", 1.0),
                          min_samples=block.get("min_tail_samples", 1000))
        report["tail"] = rows
        res.tables["tail.csv"] = _csv(rows, ["u", "empirical_tail", "tail_se",
                                             "markov_reference", "bound_form", "c7",
                                             "consistent"])
    except ValueError as exc:
        res.errors["tail"] = str(exc)
    gw = block.get("gamma_weight")
    if gw:
        d = gw.get("d", law.dimension)
        rows = []
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            for L in gw["L"]:
                W = gw.get("W_factor", 8) * L
                W += W % 2
                rows.append({"L": L, "W": W, "d": d, "alpha": gw["alpha"],
                             "sum": gamma_weight_sum(L, W, gw["alpha"], d)})
        res.warnings += [f"{w.category.__name__}: {w.message}" for w in caught]
        report["gamma_weight"] = rows
        res.tables["gamma_weight.csv"] = _csv(rows)
    res.report = report


COMMANDS = {"walk": _cmd_walk, "green": _cmd_green, "criterion": _cmd_criterion,
            "concentration": _cmd_concentration, "sweep": _cmd_sweep}


# ----------------------------------------------------------------------
# archive
# ----------------------------------------------------------------------
def write_archive(out_dir: str, cfg: dict, res: Result) -> str:
    """Write all outputs under ``out_dir/<run_id>`` atomically; return that path."""
    rid = cfgmod.run_id(cfg)
    os.makedirs(out_dir, exist_ok=True)
    final = os.path.join(out_dir, rid)
    tmp = tempfile.mkdtemp(prefix=f".{rid}.", dir=out_dir)
    report = {"schema_version": cfgmod.SCHEMA_VERSION, "run_id": rid,
              "command": cfg["command"], "seeds": cfgmod.seed_manifest(cfg),
              "errors": res.errors, "result": res.report}
    files = {"config.json": dumps(cfgmod.canonical(cfg)), "report.json": dumps(report),
             "warnings.log": "".join(w + "\n" for w in res.warnings), **res.tables}
    for name, text in files.items():
        with open(os.path.join(tmp, name), "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    if os.path.isdir(final):
        old = final + ".old"
        shutil.rmtree(old, ignore_errors=True)
        os.rename(final, old)
        os.rename(tmp, final)
        shutil.rmtree(old, ignore_errors=True)
    else:
        os.rename(tmp, final)
    return final


def run(cfg: dict, out_dir: str, workers: int = 1) -> tuple[int, str | None, list]:
    """Validate, execute and archive one config.  Returns (exit code, path, diagnostics)."""
    diags = cfgmod.validate(cfg)
    if any(d.severity == "error" for d in diags):
        return EXIT_INVALID, None, diags
    cfg = cfgmod.canonical(cfg)
    res = Result()
    res.warnings += [f"{d.severity}: {d.path}: {d.message}" for d in diags]
    ctx = contextlib.nullcontext()
    if cfg.get("deterministic"):
        from threadpoolctl import threadpool_limits
        ctx = threadpool_limits(limits=1)
    seed = derive_seed(cfg["seed"], cfg["command"])
    with ctx, warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        COMMANDS[cfg["command"]](cfg, seed, workers, res)
    res.warnings += [f"{w.category.__name__}: {w.message}" for w in caught]
    path = write_archive(out_dir, cfg, res)
    return (EXIT_PARTIAL if res.errors else EXIT_OK), path, diags


# ----------------------------------------------------------------------
# argument parsing
# ----------------------------------------------------------------------
def _apply_set(cfg: dict, item: str):
    key, _, raw = item.partition("=")
    if not key or not _:
        raise ValueError(f"--set expects key.path=value, got {item!r}")
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = val


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rwrelab", description=__doc__.split("\n")[0])
    sub = ap.add_subparsers(dest="subcommand", required=True)
    for name in list(COMMANDS) + ["validate"]:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded BLAS and fixed reduction order")
        p.add_argument("--out", default="out")
        p.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                       help="override a config entry, e.g. --set walk.n_walks=5000")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        with open(args.config, encoding="utf-8") as fh:
            cfg = json.load(fh)
        for item in args.set:
            _apply_set(cfg, item)
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    if not isinstance(cfg, dict):
        print("error: config must be a JSON object", file=sys.stderr)
        return EXIT_INVALID
    if args.subcommand != "validate":
        cfg.setdefault("command", args.subcommand)
        if cfg["command"] != args.subcommand:
            print(f"error: config command {cfg['command']!r} does not match "
                  f"subcommand {args.subcommand!r}", file=sys.stderr)
            return EXIT_INVALID
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.deterministic:
        cfg["deterministic"] = True
    if args.subcommand == "validate":
        diags = cfgmod.validate(cfg)
        print(dumps([d.to_dict() for d in diags]), end="")
        return EXIT_INVALID if any(d.severity == "error" for d in diags) else EXIT_OK
    code, path, diags = run(cfg, args.out, args.workers)
    for d in diags:
        print(f"{d.severity}: {d.path}: {d.message}", file=sys.stderr)
    if path:
        print(path)
    return code


if __name__ == "__main__":
    sys.exit(main())
