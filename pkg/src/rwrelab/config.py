"""Experiment configuration: schema, pre-flight diagnostics, canonical form and run id."""
from __future__ import annotations

import copy
import hashlib
import json
import math
from dataclasses import asdict, dataclass

import jsonschema

from .env import LawError, law_from_dict, moment_report
from .lattice import LatticeDomain
from .rng import derive_seed

SCHEMA_VERSION = 1
COMMANDS = ("walk", "green", "criterion", "concentration", "sweep")
# keys that may differ between runs without changing any output
VOLATILE_KEYS = ("workers", "out")
MEMORY_LIMIT_BYTES = 4 * 2 ** 30

_law = {
    "type": "object",
    "required": ["kind", "d"],
    "properties": {
        "kind": {"enum": ["deterministic-drift", "two-point", "isotropic-plus-drift",
                          "custom-table"]},
        "d": {"type": "integer", "minimum": 2},
        "params": {"type": "object"},
    },
    "additionalProperties": False,
}
_slab = {
    "type": "object",
    "required": ["L", "W"],
    "properties": {"L": {"type": "integer", "minimum": 1},
                   "W": {"type": "integer", "minimum": 2, "multipleOf": 2}},
    "additionalProperties": False,
}
_domain = {
    "type": "object",
    "required": ["type"],
    "properties": {
        "type": {"enum": ["box", "slab", "rect"]},
        "M": {"type": "integer", "minimum": 1},
        "L": {"type": "integer", "minimum": 1},
        "W": {"type": "integer", "minimum": 2, "multipleOf": 2},
        "bounds": {"type": "array", "items": {"type": "array", "minItems": 2, "maxItems": 2,
                                              "items": {"type": "integer"}}},
    },
    "additionalProperties": False,
}
_posint = {"type": "integer", "minimum": 1}
_num = {"type": "number"}

SCHEMA = {
    "type": "object",
    "required": ["command", "seed"],
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "command": {"enum": list(COMMANDS)},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2 ** 64 - 1},
        "deterministic": {"type": "boolean"},
        "law": _law,
        "domain": _domain,
        "slab": _slab,
        "state_cap": _posint,
        "walk": {"type": "object", "properties": {
            "n_env": _posint, "n_walks": _posint, "step_cap": _posint},
            "additionalProperties": False},
        "green": {"type": "object", "properties": {
            "f": {"oneOf": [{"enum": ["drift-e1", "ones"]},
                            {"type": "object", "required": ["point"],
                             "properties": {"point": {"type": "array",
                                                      "items": {"type": "integer"}}},
                             "additionalProperties": False}]},
            "method": {"enum": ["exact", "mc"]},
            "n_walks": _posint,
            "starts": {"oneOf": [{"enum": ["origin", "all"]},
                                 {"type": "array", "items": {"type": "array"}}]}},
            "additionalProperties": False},
        "criterion": {"type": "object", "properties": {
            "r": _posint,
            "mode": {"enum": ["both", "paper-schedule", "surrogate-scale"]},
            "caps": {"type": "object"}},
            "additionalProperties": False},
        "concentration": {"type": "object", "properties": {
            "q": {"type": "array", "items": {"type": "number", "minimum": 2}, "minItems": 1},
            "r": {"type": "integer", "minimum": 2, "multipleOf": 2},
            "u_grid": {"oneOf": [{"const": "auto"}, {"type": "array", "items": _num}]},
            "n_env": _posint, "inner_replicates": _posint, "c7": _num,
            "min_tail_samples": _posint,
            "gamma_weight": {"type": "object", "required": ["L", "alpha"], "properties": {
                "L": {"type": "array", "items": _posint}, "alpha": _num,
                "W_factor": _posint, "d": {"type": "integer", "minimum": 2}},
                "additionalProperties": False}},
            "additionalProperties": False},
        "sweep": {"type": "object", "required": ["grid"], "properties": {
            "r": _posint,
            "mode": {"enum": ["both", "paper-schedule", "surrogate-scale"]},
            "caps": {"type": "object"},
            "grid": {"type": "array", "minItems": 1, "items": {
                "type": "object", "properties": {
                    "epsilon": _num, "lam": _num, "a": _num, "r": _posint},
                "additionalProperties": False}}},
            "additionalProperties": False},
    },
    "additionalProperties": False,
    "allOf": [
        {"if": {"properties": {"command": {"enum": ["walk"]}}},
         "then": {"required": ["law", "domain"]}},
        {"if": {"properties": {"command": {"enum": ["green", "concentration"]}}},
         "then": {"required": ["law", "slab"]}},
        {"if": {"properties": {"command": {"enum": ["criterion", "sweep"]}}},
         "then": {"required": ["law"]}},
        {"if": {"properties": {"command": {"const": "sweep"}}},
         "then": {"required": ["sweep"]}},
    ],
}


@dataclass
class Diagnostic:
    severity: str  # "error", "warning" or "info"
    path: str
    message: str

    def to_dict(self) -> dict:
        return asdict(self)


def canonical(config: dict) -> dict:
    """Config with defaults filled and volatile keys dropped."""
    cfg = {k: copy.deepcopy(v) for k, v in config.items() if k not in VOLATILE_KEYS}
    cfg.setdefault("schema_version", SCHEMA_VERSION)
    cfg.setdefault("deterministic", False)
    return cfg


def canonical_json(config: dict) -> str:
    return json.dumps(canonical(config), sort_keys=True, separators=(",", ":"))


def run_id(config: dict) -> str:
    return hashlib.sha256(canonical_json(config).encode()).hexdigest()[:16]


def seed_manifest(config: dict) -> dict:
    master = int(config["seed"])
    return {"master_seed": master,
            "sub_seeds": {name: derive_seed(master, name) for name in COMMANDS}}


def build_domain(block: dict, d: int) -> LatticeDomain:
    kind = block["type"]
    if kind == "box":
        return LatticeDomain.box(block["M"], d)
    if kind == "slab":
        return LatticeDomain.slab(block["L"], block["W"], d)
    bounds = block["bounds"]
    if len(bounds) != d:
        raise ValueError(f"rect bounds need {d} intervals")
    return LatticeDomain.rect(bounds)


def _schema_errors(config) -> list[Diagnostic]:
    v = jsonschema.Draft202012Validator(SCHEMA)
    out = []
    for err in sorted(v.iter_errors(config), key=lambda e: list(map(str, e.absolute_path))):
        path = "/".join(str(p) for p in err.absolute_path) or "<root>"
        out.append(Diagnostic("error", path, err.message))
    return out


def validate(config: dict, default_state_cap: int = 200_000) -> list[Diagnostic]:
    """Schema check plus pre-flight admissibility; empty for a clean config."""
    from .criterion import DeskCaps, make_schedule

    diags = _schema_errors(config)
    if diags:
        return diags
    cmd = config["command"]
    cap = config.get("state_cap", default_state_cap)
    try:
        law = law_from_dict(config["law"])
    except (LawError, ValueError, TypeError) as exc:
        return [Diagnostic("error", "law", str(exc))]
    d = law.dimension

    def states_guard(n: int, path: str):
        if n > cap:
            diags.append(Diagnostic("error", path,
                                    f"{n} states exceed the cap {cap}; set state_cap >= {n}"))
        mem = 8 * n * (6 * d + 40)
        if mem > MEMORY_LIMIT_BYTES:
            diags.append(Diagnostic("warning", path,
                                    f"estimated memory {mem / 2 ** 30:.1f} GiB"))

    if cmd == "walk":
        try:
            states_guard(build_domain(config["domain"], d).n_states, "domain")
        except (ValueError, KeyError) as exc:
            diags.append(Diagnostic("error", "domain", f"bad domain: {exc}"))
    if cmd in ("green", "concentration"):
        s = config["slab"]
        states_guard(2 * s["L"] * s["W"] ** (d - 1), "slab")
    if cmd in ("criterion", "sweep"):
        block = config.get(cmd, {})
        try:
            caps = DeskCaps.from_dict(block.get("caps"))
        except (TypeError, ValueError) as exc:
            diags.append(Diagnostic("error", f"{cmd}/caps", str(exc)))
            return diags
        r = block.get("r", 1)
        cells = block.get("grid", [{}]) if cmd == "sweep" else [{}]
        for i, cell in enumerate(cells):
            prefix = f"sweep/grid/{i}" if cmd == "sweep" else "criterion"
            try:
                cl = law if cmd == "criterion" else cell_law(law, cell)
            except (LawError, ValueError) as exc:
                diags.append(Diagnostic("error", prefix, str(exc)))
                continue
            rr = cell.get("r", r)
            exact = cl.support() is not None
            mom = moment_report(cl, rs=(rr,), n_samples=None if exact else 20_000,
                                seed=derive_seed(config["seed"], "validate"))
            eps, s2r = mom.epsilon, mom.sigma[2 * rr]
            if not (0 < eps < 1 and s2r > 0):
                diags.append(Diagnostic("warning", prefix,
                                        "degenerate law (eps = 0 or sigma = 0): no schedule"))
                continue
            sch = make_schedule(d, rr, eps, s2r, caps.c1, caps.c2)
            for flag in ("2h <= H", "H <= M^3/32", "eps L < 3/4", "sigma_2r > eps^2"):
                if not sch.flags[flag]:
                    diags.append(Diagnostic("warning", prefix, f'schedule flag "{flag}" violated'))
        box = LatticeDomain.box(caps.M, d)
        if box.n_states > caps.box_state_cap:
            diags.append(Diagnostic("info", f"{cmd}/caps",
                                    f"box has {box.n_states} states; back-exit estimate will be "
                                    "marked untestable"))
    return diags


def cell_law(base, cell: dict):
    """The law of one sweep cell: ``a``/``lam`` override the base parameters;
    ``epsilon`` fixes the amplitude so that the law's ``eps`` equals it."""
    from .env import make_law

    params = dict(base.params)
    if "lam" in cell:
        params["lam"] = cell["lam"]
    if "a" in cell:
        params["a"] = cell["a"]
    elif "epsilon" in cell:
        d = base.dimension
        lam = abs(float(params.get("lam", 0.0)))
        if base.kind == "two-point":
            params["a"] = cell["epsilon"] / (4 * d) - lam / 2
        elif base.kind == "isotropic-plus-drift":
            params["a"] = (cell["epsilon"] / (4 * d) - lam / 2) / (2 - 1 / d)
        else:
            raise ValueError(f"cannot set epsilon for {base.kind} laws")
        if params["a"] < 0:
            raise ValueError("epsilon too small for the requested drift")
    law = make_law(base.kind, base.dimension, params)
    if "epsilon" in cell and not math.isclose(law.epsilon, cell["epsilon"], rel_tol=1e-9):
        raise ValueError("epsilon could not be matched")
    return law
