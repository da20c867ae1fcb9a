"""Ballisticity criterion pipeline: parameter schedule, box bound, verdicts.

Everything that involves ``exp`` of large arguments is evaluated in log
space; a value that does not fit in a double is reported as ``inf`` with a
separate status so overflow is never confused with a genuinely infinite bound.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .env import EnvironmentLaw, moment_report, sample_environment
from .green import DegenerateRatioError, SolverError, hat_rho, hyperplane_sites
from .lattice import LatticeDomain
from .rng import derive_seed
from .walk import (BACK, SIDE, MCEstimate, annealed_face_counts, estimate_from_counts,
                   choose_stride, estimate_p, rho_of_q)

HOLDS, FAILS, UNTESTABLE = "holds", "fails", "untestable-at-scale"
_LOG_MAX = math.log(np.finfo(float).max)


def _exp(x: float) -> float:
    return math.inf if x > _LOG_MAX else math.exp(x)


def _pos(x: float) -> float:
    return x if x > 0 else 0.0


@dataclass
class Verdict:
    name: str
    inequality: str
    lhs: float | None
    rhs: float | None
    status: str
    note: str = ""

    @classmethod
    def compare(cls, name, inequality, lhs, rhs, holds: bool, note=""):
        return cls(name, inequality, lhs, rhs, HOLDS if holds else FAILS, note)


# ----------------------------------------------------------------------
# Schedule
# ----------------------------------------------------------------------
@dataclass
class Schedule:
    d: int
    r: int
    epsilon: float
    sigma_2r: float
    lambda0: float
    M: float
    L: float
    H: float
    h: float
    gamma1: float
    c1: float
    c2: float
    flags: dict = field(default_factory=dict)

    @property
    def admissible(self) -> bool:
        return all(self.flags.values())

    def to_dict(self) -> dict:
        return asdict(self)


def lambda0_of(r: int, sigma_2r: float, epsilon: float) -> float:
    """Threshold ``sqrt(r) sigma_2r eps^(2 - 1/sqrt(r))`` on the mean drift."""
    return math.sqrt(r) * sigma_2r * epsilon ** (2.0 - 1.0 / math.sqrt(r))


def make_schedule(d: int, r: int, epsilon: float, sigma_2r: float,
                  c1: float = 0.5, c2: float = 1.0) -> Schedule:
    """Scales ``M, L, H, h`` and ``gamma1`` derived from ``(r, eps, sigma_2r)``.

    Admissibility problems are recorded in ``flags`` (``False`` = violated)
    and never patched.
    """
    if r < 1:
        raise ValueError("r must be >= 1")
    if not 0 < epsilon < 1:
        raise ValueError("epsilon must lie in (0, 1)")
    if not sigma_2r > 0:
        raise ValueError("sigma_2r must be > 0")
    if not 0 < c1:
        raise ValueError("c1 must be > 0")
    sr = math.sqrt(r)
    lam0 = lambda0_of(r, sigma_2r, epsilon)
    M = epsilon ** (-1.0 / sr) / lam0
    L = c1 / epsilon
    H = M * M
    h = epsilon ** (-1.0 / (2 * sr)) * L * L
    gamma1 = c2 / 10.0 * lam0 * L
    kappa = 1.0 / (4 * d)
    flags = {
        "2h <= H": 2 * h <= H,
        "H <= M^3/32": H <= M ** 3 / 32,
        "sigma_2r > eps^2": sigma_2r > epsilon ** 2,
        "eps L < 3/4": epsilon * L < 0.75,
        "0 < gamma1 <= 1": 0 < gamma1 <= 1,
        "M >= exp(100 + 4d log(kappa)^2)": math.log(M) >= 100 + 4 * d * math.log(kappa) ** 2,
        "r >= 144 d^2": r >= 144 * d * d,
    }
    return Schedule(d, r, epsilon, sigma_2r, lam0, M, L, H, h, gamma1, c1, c2, flags)


# ----------------------------------------------------------------------
# Box bound
# ----------------------------------------------------------------------
def log_delta_inverse(M: float, L: float, H: float, h: float, gamma1: float) -> float:
    if min(M, L, H, h, gamma1) <= 0:
        raise ValueError("all arguments must be > 0")
    t = gamma1 * M / (32.0 * L)
    gap = _pos(H * L / (2.0 * h * M) - 4.0 / gamma1)
    a = -t
    b = math.log(10.0 * M / (gamma1 * L)) - t * gap * gap
    return float(np.logaddexp(a, b))


def delta_inverse(M: float, L: float, H: float, h: float, gamma1: float) -> float:
    """``exp(-g M/32L) + (10M/(g L)) exp(-(g M/32L) (HL/(2hM) - 4/g)_+^2)``."""
    return _exp(log_delta_inverse(M, L, H, h, gamma1))


@dataclass
class BoxBoundValue:
    value: float
    log_value: float
    status: str  # "finite", "vanishing-denominator" or "overflow"
    log_first: float
    log_second: float


def lemma1_evaluate(hat_rho_mean: float, p_hat: float, M: float, L: float, H: float,
                    kappa: float, delta: float, d: int | None = None) -> BoxBoundValue:
    """Right-hand side of the box bound on ``E[sqrt(rho_B)]``, in log space.

    ``d`` defaults to ``1/(4 kappa)``.  ``Mbar = floor(M^3/(32H))``; when it is
    0 the exponential factor of the second term is taken as 1.
    """
    if not delta > 1:
        raise ValueError("the bound needs delta > 1 (delta_inverse < 1)")
    if hat_rho_mean < 0:
        raise ValueError("hat_rho_mean must be >= 0")
    if d is None:
        d = 1.0 / (4.0 * kappa)
    log_k = math.log(kappa)
    mbar = math.floor(M ** 3 / (32.0 * H))
    if mbar > 0:
        shift = 7.0 * M / mbar * (-log_k) / math.log(delta)
        expo = -0.5 * mbar * _pos(p_hat - shift) ** 2
    else:
        expo = 0.0
    log_second = math.log(2 * d) - 0.5 * M * log_k + expo
    if hat_rho_mean >= 1.0:
        return BoxBoundValue(math.inf, math.inf, "vanishing-denominator", math.inf, log_second)
    if hat_rho_mean == 0.0:
        log_first = -math.inf
    else:
        log_first = (math.log(2.0) + M / (2.0 * L) * math.log(hat_rho_mean)
                     - math.log(1.0 - math.sqrt(hat_rho_mean)))
    total = -2.0 * log_k + float(np.logaddexp(log_first, log_second))
    value = _exp(total)
    return BoxBoundValue(value, total, "overflow" if value == math.inf else "finite",
                       log_first, log_second)


def lemma1_bound(hat_rho_mean, p_hat, M, L, H, kappa, delta, d=None) -> float:
    return lemma1_evaluate(hat_rho_mean, p_hat, M, L, H, kappa, delta, d).value


# ----------------------------------------------------------------------
# Inequalities on the single-site law
# ----------------------------------------------------------------------
def kalikow_shortcut(lam: float, sigma_2: float, epsilon: float, d: int) -> Verdict:
    rhs = 4 * d * (1 + 9 * epsilon) * sigma_2 ** 2
    return Verdict.compare("kalikow_shortcut", "lambda >= 4d(1+9eps) sigma_2^2", lam, rhs,
                           lam >= rhs)


def theorem_condition(lam: float, r: int, sigma_2r: float, epsilon: float) -> Verdict:
    rhs = lambda0_of(r, sigma_2r, epsilon)
    return Verdict.compare("theorem_condition", "lambda >= sqrt(r) sigma_2r eps^(2-1/sqrt(r))",
                           lam, rhs, lam >= rhs)


# ----------------------------------------------------------------------
# Pipeline
# ----------------------------------------------------------------------
@dataclass
class DeskCaps:
    """Surrogate-scale sizes and sampling budgets for :func:`run_pipeline`."""

    M: int = 3
    L: int = 2
    W: int = 4
    H: float = 2.0
    h: int = 1
    gamma1: float = 0.1
    n_env: int = 20
    n_walks: int = 2000
    hyperplane_stride: int | None = None  # None: smallest stride with <= hyperplane_max_sites
    hyperplane_max_sites: int = 200
    p_max_sites: int = 2000
    box_state_cap: int = 200_000
    moment_samples: int = 200_000
    c1: float = 0.5
    c2: float = 1.0

    @classmethod
    def from_dict(cls, data: dict | None) -> "DeskCaps":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown desk cap fields {sorted(unknown)}")
        return cls(**data)


@dataclass
class CriterionReport:
    inputs: dict
    moments: dict
    schedule: dict | None
    delta_inverse: dict
    hat_rho_mean: dict | None
    p_hat: dict | None
    lemma1_bound: dict | None
    effective_threshold: dict
    backexit: dict | None
    verdicts: dict[str, Verdict]
    errors: dict[str, str] = field(default_factory=dict)
    notes: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["verdicts"] = {k: asdict(v) for k, v in self.verdicts.items()}
        return out

    def flat_row(self) -> dict:
        row = {"kind": self.inputs["kind"], "d": self.inputs["d"], "r": self.inputs["r"],
               "epsilon": self.moments["epsilon"], "lambda": self.moments["lambda"],
               "sigma_2": self.moments["sigma_2"], "sigma_2r": self.moments["sigma_2r"]}
        for k, v in self.verdicts.items():
            row[f"{k}.status"] = v.status
            row[f"{k}.lhs"] = v.lhs
            row[f"{k}.rhs"] = v.rhs
        return row


def _mean_se(x) -> dict:
    x = np.asarray(x, dtype=float)
    se = float(x.std(ddof=1) / math.sqrt(x.size)) if x.size > 1 else math.nan
    return {"mean": float(x.mean()), "std_error": se, "n": int(x.size)}


MODES = ("both", "paper-schedule", "surrogate-scale")


def _full_schedule(d, r, eps, s2r, caps, verdicts):
    kappa = 1.0 / (4 * d)
    sch = make_schedule(d, r, eps, s2r, caps.c1, caps.c2)
    schedule = sch.to_dict()
    ldi = log_delta_inverse(sch.M, sch.L, sch.H, sch.h, sch.gamma1)
    for name, ok in sch.flags.items():
        verdicts[f"schedule: {name}"] = Verdict(f"schedule: {name}", name, None, None,
                                                 HOLDS if ok else FAILS)
    if ldi < 0:
        targ_rho = max(0.0, 1 - d * sch.lambda0 * sch.L / 10)
        lv = lemma1_evaluate(targ_rho, 0.75, sch.M, sch.L, sch.H, kappa, math.exp(-ldi), d)
        schedule["log_lemma1_at_targets"] = lv.log_value
    return schedule, {"log": ldi, "value": _exp(ldi)}


def run_pipeline(law: EnvironmentLaw, r: int, caps: DeskCaps | None = None, seed: int = 0,
                 workers: int = 1, mode: str = "both") -> CriterionReport:
    """Evaluate the criterion for ``law`` at full scale and at surrogate scale.

    Full scale: moments, schedule, ``delta^-1`` and the bound evaluated at
    the target values of ``E[rho_hat]`` and ``p``; estimators are marked
    untestable because the boxes are astronomically large.  Surrogate scale:
    ``caps`` fixes small ``M, L, W, H, h, gamma1`` and every estimator runs.
    A failing sub-estimate is recorded under ``errors`` and the rest of the
    report is still produced.  ``mode`` restricts the run to one scale.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    caps = caps or DeskCaps()
    d = law.dimension
    kappa = 1.0 / (4 * d)
    errors: dict[str, str] = {}
    verdicts: dict[str, Verdict] = {}

    exact = law.support() is not None
    mom = moment_report(law, rs=sorted({1, r}), n_samples=None if exact else caps.moment_samples,
                        seed=derive_seed(seed, "moments"))
    eps, lam = mom.epsilon, mom.lambda_
    s2, s2r = mom.sigma[2], mom.sigma[2 * r]
    moments = {"epsilon": eps, "lambda": lam, "sigma_2": s2, "sigma_2r": s2r,
               "standard_errors": mom.standard_errors, "sample_count": mom.sample_count}
    lam0 = lambda0_of(r, s2r, eps)

    # single-site inequalities
    tc = theorem_condition(lam, r, s2r, eps)
    if not 0 < eps < 1:
        tc.status, tc.note = FAILS, "needs 0 < eps < 1 (no perturbation: degenerate law)"
    verdicts["theorem_condition"] = tc
    kc = kalikow_shortcut(lam, s2, eps, d)
    if lam <= 0:
        kc.status, kc.note = FAILS, "needs lambda > 0"
    verdicts["kalikow_shortcut"] = kc
    verdicts["sigma_2r > eps^2"] = Verdict.compare("nottoosmall", "sigma_2r > eps^2", s2r,
                                                   eps ** 2, s2r > eps ** 2)

    # full-scale schedule (also reported in surrogate mode)
    schedule = None
    dinv = {}
    notes: dict[str, str] = {}
    if 0 < eps < 1 and s2r > 0:
        try:
            schedule, dinv["scheduled"] = _full_schedule(d, r, eps, s2r, caps, verdicts)
        except (ValueError, OverflowError, ZeroDivisionError) as exc:
            errors["schedule"] = str(exc)
    else:
        notes["schedule"] = "degenerate law (eps = 0 or sigma_2r = 0): schedule undefined"
    sched_M = schedule["M"] if schedule else None
    verdicts["effective (scheduled M)"] = Verdict(
        "effective (scheduled M)", "P_0(X_T_B not in front) < M^-(15d+5)", None,
        None if sched_M is None else _exp(-(15 * d + 5) * math.log(sched_M)), UNTESTABLE,
        "box at the scheduled M is far beyond desk scale")

    c = caps
    if mode == "paper-schedule":
        for k, v in verdicts.items():
            v.name = k
        return CriterionReport(
            inputs={"kind": law.kind, "d": d, "r": r, "law": law.to_dict(), "caps": asdict(c),
                    "seed": seed, "mode": mode},
            moments=moments, schedule=schedule, delta_inverse=dinv, hat_rho_mean=None,
            p_hat=None, lemma1_bound=None,
            effective_threshold={"surrogate": None,
                                 "scheduled_log": None if sched_M is None
                                 else -(15 * d + 5) * math.log(sched_M)},
            backexit=None, verdicts=verdicts, errors=errors, notes=notes)

    # surrogate scale
    ldi_s = log_delta_inverse(c.M, c.L, c.H, c.h, c.gamma1)
    dinv["surrogate"] = {"log": ldi_s, "value": _exp(ldi_s)}
    verdicts["delta^-1 < 1 (surrogate)"] = Verdict.compare(
        "delta^-1 < 1 (surrogate)", "delta^-1 < 1", dinv["surrogate"]["value"], 1.0, ldi_s < 0)

    hat_rho_est = None
    try:
        stride = c.hyperplane_stride
        if stride is None:
            n_hyp = hyperplane_sites(c.M, d).shape[0]
            stride = choose_stride(n_hyp, d - 1, c.hyperplane_max_sites)
        vals = [hat_rho(sample_environment(law, None, derive_seed(seed, "rho-env", i)),
                        c.M, c.L, c.W, stride) for i in range(c.n_env)]
        hat_rho_est = _mean_se(vals)
        hat_rho_est["max"] = float(max(vals))
        hat_rho_est["stride"] = stride
    except (SolverError, DegenerateRatioError, ValueError) as exc:
        errors["hat_rho"] = str(exc)

    p_est = None
    try:
        pe = estimate_p(law, c.M, c.L, c.H, c.h, c.gamma1, c.n_env, derive_seed(seed, "p"),
                        max_sites=c.p_max_sites, workers=workers)
        p_est = pe.to_dict()
    except (SolverError, ValueError) as exc:
        errors["p"] = str(exc)

    if hat_rho_est is not None:
        target = 1 - d * lam0 * c.L / 10
        verdicts["E[rho_hat] <= 1 - d lambda0 L/10 (surrogate)"] = Verdict.compare(
            "target rho_hat", "E[rho_hat] <= 1 - d lambda0 L/10", hat_rho_est["mean"], target,
            hat_rho_est["mean"] <= target)
    if p_est is not None:
        verdicts["p >= 3/4 (surrogate)"] = Verdict.compare(
            "target p", "p >= 3/4", p_est["mean"], 0.75, p_est["mean"] >= 0.75)

    lemma = None
    if hat_rho_est is not None and p_est is not None:
        if hat_rho_est["mean"] >= 1:
            lemma = {"value": math.inf, "log_value": math.inf, "status": "vanishing-denominator"}
        elif ldi_s < 0:
            lv = lemma1_evaluate(hat_rho_est["mean"], p_est["mean"], c.M, c.L, c.H, kappa,
                                 math.exp(-ldi_s), d)
            lemma = asdict(lv)
        else:
            lemma = {"value": None, "log_value": None,
                     "status": "inapplicable (delta^-1 >= 1)"}

    threshold = _exp(-(15 * d + 5) * math.log(c.M))
    backexit = None
    box = LatticeDomain.box(c.M, d)
    if box.n_states <= c.box_state_cap:
        try:
            counts = annealed_face_counts(law, box, c.n_env, c.n_walks,
                                          derive_seed(seed, "box"), workers=workers)
            est: MCEstimate = estimate_from_counts(counts, [BACK, SIDE])
            decided = counts[:, :3].sum(axis=1)
            q = (counts[:, BACK] + counts[:, SIDE]) / np.maximum(decided, 1)
            sq = [math.sqrt(rho_of_q(float(v))) if v < 1 else math.inf for v in q]
            backexit = {"E[q_B]": est.to_dict(), "E[sqrt(rho_B)]": _mean_se(sq)}
            verdicts["effective (surrogate M)"] = Verdict.compare(
                "effective (surrogate M)", "P_0(X_T_B not in front) < M^-(15d+5)", est.mean,
                threshold, est.mean < threshold)
            verdicts["E[q_B] <= E[sqrt(rho_B)] (surrogate)"] = Verdict.compare(
                "sqrtrho", "E[q_B] <= E[sqrt(rho_B)]", est.mean,
                backexit["E[sqrt(rho_B)]"]["mean"], est.mean <= backexit["E[sqrt(rho_B)]"]["mean"])
        except (ValueError, SolverError) as exc:
            errors["backexit"] = str(exc)
    else:
        verdicts["effective (surrogate M)"] = Verdict(
            "effective (surrogate M)", "P_0(X_T_B not in front) < M^-(15d+5)", None, threshold,
            UNTESTABLE, f"box has {box.n_states} states, above the cap")

    for k, v in verdicts.items():
        v.name = k
    return CriterionReport(
        inputs={"kind": law.kind, "d": d, "r": r, "law": law.to_dict(), "caps": asdict(c),
                "seed": seed, "mode": mode},
        moments=moments, schedule=schedule, delta_inverse=dinv, hat_rho_mean=hat_rho_est,
        p_hat=p_est, lemma1_bound=lemma,
        effective_threshold={"surrogate": threshold,
                             "scheduled_log": None if sched_M is None
                             else -(15 * d + 5) * math.log(sched_M)},
        backexit=backexit, verdicts=verdicts, errors=errors, notes=notes)
