"""Concentration of ``Z = G_U[d.e1](0)``: ensembles, Efron-Stein proxies, BBLM and tails.

Single-site resampling is done by a rank-one update of the slab system.  With
``A = I - Q``, ``g = A^-1 f`` and ``c_n = A^-1 e_n``, replacing the row of
site ``n`` by a fresh draw changes ``A`` by ``-e_n w^T`` and ``f`` by
``phi e_n``, so

    Z'_n = Z + a_n phi + a_n (w.g + phi w.c_n) / (1 - w.c_n),   a_n = c_n[origin].

All ``c_n`` come from one sparse LU factorisation, solved in column blocks.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg as spla

from .env import (Environment, EnvironmentLaw, draw_site_vectors, epsilon_of, lambda_of,
                  make_law, resample_site, sample_environment, sigma_of)
from .green import (RESIDUAL_TARGET, SlabSpec, green_apply_exact, rhs_vector, solve_system)
from .lattice import compile_chain
from .parallel import pmap
from .rng import derive_seed

BBLM_CONSTANT = math.sqrt(math.e) / (math.sqrt(math.e) - 1.0)
DEFAULT_SOLVE_CAP = 5_000_000
_BLOCK = 512


def bblm_factor(q: float) -> float:
    """``sqrt(q sqrt(e) / (sqrt(e) - 1))``."""
    return math.sqrt(BBLM_CONSTANT * q)


def _env_seed(seed: int, i: int) -> int:
    return derive_seed(seed, "env", i)


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    if x.size < 2:
        return float(x.mean()), math.nan
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(x.size))


def _norm_and_se(x, q: float) -> tuple[float, float]:
    """Plug-in ``E[|x|^q]^(1/q)`` with a delta-method standard error."""
    m, se = _mean_se(np.abs(x) ** q)
    if m <= 0:
        return 0.0, 0.0
    return m ** (1.0 / q), se * m ** (1.0 / q - 1.0) / q


# ----------------------------------------------------------------------
# Ensembles of Z
# ----------------------------------------------------------------------
@dataclass
class ZEnsemble:
    law: EnvironmentLaw
    slab: SlabSpec
    seeds: np.ndarray
    values: np.ndarray
    max_residual: float

    @property
    def samples(self) -> list[tuple[int, float]]:
        return list(zip(self.seeds.tolist(), self.values.tolist()))

    @property
    def n(self) -> int:
        return int(self.values.size)

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def std_error(self) -> float:
        return _mean_se(self.values)[1]

    def centered(self) -> np.ndarray:
        return self.values - self.values.mean()

    def central_moment(self, q: float) -> tuple[float, float]:
        """``||Z - E Z||_q`` estimate and standard error."""
        return _norm_and_se(self.centered(), q)

    @property
    def central_moments(self) -> dict:
        return {q: self.central_moment(q) for q in (2, 4)}

    def to_dict(self) -> dict:
        return {"law": self.law.to_dict(), "slab": self.slab.to_dict(), "n": self.n,
                "mean": self.mean, "std_error": self.std_error,
                "central_moments": {str(q): list(v) for q, v in self.central_moments.items()},
                "max_residual": self.max_residual}


def _z_task(args):
    law, slab, env_seed = args
    env = sample_environment(law, slab.domain(), env_seed)
    gf = green_apply_exact(env, slab, "drift-e1")
    return gf.at(slab.origin), gf.residual_norm


def sample_Z(law: EnvironmentLaw, slab: SlabSpec, n_env: int, seed: int,
             workers: int = 1) -> ZEnsemble:
    """``n_env`` exact evaluations of ``G_U[d.e1]`` at the slab origin."""
    seeds = np.array([_env_seed(seed, i) for i in range(n_env)], dtype=np.uint64)
    out = pmap(_z_task, [(law, slab, int(s)) for s in seeds], workers)
    vals = np.array([v for v, _ in out], dtype=float)
    res = max((r for _, r in out), default=0.0)
    return ZEnsemble(law, slab, seeds, vals, float(res))


# ----------------------------------------------------------------------
# Single-site resampling
# ----------------------------------------------------------------------
class ResamplingSolver:
    """Exact ``Z'_n`` for single-site replacements of one environment on a slab."""

    def __init__(self, env: Environment, slab: SlabSpec):
        self.env, self.slab = env, slab
        self.chain = compile_chain(env, slab.domain())
        self.A = self.chain.system_matrix()
        self.f = rhs_vector("drift-e1", self.chain)
        self.g, self.residual, _ = solve_system(self.A, self.f)
        self.o = int(slab.domain().index_of(slab.origin.reshape(1, -1))[0])
        self._lu = spla.splu(self.A.tocsc())
        n = self.chain.n_states
        e = np.zeros(n)
        e[self.o] = 1.0
        self.a = self._lu.solve(e, trans="T")  # row of A^-1 at the origin
        self._cnb = self._neighbour_inverse()

    @property
    def Z(self) -> float:
        return float(self.g[self.o])

    @property
    def sites(self) -> np.ndarray:
        return self.chain.sites

    def _neighbour_inverse(self) -> np.ndarray:
        """``(A^-1)[nbr[n, k], n]``, zero where the step exits."""
        nbr = self.chain.nbr
        n = nbr.shape[0]
        out = np.zeros(nbr.shape)
        inside = nbr >= 0
        for lo in range(0, n, _BLOCK):
            hi = min(n, lo + _BLOCK)
            rhs = np.zeros((n, hi - lo))
            rhs[np.arange(lo, hi), np.arange(hi - lo)] = 1.0
            cols = self._lu.solve(rhs)
            rows = np.where(inside[lo:hi], nbr[lo:hi], 0)
            vals = cols[rows, np.arange(hi - lo)[:, None]]
            out[lo:hi] = np.where(inside[lo:hi], vals, 0.0)
        return out

    def resampled_Z(self, new_probs: np.ndarray) -> np.ndarray:
        """``Z'_n`` when site ``n`` alone receives ``new_probs[n]``, for every ``n``."""
        ch = self.chain
        inside = ch.nbr >= 0
        w = np.where(inside, new_probs - ch.probs, 0.0)
        phi = (new_probs[:, 0] - new_probs[:, 1]) - self.f
        wg = (w * np.where(inside, self.g[np.where(inside, ch.nbr, 0)], 0.0)).sum(axis=1)
        wc = (w * self._cnb).sum(axis=1)
        return self.Z + self.a * phi + self.a * (wg + phi * wc) / (1.0 - wc)


def resampled_Z_warm(env: Environment, slab: SlabSpec, site, fresh_seed: int,
                     x0=None, tol: float = RESIDUAL_TARGET) -> float:
    """``Z`` after :func:`resample_site`, by an iterative solve started at ``x0``."""
    env2 = resample_site(env, site, fresh_seed)
    ch = compile_chain(env2, slab.domain())
    x, _, _ = solve_system(ch.system_matrix(), rhs_vector("drift-e1", ch), x0=x0, tol=tol)
    o = int(slab.domain().index_of(slab.origin.reshape(1, -1))[0])
    return float(x[o])


@dataclass
class EfronSteinEstimate:
    Z: float
    v_plus: float
    v_minus: float
    inner_replicates: int
    n_sites: int
    per_site_plus: np.ndarray = field(repr=False)
    per_site_minus: np.ndarray = field(repr=False)


def efron_stein(env: Environment, slab: SlabSpec, inner_replicates: int = 8, seed: int = 0,
                solve_cap: int = DEFAULT_SOLVE_CAP) -> EfronSteinEstimate:
    """``V_+ / V_-``: sum over every slab site of the mean ``(Z - Z'_n)_+^2 / _-^2``.

    Replicate ``k`` draws the fresh vector of every site from
    ``derive_seed(seed, "es", k)``; this is exactly the vector
    ``resample_site(env, site, derive_seed(seed, "es", k))`` would install.
    """
    if inner_replicates < 1:
        raise ValueError("inner_replicates must be >= 1")
    n = slab.n_states
    if n * inner_replicates > solve_cap:
        raise ValueError(f"{n} sites x {inner_replicates} replicates exceeds the cap {solve_cap}")
    rs = ResamplingSolver(env, slab)
    plus = np.zeros(n)
    minus = np.zeros(n)
    for k in range(inner_replicates):
        newp = draw_site_vectors(env.law, derive_seed(seed, "es", k), rs.sites)
        diff = rs.Z - rs.resampled_Z(newp)
        plus += np.maximum(diff, 0.0) ** 2
        minus += np.minimum(diff, 0.0) ** 2
    plus /= inner_replicates
    minus /= inner_replicates
    return EfronSteinEstimate(rs.Z, float(plus.sum()), float(minus.sum()), inner_replicates,
                              n, plus, minus)


@dataclass
class EfronSteinEnsemble:
    law: EnvironmentLaw
    slab: SlabSpec
    seeds: np.ndarray
    Z: np.ndarray
    v_plus: np.ndarray
    v_minus: np.ndarray
    inner_replicates: int

    def z_ensemble(self) -> ZEnsemble:
        return ZEnsemble(self.law, self.slab, self.seeds, self.Z, math.nan)

    def to_dict(self) -> dict:
        return {"n_env": int(self.Z.size), "inner_replicates": self.inner_replicates,
                "mean_Z": float(self.Z.mean()), "mean_v_plus": float(self.v_plus.mean()),
                "mean_v_minus": float(self.v_minus.mean())}


def _es_task(args):
    law, slab, env_seed, reps, es_seed = args
    env = sample_environment(law, slab.domain(), env_seed)
    e = efron_stein(env, slab, reps, es_seed)
    return e.Z, e.v_plus, e.v_minus


def efron_stein_ensemble(law: EnvironmentLaw, slab: SlabSpec, n_env: int,
                         inner_replicates: int = 8, seed: int = 0,
                         workers: int = 1) -> EfronSteinEnsemble:
    seeds = np.array([_env_seed(seed, i) for i in range(n_env)], dtype=np.uint64)
    tasks = [(law, slab, int(s), inner_replicates, derive_seed(seed, "es-env", i))
             for i, s in enumerate(seeds)]
    out = np.array(pmap(_es_task, tasks, workers), dtype=float).reshape(n_env, 3)
    return EfronSteinEnsemble(law, slab, seeds, out[:, 0], out[:, 1], out[:, 2],
                              inner_replicates)


# ----------------------------------------------------------------------
# Moment inequality
# ----------------------------------------------------------------------
def bblm_inequality(ens: EfronSteinEnsemble, q: float) -> dict:
    """Both sides of ``||Z-EZ||_q <= sqrt(c q)(||V+||_{q/2}^{1/2} + ||V-||_{q/2}^{1/2})``.

    Norms are plug-in sample averages (biased for few inner replicates; the
    bias is not corrected).  The standard error of the margin comes from a
    joint delta method over the per-environment triples.
    """
    if q < 2:
        raise ValueError("q must be >= 2")
    n = ens.Z.size
    zc = ens.Z - ens.Z.mean()
    X = np.stack([np.abs(zc) ** q, ens.v_plus ** (q / 2), ens.v_minus ** (q / 2)], axis=1)
    m = X.mean(axis=0)
    cov = np.cov(X, rowvar=False) / n if n > 1 else np.full((3, 3), np.nan)
    k = bblm_factor(q)
    lhs = m[0] ** (1 / q)
    tp, tm = m[1] ** (1 / q), m[2] ** (1 / q)
    rhs = k * (tp + tm)

    def dpow(x):  # derivative of x^(1/q)
        return x ** (1 / q - 1) / q if x > 0 else 0.0

    grad = np.array([-dpow(m[0]), k * dpow(m[1]), k * dpow(m[2])])
    se = float(math.sqrt(max(grad @ cov @ grad, 0.0)))
    margin = float(rhs - lhs)
    return {"q": q, "factor": k, "lhs": float(lhs), "rhs": float(rhs),
            "norm_v_plus_half": float(tp), "norm_v_minus_half": float(tm),
            "margin": margin, "margin_se": se, "n_env": int(n),
            "inner_replicates": ens.inner_replicates,
            "holds_within_3se": bool(margin + 3 * se >= 0) if np.isfinite(se) else margin >= 0,
            "note": "plug-in norms; small-replicate bias not corrected"}


def bblm_check(law: EnvironmentLaw, slab: SlabSpec, q, n_env: int, inner_replicates: int = 8,
               seed: int = 0, workers: int = 1) -> dict:
    qs = [q] if np.isscalar(q) else list(q)
    ens = efron_stein_ensemble(law, slab, n_env, inner_replicates, seed, workers)
    var, var_se = _mean_se((ens.Z - ens.Z.mean()) ** 2)
    vp, vp_se = _mean_se(ens.v_plus)
    return {"ensemble": ens.to_dict(),
            "efron_stein": {"var_Z": var, "var_Z_se": var_se, "E_v_plus": vp,
                            "E_v_plus_se": vp_se},
            "rows": [bblm_inequality(ens, float(qq)) for qq in qs]}


# ----------------------------------------------------------------------
# Mean lower bound
# ----------------------------------------------------------------------
def mean_bound_check(law: EnvironmentLaw, slab: SlabSpec, n_env: int, seed: int = 0,
                     workers: int = 1, c6: float = 1.0, ensemble: ZEnsemble | None = None) -> dict:
    """``E[Z] / (d lambda L^2)`` against ``2/5``.

    The hypothesis ``lambda >= c6 sigma_2^2 (eps log L + 1/L)`` involves an
    unknown constant; both sides are reported at ``c6`` for reference only.
    A precomputed ``ensemble`` is used instead of sampling when given.
    """
    lam = lambda_of(law)
    d, L = slab.d, slab.L
    if not lam > 0:
        return {"status": "precondition-fails", "lambda": lam,
                "note": "needs lambda > 0; no verdict"}
    ens = sample_Z(law, slab, n_env, seed, workers) if ensemble is None else ensemble
    n_env = ens.n
    scale = d * lam * L * L
    ratio = ens.mean / scale
    se = ens.std_error / scale if n_env > 1 else 0.0
    s2 = sigma_of(law, 1)
    eps = epsilon_of(law)
    hyp_rhs = c6 * s2 ** 2 * (eps * math.log(L) + 1.0 / L)
    return {"status": "holds" if ratio + 3 * se >= 0.4 else "fails",
            "ratio": ratio, "ratio_se": se, "threshold": 0.4, "mean_Z": ens.mean,
            "n_env": n_env, "lambda": lam,
            "hypothesis_reference": {"c6": c6, "lhs": lam, "rhs": hyp_rhs,
                                     "holds_at_reference_c6": lam >= hyp_rhs,
                                     "label": "reference-only"}}


# ----------------------------------------------------------------------
# Tails
# ----------------------------------------------------------------------
def tail_check(ens: ZEnsemble, r: int, u_grid, c7: float = 1.0,
               sigma_2r: float | None = None, min_samples: int = 1000) -> list[dict]:
    """Per ``u``: empirical ``P(|Z - EZ| >= u)``, the empirical-moment Markov
    reference ``m_2r / u^2r`` and the bound ``(c7 r)^r L (sigma_2r/u)^2r``.

    The bound-form column has an unknown constant and carries no verdict.
    """
    if r < 2 or r % 2:
        raise ValueError("r must be an even integer >= 2")
    if ens.n < min_samples:
        raise ValueError(f"tail check needs at least {min_samples} samples, got {ens.n}")
    dev = np.abs(ens.centered())
    n = dev.size
    m2r = float(np.mean(dev ** (2 * r)))
    s = sigma_of(ens.law, r) if sigma_2r is None else sigma_2r
    L = ens.slab.L
    rows = []
    for u in np.asarray(u_grid, dtype=float):
        tail = float(np.mean(dev >= u))
        se = math.sqrt(max(tail * (1 - tail), 1.0 / n) / n)
        if u > 0:
            markov = m2r / u ** (2 * r)
            bound = (c7 * r) ** r * L * (s / u) ** (2 * r)
        else:
            markov = bound = math.inf
        rows.append({"u": float(u), "empirical_tail": tail, "tail_se": se,
                     "markov_reference": markov, "bound_form": bound, "c7": c7,
                     "consistent": bool(tail <= markov + 3 * se)})
    return rows


def sigma_scaling_sweep(d: int, slab: SlabSpec, r: int, n_env: int, seed: int = 0,
                        amplitudes=(0.005, 0.01, 0.02), lam: float = 0.0,
                        workers: int = 1) -> list[dict]:
    """``||Z - EZ||_2r`` against ``sigma_2r`` across two-point amplitudes."""
    rows = []
    for a in amplitudes:
        law = make_law("two-point", d, {"a": a, "lam": lam})
        ens = sample_Z(law, slab, n_env, derive_seed(seed, "sweep", str(a)), workers)
        nrm, se = ens.central_moment(2 * r)
        s = sigma_of(law, r)
        rows.append({"a": a, "sigma_2r": s, "central_norm": nrm, "central_norm_se": se,
                     "ratio": nrm / s if s > 0 else math.nan})
    return rows
