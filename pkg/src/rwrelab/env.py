"""Single-site environment laws, their moment functionals, and i.i.d. fields.

A transition vector is a length-``2d`` float array in canonical direction
order (``+e1, -e1, +e2, -e2, ...``).  Laws turn uniform draws into such
vectors; an :class:`Environment` keys those draws on ``(seed, site)`` so the
field can be evaluated lazily, in any order, anywhere on the lattice.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping

import numpy as np
from scipy.special import logsumexp

from .lattice import LatticeDomain, directions
from .rng import site_keys, uniforms

DEFAULT_MC_SAMPLES = 1_000_000
_SUM_TOL = 1e-12


@dataclass(frozen=True)
class Direction:
    axis: int  # 1-based
    sign: int

    @staticmethod
    def all(d: int) -> list["Direction"]:
        return [Direction(i + 1, s) for i in range(d) for s in (1, -1)]

    @property
    def index(self) -> int:
        return 2 * (self.axis - 1) + (0 if self.sign > 0 else 1)

    def vector(self, d: int) -> np.ndarray:
        v = np.zeros(d, dtype=np.int64)
        v[self.axis - 1] = self.sign
        return v


def as_mapping(vec) -> dict[Direction, float]:
    vec = np.asarray(vec, dtype=float)
    return {e: float(vec[e.index]) for e in Direction.all(vec.size // 2)}


def check_transition_vectors(vecs, epsilon: float | None = None) -> None:
    """Raise ``ValueError`` unless every row is a probability vector.

    With ``epsilon`` given, also enforce the perturbation band
    ``|w(e) - 1/(2d)| <= epsilon/(4d)``.
    """
    vecs = np.atleast_2d(np.asarray(vecs, dtype=float))
    n_dir = vecs.shape[1]
    if np.any(vecs < 0) or np.any(vecs > 1):
        raise ValueError("transition probabilities must lie in [0, 1]")
    if np.any(np.abs(vecs.sum(axis=1) - 1.0) > _SUM_TOL):
        raise ValueError("transition probabilities must sum to 1")
    if epsilon is not None:
        band = epsilon / (2 * n_dir) + 1e-15
        if np.any(np.abs(vecs - 1.0 / n_dir) > band):
            raise ValueError("transition vector leaves the epsilon band")


class LawError(ValueError):
    pass


# ----------------------------------------------------------------------
# Laws
# ----------------------------------------------------------------------
def _rebuild(cls, args, mapping):
    return cls(*args, MappingProxyType(mapping))


@dataclass(frozen=True, eq=False)
class EnvironmentLaw:
    """Base class; concrete kinds override the hooks below."""

    dimension: int
    params: Mapping[str, object]
    kind = "abstract"

    # hooks ------------------------------------------------------------
    n_uniforms = 0

    def _transform(self, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def mean_vector(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def epsilon(self) -> float:
        raise NotImplementedError

    def support(self):
        """``(values, probs)`` for finitely supported laws, else ``None``."""
        return None

    # shared -----------------------------------------------------------
    @property
    def n_dir(self) -> int:
        return 2 * self.dimension

    @property
    def is_deterministic(self) -> bool:
        sup = self.support()
        return sup is not None and np.ptp(sup[0], axis=0).max() == 0.0

    def transform(self, u: np.ndarray) -> np.ndarray:
        if self.n_uniforms == 0:
            return np.broadcast_to(self.mean_vector(), (u.shape[0], self.n_dir)).copy()
        return self._transform(u)

    def draw(self, keys) -> np.ndarray:
        keys = np.asarray(keys, dtype=np.uint64)
        return self.transform(uniforms(keys, self.n_uniforms))

    def sample(self, n: int, seed: int) -> np.ndarray:
        """``n`` i.i.d. vectors, reproducible from ``seed``."""
        idx = np.arange(n, dtype=np.int64).reshape(-1, 1)
        return self.draw(site_keys(seed, idx))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "d": self.dimension, "params": dict(self.params)}

    def __eq__(self, other):
        return isinstance(other, EnvironmentLaw) and self.to_dict() == other.to_dict()

    def __hash__(self):
        return hash(repr(self.to_dict()))

    def __repr__(self):
        return f"EnvironmentLaw({self.kind}, d={self.dimension}, {dict(self.params)})"

    def __reduce__(self):
        # mapping proxies do not pickle; rebuild from a plain dict
        return _rebuild, (type(self), (self.dimension,), dict(self.params))


class DeterministicDrift(EnvironmentLaw):
    kind = "deterministic-drift"

    def mean_vector(self):
        d = self.dimension
        v = np.full(2 * d, 1.0 / (2 * d))
        lam = float(self.params["lam"])
        v[0] += lam / 2
        v[1] -= lam / 2
        return v

    @property
    def epsilon(self):
        return 2 * self.dimension * abs(float(self.params["lam"]))

    def support(self):
        return self.mean_vector().reshape(1, -1), np.ones(1)


class TwoPoint(EnvironmentLaw):
    """``w(+-e1) = 1/(2d) +- lam/2 +- a*S`` with ``S = +-1`` equiprobable."""

    kind = "two-point"
    n_uniforms = 1

    def _values(self, s):
        d = self.dimension
        a, lam = float(self.params["a"]), float(self.params.get("lam", 0.0))
        v = np.full((s.size, 2 * d), 1.0 / (2 * d))
        v[:, 0] += lam / 2 + a * s
        v[:, 1] -= lam / 2 + a * s
        return v

    def _transform(self, u):
        return self._values(np.where(u[:, 0] < 0.5, 1.0, -1.0))

    def mean_vector(self):
        return self._values(np.zeros(1))[0]

    @property
    def epsilon(self):
        a, lam = float(self.params["a"]), float(self.params.get("lam", 0.0))
        return 4 * self.dimension * (abs(a) + abs(lam) / 2)

    def support(self):
        return self._values(np.array([1.0, -1.0])), np.array([0.5, 0.5])


class IsotropicPlusDrift(EnvironmentLaw):
    """``w(e) = p(e) + (lam/2) e.e1`` with an exchangeable base vector ``p``.

    ``p = 1/(2d) + a (V - mean(V))`` for ``2d`` i.i.d. symmetric variates
    ``V`` that are uniform on [-1, 1] (``base="uniform"``) or random signs
    (``base="rademacher"``).  Centering keeps the total mass at 1.
    """

    kind = "isotropic-plus-drift"

    @property
    def n_uniforms(self):
        return 2 * self.dimension

    def _base(self, v):
        a, lam = float(self.params["a"]), float(self.params.get("lam", 0.0))
        d = self.dimension
        w = 1.0 / (2 * d) + a * (v - v.mean(axis=1, keepdims=True))
        w[:, 0] += lam / 2
        w[:, 1] -= lam / 2
        return w

    def _transform(self, u):
        if self.params.get("base", "uniform") == "rademacher":
            return self._base(np.where(u < 0.5, 1.0, -1.0))
        return self._base(2.0 * u - 1.0)

    def mean_vector(self):
        return self._base(np.zeros((1, self.n_dir)))[0]

    @property
    def epsilon(self):
        a, lam = float(self.params["a"]), float(self.params.get("lam", 0.0))
        d = self.dimension
        # sup |V_e - mean V| = 2 - 1/d, reached when V_e = 1 and the rest are -1
        return 4 * d * (abs(a) * (2 - 1 / d) + abs(lam) / 2)

    def support(self):
        if self.params.get("base", "uniform") != "rademacher":
            return None
        n = self.n_dir
        signs = np.array(list(itertools.product((1.0, -1.0), repeat=n)))
        return self._base(signs), np.full(signs.shape[0], 0.5 ** n)


class CustomTable(EnvironmentLaw):
    kind = "custom-table"
    n_uniforms = 1

    @property
    def _table(self):
        return np.asarray(self.params["table"], dtype=float)

    @property
    def _weights(self):
        w = self.params.get("weights")
        t = self._table
        w = np.full(t.shape[0], 1.0 / t.shape[0]) if w is None else np.asarray(w, dtype=float)
        return w / w.sum()

    def _transform(self, u):
        cw = np.cumsum(self._weights)
        cw[-1] = 1.0
        return self._table[np.searchsorted(cw, u[:, 0], side="right")]

    def mean_vector(self):
        return self._weights @ self._table

    @property
    def epsilon(self):
        return 4 * self.dimension * float(np.abs(self._table - 1.0 / self.n_dir).max())

    def support(self):
        return self._table, self._weights


_KINDS = {c.kind: c for c in (DeterministicDrift, TwoPoint, IsotropicPlusDrift, CustomTable)}
KINDS = tuple(_KINDS)


def _canonical_params(kind: str, params: Mapping) -> dict:
    p = dict(params)
    if "lambda" in p:
        p["lam"] = p.pop("lambda")
    required = {
        "deterministic-drift": ("lam",),
        "two-point": ("a",),
        "isotropic-plus-drift": ("a",),
        "custom-table": ("table",),
    }[kind]
    missing = [k for k in required if k not in p]
    if missing:
        raise LawError(f"{kind} law needs parameters {missing}")
    if kind in ("two-point", "isotropic-plus-drift"):
        p.setdefault("lam", 0.0)
        if float(p["a"]) < 0:
            raise LawError("amplitude a must be >= 0")
    if kind == "isotropic-plus-drift":
        p.setdefault("base", "uniform")
        if p["base"] not in ("uniform", "rademacher"):
            raise LawError("base must be 'uniform' or 'rademacher'")
    if kind == "custom-table":
        p["table"] = [list(map(float, row)) for row in p["table"]]
        if p.get("weights") is not None:
            p["weights"] = list(map(float, p["weights"]))
    return p


def make_law(kind: str, dimension: int, parameters: Mapping | None = None) -> EnvironmentLaw:
    """Build and validate a single-site law.

    Raises :class:`LawError` for unknown kinds, a non-integer dimension below
    2, or parameters that could push an entry outside the band that keeps
    the walk uniformly elliptic (``epsilon >= 1``).
    """
    if kind not in _KINDS:
        raise LawError(f"unknown law kind {kind!r}; expected one of {KINDS}")
    if isinstance(dimension, bool) or int(dimension) != dimension or dimension < 2:
        raise LawError("dimension must be an integer >= 2")
    d = int(dimension)
    params = MappingProxyType(_canonical_params(kind, parameters or {}))
    law = _KINDS[kind](d, params)
    if kind == "custom-table":
        t = law._table
        if t.ndim != 2 or t.shape[1] != 2 * d:
            raise LawError(f"table rows must have {2 * d} entries")
        w = law.params.get("weights")
        if w is not None and (len(w) != t.shape[0] or min(w) < 0 or sum(w) <= 0):
            raise LawError("weights must be non-negative, one per table row")
        try:
            check_transition_vectors(t)
        except ValueError as exc:
            raise LawError(str(exc)) from None
    if not law.epsilon < 1.0:
        raise LawError(f"perturbation bound epsilon={law.epsilon:.6g} must be < 1; "
                       "entries would leave the uniformly elliptic band")
    return law


def law_from_dict(block: Mapping) -> EnvironmentLaw:
    return make_law(block["kind"], block["d"], block.get("params", {}))


def ssrw_law(d: int) -> EnvironmentLaw:
    return make_law("deterministic-drift", d, {"lam": 0.0})


# ----------------------------------------------------------------------
# Moment functionals
# ----------------------------------------------------------------------
def epsilon_of(law: EnvironmentLaw) -> float:
    return float(law.epsilon)


def _mc_batches(law, n, seed, batch=1 << 17):
    done = 0
    idx0 = 0
    while done < n:
        m = min(batch, n - done)
        idx = np.arange(idx0, idx0 + m, dtype=np.int64).reshape(-1, 1)
        yield law.draw(site_keys(seed, idx))
        done += m
        idx0 += m


def _lambda_mc(law, n, seed):
    s1 = s2 = 0.0
    for v in _mc_batches(law, n, seed):
        x = v[:, 0] - v[:, 1]
        s1 += x.sum()
        s2 += (x * x).sum()
    mean = s1 / n
    var = max(s2 / n - mean * mean, 0.0) * n / max(n - 1, 1)
    return mean, math.sqrt(var / n)


def lambda_of(law: EnvironmentLaw, n_samples: int | None = None, seed: int = 0) -> float:
    """Annealed e1-drift ``E[w(e1) - w(-e1)]``.

    Exact unless ``n_samples`` is given, in which case a Monte Carlo mean is
    returned (use :func:`moment_report` for its standard error).
    """
    if n_samples is None:
        m = law.mean_vector()
        return float(m[0] - m[1])
    return _lambda_mc(law, n_samples, seed)[0]


def _log_moment_exact(law, r):
    values, probs = law.support()
    dev = np.abs(values - law.mean_vector())
    with np.errstate(divide="ignore"):
        logs = 2 * r * np.log(dev) + np.log(probs)[:, None]
    return logsumexp(logs)


def _sigma_mc(law, r, n, seed):
    mean = law.mean_vector()
    chunks = []
    for v in _mc_batches(law, n, seed):
        with np.errstate(divide="ignore"):
            chunks.append(logsumexp(2 * r * np.log(np.abs(v - mean)), axis=1))
    ls = np.concatenate(chunks)
    if not np.isfinite(ls).any():
        return 0.0, 0.0
    top = ls[np.isfinite(ls)].max()
    s = np.exp(ls - top)  # scaled per-sample sum over directions
    m = s.mean()
    se_m = s.std(ddof=1) / math.sqrt(n) if n > 1 else 0.0
    sigma = math.exp((math.log(m) + top) / (2 * r))
    return sigma, sigma * se_m / (2 * r * m)


def sigma_of(law: EnvironmentLaw, r: int, n_samples: int | None = None, seed: int = 0) -> float:
    """``(sum_e E[(w(e) - E w(e))^(2r)])^(1/(2r))``.

    Exact for finitely supported laws (evaluated in log space, so very large
    ``r`` is fine); Monte Carlo otherwise or whenever ``n_samples`` is given.
    """
    if int(r) != r or r < 1:
        raise ValueError("r must be a positive integer")
    r = int(r)
    if n_samples is None and law.support() is not None:
        lm = _log_moment_exact(law, r)
        return 0.0 if not np.isfinite(lm) else float(math.exp(lm / (2 * r)))
    return _sigma_mc(law, r, n_samples or DEFAULT_MC_SAMPLES, seed)[0]


@dataclass
class MomentReport:
    epsilon: float
    lambda_: float
    sigma: dict[int, float]
    sample_count: int
    standard_errors: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "lambda": self.lambda_,
            "sigma": {str(k): v for k, v in self.sigma.items()},
            "sample_count": self.sample_count,
            "standard_errors": dict(self.standard_errors),
        }


def moment_report(law: EnvironmentLaw, rs=(1, 2, 4), n_samples: int | None = None,
                  seed: int = 0, force_mc: bool = False) -> MomentReport:
    """Moments with standard errors; ``sigma`` is keyed by the even order 2r.

    Exact values (zero standard error, ``sample_count == 0``) are used when
    the law allows it and ``force_mc`` is off.
    """
    exact = law.support() is not None and not force_mc
    n = 0 if exact else (n_samples or DEFAULT_MC_SAMPLES)
    ses: dict[str, float] = {}
    if exact or not force_mc:
        lam, ses["lambda"] = lambda_of(law), 0.0
    else:
        lam, ses["lambda"] = _lambda_mc(law, n, seed)
    sig = {}
    for r in rs:
        if exact:
            sig[2 * r], ses[str(2 * r)] = sigma_of(law, r), 0.0
        else:
            sig[2 * r], ses[str(2 * r)] = _sigma_mc(law, int(r), n, seed)
    return MomentReport(law.epsilon, lam, sig, n, ses)


def isotropy_gap(law: EnvironmentLaw, n_samples: int | None = None, seed: int = 0) -> dict:
    """``Var w(e1) - Cov(w(e1), w(-e1))`` next to ``sigma_2`` and ``sigma_2**2``."""
    sup = law.support()
    if sup is not None and n_samples is None:
        v, p = sup
        c = v[:, :2] - p @ v[:, :2]
        var = float(p @ (c[:, 0] ** 2))
        cov = float(p @ (c[:, 0] * c[:, 1]))
        s2 = sigma_of(law, 1)
    else:
        v = law.sample(n_samples or DEFAULT_MC_SAMPLES, seed)
        cm = np.cov(v[:, 0], v[:, 1])
        var, cov = float(cm[0, 0]), float(cm[0, 1])
        s2 = float(np.sqrt(((v - law.mean_vector()) ** 2).sum(axis=1).mean()))
    gap = var - cov
    return {"gap": gap, "sigma_2": s2,
            "gap_over_sigma_2": gap / s2 if s2 > 0 else math.inf,
            "gap_over_sigma_2_sq": gap / s2 ** 2 if s2 > 0 else math.inf}


# ----------------------------------------------------------------------
# Environments
# ----------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class Environment:
    """An i.i.d. field keyed on ``(master_seed, site)`` plus sparse overrides.

    ``domain`` bounds the sites that user-facing queries accept; the field
    itself is defined on all of Z^d.
    """

    law: EnvironmentLaw
    domain: LatticeDomain | None
    master_seed: int
    overrides: Mapping[tuple, np.ndarray] = field(default_factory=lambda: MappingProxyType({}))

    @property
    def d(self) -> int:
        return self.law.dimension

    def __reduce__(self):
        return _rebuild, (type(self), (self.law, self.domain, self.master_seed),
                          dict(self.overrides))

    def vectors(self, sites) -> np.ndarray:
        sites = np.atleast_2d(np.asarray(sites, dtype=np.int64))
        if self.law.n_uniforms == 0:
            out = self.law.transform(np.empty((sites.shape[0], 0)))
        else:
            out = self.law.draw(site_keys(self.master_seed, sites))
        for site, vec in self.overrides.items():
            hit = np.all(sites == np.asarray(site), axis=1)
            if hit.any():
                out[hit] = vec
        return out

    def vector(self, site) -> np.ndarray:
        return self.vectors(np.asarray(site).reshape(1, -1))[0]

    def _check_site(self, site):
        if self.domain is not None and not self.domain.contains(site):
            raise ValueError(f"site {tuple(site)} is outside the environment domain")


def sample_environment(law: EnvironmentLaw, domain: LatticeDomain | None,
                       master_seed: int) -> Environment:
    return Environment(law, domain, int(master_seed))


def draw_site_vectors(law: EnvironmentLaw, fresh_seed: int, sites) -> np.ndarray:
    """The vectors :func:`resample_site` would install at ``sites``."""
    return law.draw(site_keys(fresh_seed, np.atleast_2d(sites)))


def resample_site(env: Environment, site, fresh_seed: int) -> Environment:
    """Return a copy of ``env`` with one independent fresh draw at ``site``."""
    site = tuple(int(v) for v in np.asarray(site).ravel())
    env._check_site(site)
    new = dict(env.overrides)
    new[site] = draw_site_vectors(env.law, fresh_seed, [site])[0]
    return Environment(env.law, env.domain, env.master_seed, MappingProxyType(new))


def local_drift(env: Environment, site) -> np.ndarray:
    """Mean one-step displacement ``sum_e w(x, e) e`` at ``site``."""
    env._check_site(np.asarray(site).ravel())
    w = env.vector(site)
    return w[0::2] - w[1::2]


def drift_e1(env: Environment, sites) -> np.ndarray:
    w = env.vectors(sites)
    return w[:, 0] - w[:, 1]


__all__ = [
    "Direction", "EnvironmentLaw", "Environment", "LawError", "MomentReport", "KINDS",
    "as_mapping", "check_transition_vectors", "directions", "draw_site_vectors",
    "drift_e1", "epsilon_of", "isotropy_gap", "lambda_of", "law_from_dict", "local_drift",
    "make_law", "moment_report", "resample_site", "sample_environment", "sigma_of",
    "ssrw_law",
]
