"""Quenched walks: exit records, exit functionals on boxes and local boxes.

Walk ``i`` of a batch draws its steps from a SplitMix64 stream seeded by
``(walk_seed, i)``, so splitting a batch into chunks, or running chunks in
different processes, reproduces the same trajectories.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np
import scipy.sparse.linalg as spla

from .env import Environment, EnvironmentLaw, sample_environment
from .lattice import (BACK, FACE_NAMES, FRONT, SIDE, Chain, LatticeDomain, compile_chain,
                      directions)
from .parallel import pmap
from .rng import derive_seed

CHUNK = 1 << 16
DEFAULT_STATE_CAP = 200_000
CENSORED = -1


@dataclass
class ExitRecord:
    exit_site: tuple
    exit_time: int
    exit_face: str
    censored: bool


@dataclass
class MCEstimate:
    mean: float
    std_error: float
    n: int
    censored_fraction: float = 0.0
    extras: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std_error": self.std_error, "n": self.n,
                "censored_fraction": self.censored_fraction, **self.extras}


# ----------------------------------------------------------------------
# numba kernel
# ----------------------------------------------------------------------
@nb.njit(cache=True, inline="always")
def _mix(z):
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


@nb.njit(cache=True)
def _walk_kernel(nbr, cum, f, start, seed, first, n_walks, step_cap,
                 exit_state, exit_dir, steps, fsum):
    gamma = np.uint64(0x9E3779B97F4A7C15)
    k_dirs = nbr.shape[1]
    for w in range(n_walks):
        state = _mix(seed ^ _mix(np.uint64(first + w) + gamma))
        i = start
        t = 0
        acc = 0.0
        ex_dir = -1
        while t < step_cap:
            state += gamma
            u = (_mix(state) >> np.uint64(11)) * (1.0 / 9007199254740992.0)
            k = 0
            while k < k_dirs - 1 and u >= cum[i, k]:
                k += 1
            acc += f[i]
            t += 1
            j = nbr[i, k]
            if j < 0:
                ex_dir = k
                break
            i = j
        exit_state[w] = i
        exit_dir[w] = ex_dir
        steps[w] = t
        fsum[w] = acc


@dataclass
class ExitBatch:
    """Per-walk exit data of one batch, in walk-index order."""

    exit_state: np.ndarray
    exit_dir: np.ndarray
    steps: np.ndarray
    fsum: np.ndarray
    face: np.ndarray  # FRONT/BACK/SIDE, or CENSORED

    @property
    def n(self) -> int:
        return self.steps.size

    def face_counts(self) -> dict[str, int]:
        out = {name: int(np.sum(self.face == k)) for k, name in enumerate(FACE_NAMES)}
        out["censored"] = int(np.sum(self.face == CENSORED))
        return out


def _run_chunk(args):
    nbr, cum, f, start, seed, first, n, cap = args
    es = np.empty(n, np.int64)
    ed = np.empty(n, np.int64)
    st = np.empty(n, np.int64)
    fs = np.empty(n, np.float64)
    _walk_kernel(nbr, cum, f, start, np.uint64(seed), first, n, cap, es, ed, st, fs)
    return es, ed, st, fs


def simulate_exits(chain: Chain, start_index: int, n_walks: int, walk_seed: int,
                   step_cap: int, f=None, workers: int = 1) -> ExitBatch:
    """Run ``n_walks`` walks from one state until they leave the chain's domain."""
    if step_cap < 1:
        raise ValueError("step_cap must be >= 1")
    fv = np.zeros(chain.n_states) if f is None else np.ascontiguousarray(f, dtype=np.float64)
    tasks = [(chain.nbr, chain.cum, fv, int(start_index), int(walk_seed), first,
              min(CHUNK, n_walks - first), int(step_cap))
             for first in range(0, n_walks, CHUNK)]
    parts = pmap(_run_chunk, tasks, workers)
    es, ed, st, fs = (np.concatenate([p[i] for p in parts]) for i in range(4))
    face = np.full(n_walks, CENSORED, dtype=np.int64)
    done = ed >= 0
    face[done] = -1 - chain.nbr[es[done], ed[done]]
    return ExitBatch(es, ed, st, fs, face)


def default_step_cap(domain: LatticeDomain, start) -> int:
    """100 times the simple-walk mean exit time of the enclosing e1-slab.

    The e1 coordinate of the simple walk moves with probability 1/d, so from
    ``x`` between absorbing levels ``a < x < b`` it needs ``d (x-a)(b-x)``
    steps on average; the box is inside that slab, so this bounds its own
    exit time from above.
    """
    a, b = domain.lo[0] - 1, domain.hi[0] + 1
    x = int(np.asarray(start).ravel()[0])
    return 100 * max(1, math.ceil(domain.d * (x - a) * (b - x)))


def _start_index(domain: LatticeDomain, start) -> int:
    idx = int(domain.index_of(np.asarray(start).reshape(1, -1))[0])
    if idx < 0:
        raise ValueError(f"start {tuple(np.ravel(start))} is not in the domain")
    return idx


def run_until_exit(env: Environment, start, domain: LatticeDomain,
                   step_cap: int | None = None, walk_seed: int = 0) -> ExitRecord:
    """Follow one quenched trajectory from ``start`` to its first exit."""
    chain = compile_chain(env, domain)
    cap = default_step_cap(domain, start) if step_cap is None else int(step_cap)
    b = simulate_exits(chain, _start_index(domain, start), 1, walk_seed, cap)
    if b.face[0] == CENSORED:
        return ExitRecord(tuple(int(v) for v in chain.sites[b.exit_state[0]]),
                          int(b.steps[0]), "censored", True)
    site = chain.sites[b.exit_state[0]] + directions(domain.d)[b.exit_dir[0]]
    return ExitRecord(tuple(int(v) for v in site), int(b.steps[0]),
                      FACE_NAMES[b.face[0]], False)


# ----------------------------------------------------------------------
# Exact absorbing-chain exit laws
# ----------------------------------------------------------------------
def exact_exit_probabilities(env: Environment, domain: LatticeDomain,
                             state_cap: int = DEFAULT_STATE_CAP) -> dict[str, np.ndarray]:
    """Probability of each exit face from every state of ``domain``."""
    if domain.n_states > state_cap:
        raise ValueError(f"{domain.n_states} states exceed the cap {state_cap}")
    chain = compile_chain(env, domain)
    lu = spla.splu(chain.system_matrix().tocsc())
    return {FACE_NAMES[k]: lu.solve(chain.exit_mass(k)) for k in (FRONT, BACK, SIDE)}


# ----------------------------------------------------------------------
# Box exit functionals
# ----------------------------------------------------------------------
def quenched_qB(env: Environment, M: int, n_walks: int, seed: int,
                step_cap: int | None = None) -> MCEstimate:
    """Frequency of leaving the box anywhere but its front face."""
    box = LatticeDomain.box(M, env.d)
    origin = np.zeros(env.d, dtype=np.int64)
    cap = default_step_cap(box, origin) if step_cap is None else step_cap
    b = simulate_exits(compile_chain(env, box), _start_index(box, origin), n_walks, seed, cap)
    return _fraction(b.face, (BACK, SIDE))


def _fraction(face, hits) -> MCEstimate:
    n_all = face.size
    ok = face != CENSORED
    n = int(ok.sum())
    if n == 0:
        return MCEstimate(math.nan, math.nan, 0, 1.0)
    x = np.isin(face[ok], hits).astype(float)
    m = float(x.mean())
    se = float(x.std(ddof=1) / math.sqrt(n)) if n > 1 else math.nan
    return MCEstimate(m, se, n, 1.0 - n / n_all)


def rho_of_q(q: float) -> float:
    """``q / (1 - q)``; infinite when the back exit is certain."""
    if not 0.0 <= q <= 1.0:
        raise ValueError("q must lie in [0, 1]")
    return math.inf if q == 1.0 else q / (1.0 - q)


def _env_face_counts(args):
    law, domain, env_seed, walk_seed, n_walks, cap = args
    env = sample_environment(law, domain, env_seed)
    origin = np.zeros(domain.d, dtype=np.int64)
    b = simulate_exits(compile_chain(env, domain), _start_index(domain, origin),
                       n_walks, walk_seed, cap)
    c = b.face_counts()
    return [c["front"], c["back"], c["side"], c["censored"]]


def annealed_face_counts(law: EnvironmentLaw, domain: LatticeDomain, n_env: int,
                         n_walks: int, seed: int, step_cap: int | None = None,
                         workers: int = 1) -> np.ndarray:
    """Per-environment exit counts from the origin, columns front/back/side/censored."""
    origin = np.zeros(domain.d, dtype=np.int64)
    cap = default_step_cap(domain, origin) if step_cap is None else int(step_cap)
    tasks = [(law, domain, derive_seed(seed, "env", i), derive_seed(seed, "walk", i),
              n_walks, cap) for i in range(n_env)]
    return np.array(pmap(_env_face_counts, tasks, workers), dtype=np.int64).reshape(n_env, 4)


def estimate_from_counts(counts: np.ndarray, hit_cols) -> MCEstimate:
    """Annealed frequency of the faces in ``hit_cols`` with an environment-level SE."""
    decided = counts[:, :3].sum(axis=1)
    n_tot = int(counts.sum())
    cens = float(counts[:, 3].sum() / n_tot) if n_tot else 0.0
    use = decided > 0
    if not use.any():
        return MCEstimate(math.nan, math.nan, 0, cens)
    frac = counts[use][:, hit_cols].sum(axis=1) / decided[use]
    n_env = int(use.sum())
    mean = float(frac.mean())
    if n_env > 1:
        se = float(frac.std(ddof=1) / math.sqrt(n_env))
    else:
        se = math.sqrt(mean * (1 - mean) / decided[use][0])
    return MCEstimate(mean, se, int(decided.sum()), cens)


def estimate_backexit_prob(law: EnvironmentLaw, M: int, n_env: int, n_walks: int,
                           seed: int, step_cap: int | None = None,
                           workers: int = 1) -> MCEstimate:
    """Annealed ``P_0(X_{T_B} not on the front face)`` over fresh environments.

    The standard error is computed between environments, so it carries both
    the environment and the walk randomness.
    """
    box = LatticeDomain.box(M, law.dimension)
    counts = annealed_face_counts(law, box, n_env, n_walks, seed, step_cap, workers)
    est = estimate_from_counts(counts, [BACK, SIDE])
    est.extras["face_counts"] = dict(zip(("front", "back", "side", "censored"),
                                         map(int, counts.sum(axis=0))))
    return est


# ----------------------------------------------------------------------
# Local displacement and the probability p
# ----------------------------------------------------------------------
def local_box(x, L: int, h: int) -> LatticeDomain:
    """Sites reachable before ``S``: ``|y1 - x1| < L`` and ``|yj - xj| < h``."""
    x = np.asarray(x, dtype=np.int64).ravel()
    bounds = [(x[0] - L + 1, x[0] + L - 1)] + [(v - h + 1, v + h - 1) for v in x[1:]]
    return LatticeDomain.rect(bounds)


def _exit_position_rhs(chain: Chain) -> np.ndarray:
    e = directions(chain.domain.d)
    out = np.zeros((chain.n_states, chain.domain.d))
    exits = chain.nbr < 0
    for k in range(e.shape[0]):
        m = exits[:, k]
        out[m] += chain.probs[m, k, None] * (chain.sites[m] + e[k])
    return out


def displacement_delta(env: Environment, x, L: int, h: int, mode: str = "exact",
                       n_walks: int = 100_000, seed: int = 0,
                       state_cap: int = DEFAULT_STATE_CAP, return_se: bool = False):
    """``E_x[X_S] - x`` for the local stopping time ``S``.

    ``mode="exact"`` solves the absorbing chain once per coordinate;
    ``mode="mc"`` averages simulated exit points (pass ``return_se`` to also
    get per-coordinate standard errors).
    """
    dom = local_box(x, L, h)
    x = np.asarray(x, dtype=np.int64).ravel()
    if mode == "exact":
        if dom.n_states > state_cap:
            raise ValueError(f"{dom.n_states} states exceed the exact-solve cap {state_cap}")
        chain = compile_chain(env, dom)
        lu = spla.splu(chain.system_matrix().tocsc())
        rhs = _exit_position_rhs(chain)
        i0 = _start_index(dom, x)
        delta = np.array([lu.solve(rhs[:, c])[i0] for c in range(dom.d)]) - x
        return (delta, np.zeros(dom.d)) if return_se else delta
    if mode != "mc":
        raise ValueError("mode must be 'exact' or 'mc'")
    chain = compile_chain(env, dom)
    b = simulate_exits(chain, _start_index(dom, x), n_walks, seed, default_step_cap(dom, x))
    ok = b.face != CENSORED
    pos = chain.sites[b.exit_state[ok]] + directions(dom.d)[b.exit_dir[ok]] - x
    delta = pos.mean(axis=0)
    return (delta, pos.std(axis=0, ddof=1) / math.sqrt(ok.sum())) if return_se else delta


def _delta_e1_many(env, sites, L, h):
    out = np.empty(len(sites))
    for i, z in enumerate(sites):
        dom = local_box(z, L, h)
        chain = compile_chain(env, dom)
        lu = spla.splu(chain.system_matrix().tocsc())
        u = lu.solve(_exit_position_rhs(chain)[:, 0])
        out[i] = u[_start_index(dom, z)] - z[0]
    return out


def subgrid(sites: np.ndarray, stride: int) -> np.ndarray:
    """Deterministic subgrid: sites whose coordinates are all multiples of ``stride``."""
    if stride <= 1:
        return sites
    return sites[np.all(np.mod(sites, stride) == 0, axis=1)]


def choose_stride(n_sites: int, d: int, max_sites: int) -> int:
    """Smallest stride whose subgrid is expected to hold at most ``max_sites`` sites."""
    if n_sites <= max_sites:
        return 1
    return int(math.ceil((n_sites / max_sites) ** (1.0 / d)))


def slab_sets(M: int, H: float, d: int) -> list[np.ndarray]:
    """Masks over the box sites for each ``{y in B : |y.e_j| < H}``, j = 2..d."""
    sites = LatticeDomain.box(M, d).sites()
    return sites, [np.abs(sites[:, j]) < H for j in range(1, d)]


def _p_env(args):
    law, env_seed, M, L, H, h, thresh, stride = args
    d = law.dimension
    env = sample_environment(law, None, env_seed)
    sites, masks = slab_sets(M, H, d)
    union = np.any(np.stack(masks), axis=0)
    keep = union & np.all(np.mod(sites, stride) == 0, axis=1) if stride > 1 else union
    vals = _delta_e1_many(env, sites[keep], L, h)
    full = np.full(sites.shape[0], np.inf)
    full[keep] = vals
    return [bool(full[m & keep].min() >= thresh) if (m & keep).any() else True
            for m in masks]


def estimate_p(law: EnvironmentLaw, M: int, L: int, H: float, h: int, gamma1: float,
               n_env: int, seed: int, site_subsample: int | None = None,
               max_sites: int = 100_000, workers: int = 1) -> MCEstimate:
    """Environment frequency that ``min Delta.e1 >= gamma1 L`` over each slab set.

    The minimum runs over a deterministic subgrid (all sites when there are
    at most ``max_sites``, or ``site_subsample`` as an explicit stride).  The
    result is the smallest frequency over j >= 2; ``extras["coverage"]`` is
    the fraction of sites actually examined.
    """
    if gamma1 < 0:
        raise ValueError("gamma1 must be >= 0")
    d = law.dimension
    sites, masks = slab_sets(M, H, d)
    n_sites = int(np.any(np.stack(masks), axis=0).sum())
    stride = site_subsample if site_subsample is not None else choose_stride(n_sites, d, max_sites)
    used = int((np.any(np.stack(masks), axis=0) & np.all(np.mod(sites, stride) == 0, axis=1)).sum())
    tasks = [(law, derive_seed(seed, "env", i), M, L, H, h, gamma1 * L, stride)
             for i in range(n_env)]
    ind = np.array(pmap(_p_env, tasks, workers), dtype=float).reshape(n_env, d - 1)
    freq = ind.mean(axis=0)
    j = int(np.argmin(freq))
    m = float(freq[j])
    se = float(ind[:, j].std(ddof=1) / math.sqrt(n_env)) if n_env > 1 else math.nan
    return MCEstimate(m, se, n_env, 0.0,
                      {"coverage": used / n_sites, "stride": stride, "argmin_axis": j + 2,
                       "per_axis": freq.tolist()})
