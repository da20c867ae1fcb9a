"""Slab Green operator, the hyperplane ratio functional, and simple-walk Green weights.

The slab ``{-L <= x.e1 < L}`` is infinite transversally; here the transverse
axes are identified periodically with an even period ``W``.  Convergence in
``W`` is checked by doubling, never assumed.
"""
from __future__ import annotations

import functools
import itertools
import math
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .env import Environment
from .lattice import Chain, LatticeDomain, compile_chain
from .walk import CENSORED, default_step_cap, simulate_exits, subgrid

RESIDUAL_TARGET = 1e-10
DEFAULT_STATE_CAP = 200_000


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


class DegenerateRatioError(ArithmeticError):
    """``1 + G/L <= 0`` at some hyperplane site."""


class TruncationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SlabSpec:
    L: int
    W: int
    d: int
    center: tuple | None = None

    def __post_init__(self):
        if self.L < 1:
            raise ValueError("L must be >= 1")
        if self.W < 2 or self.W % 2:
            raise ValueError("W must be even and >= 2")
        if self.d < 2:
            raise ValueError("d must be >= 2")

    def domain(self) -> LatticeDomain:
        return LatticeDomain.slab(self.L, self.W, self.d, self.center)

    @property
    def n_states(self) -> int:
        return 2 * self.L * self.W ** (self.d - 1)

    @property
    def origin(self) -> np.ndarray:
        """The site with ``x.e1 = 0`` at the transverse centre."""
        c = np.zeros(self.d, dtype=np.int64) if self.center is None else np.array(self.center)
        c = c.copy()
        c[0] = 0
        return c

    def to_dict(self) -> dict:
        out = {"L": self.L, "W": self.W, "d": self.d}
        if self.center is not None:
            out["center"] = list(self.center)
        return out


@dataclass
class GreenField:
    slab: SlabSpec
    sites: np.ndarray
    values: np.ndarray
    method: str
    residual_norm: float | None = None
    std_error: np.ndarray | None = None
    iterations: int = 0

    def at(self, x) -> float:
        dom = self.slab.domain()
        xf = dom.fold(np.asarray(x).reshape(1, -1))[0]
        hit = np.flatnonzero(np.all(self.sites == xf, axis=1))
        if hit.size == 0:
            raise KeyError(f"no value at {tuple(np.ravel(x))}")
        return float(self.values[hit[0]])

    def header(self) -> dict:
        out = {"slab": self.slab.to_dict(), "method": self.method, "n_sites": int(self.sites.shape[0])}
        if self.residual_norm is not None:
            out["residual_norm"] = self.residual_norm
            out["iterations"] = self.iterations
        if self.std_error is not None:
            out["max_std_error"] = float(np.max(self.std_error))
        return out


# ----------------------------------------------------------------------
# Right-hand sides
# ----------------------------------------------------------------------
def rhs_vector(f, chain: Chain) -> np.ndarray:
    """Evaluate ``f`` on the chain's sites.

    ``f`` is ``"ones"``, ``"zeros"``, ``"drift-e1"``, ``("point", x)``, an
    array over the sites, or a callable ``f(sites, probs) -> array``.
    """
    n = chain.n_states
    if isinstance(f, str):
        if f == "ones":
            return np.ones(n)
        if f == "zeros":
            return np.zeros(n)
        if f == "drift-e1":
            return chain.probs[:, 0] - chain.probs[:, 1]
        raise ValueError(f"unknown function name {f!r}")
    if isinstance(f, tuple) and len(f) == 2 and f[0] == "point":
        out = np.zeros(n)
        idx = chain.domain.index_of(np.asarray(f[1]).reshape(1, -1))[0]
        if idx < 0:
            raise ValueError("point-mass site is outside the slab")
        out[idx] = 1.0
        return out
    if callable(f):
        return np.asarray(f(chain.sites, chain.probs), dtype=float).reshape(n)
    arr = np.asarray(f, dtype=float)
    if arr.shape != (n,):
        raise ValueError(f"f must have shape ({n},)")
    return arr


# ----------------------------------------------------------------------
# Solver
# ----------------------------------------------------------------------
def ilu_preconditioner(A):
    ilu = spla.spilu(A.tocsc(), drop_tol=1e-8, fill_factor=20)
    return spla.LinearOperator(A.shape, ilu.solve)


def solve_system(A, b, x0=None, precond=None, tol: float = RESIDUAL_TARGET,
                 max_refine: int = 6):
    """Solve ``A x = b`` by preconditioned GMRES until ``|b - A x|_inf <= tol``.

    Returns ``(x, residual_inf, iterations)``; raises :class:`SolverError`
    when the residual target is not reached within the iteration cap.
    """
    n = A.shape[0]
    if not np.any(b):
        return np.zeros(n), 0.0, 0
    M = precond if precond is not None else ilu_preconditioner(A)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    iters = [0]

    def count(_):
        iters[0] += 1

    cap = max(20, n // 20 + 10)
    res = np.inf
    for _ in range(max_refine):
        r = b - A @ x
        res = float(np.abs(r).max())
        if res <= tol:
            return x, res, iters[0]
        dx, _info = spla.gmres(A, r, rtol=1e-14, atol=0.05 * tol, restart=min(n, 60),
                               maxiter=cap, M=M, callback=count, callback_type="pr_norm")
        x = x + dx
    r = b - A @ x
    res = float(np.abs(r).max())
    if res <= tol:
        return x, res, iters[0]
    raise SolverError("slab solve did not reach the residual target", res)


def _check_cap(n, cap):
    if n > cap:
        raise ValueError(f"slab has {n} states, above the solver cap {cap}")


def green_apply_exact(env: Environment, slab: SlabSpec, f, tol: float = RESIDUAL_TARGET,
                      state_cap: int = DEFAULT_STATE_CAP) -> GreenField:
    """``G_U[f]`` at every slab site from the absorbing-chain equations."""
    _check_cap(slab.n_states, state_cap)
    chain = compile_chain(env, slab.domain())
    b = rhs_vector(f, chain)
    x, res, it = solve_system(chain.system_matrix(), b, tol=tol)
    return GreenField(slab, chain.sites, x, "exact", res, None, it)


def green_apply_mc(env: Environment, slab: SlabSpec, f, n_walks: int, seed: int,
                   starts=None, step_cap: int | None = None, workers: int = 1) -> GreenField:
    """Monte Carlo path sums of ``f`` until exit, per start site, with SEs."""
    dom = slab.domain()
    chain = compile_chain(env, dom)
    fv = rhs_vector(f, chain)
    starts = slab.origin.reshape(1, -1) if starts is None else np.atleast_2d(starts)
    starts = dom.fold(starts)
    vals, ses = [], []
    censored = 0
    for x in starts:
        cap = default_step_cap(dom, x) if step_cap is None else step_cap
        idx = int(dom.index_of(x.reshape(1, -1))[0])
        b = simulate_exits(chain, idx, n_walks, seed, cap, f=fv, workers=workers)
        ok = b.face != CENSORED
        censored += int((~ok).sum())
        s = b.fsum[ok]
        vals.append(float(s.mean()))
        ses.append(float(s.std(ddof=1) / math.sqrt(s.size)) if s.size > 1 else math.nan)
    if censored:
        warnings.warn(f"{censored} censored walks excluded from the Green estimate")
    return GreenField(slab, starts, np.array(vals), "mc", None, np.array(ses))


# ----------------------------------------------------------------------
# Hyperplane ratio
# ----------------------------------------------------------------------
def hyperplane_sites(M: int, d: int, stride: int = 1) -> np.ndarray:
    """``{x : x.e1 = 0, |x.e_j| < M^3/4}`` on a deterministic subgrid."""
    t = (int(M) ** 3 - 1) // 4
    axes = [np.array([0])] + [np.arange(-t, t + 1)] * (d - 1)
    grid = np.meshgrid(*axes, indexing="ij")
    sites = np.stack([g.ravel() for g in grid], axis=1).astype(np.int64)
    return subgrid(sites, stride)


def hat_rho_values(env: Environment, M: int, L: int, W: int = 4, stride: int = 1,
                   tol: float = RESIDUAL_TARGET) -> tuple[np.ndarray, np.ndarray]:
    """Hyperplane sites and ``G_U[d.e1]`` at each, one slab window per site."""
    sites = hyperplane_sites(M, env.d, stride)
    g = np.empty(sites.shape[0])
    for i, x in enumerate(sites):
        slab = SlabSpec(L, W, env.d, tuple(int(v) for v in x))
        g[i] = green_apply_exact(env, slab, "drift-e1", tol=tol).at(x)
    return sites, g


def ratio_from_green(g, L: float) -> np.ndarray:
    g = np.asarray(g, dtype=float)
    den = 1.0 + g / L
    if np.any(den <= 0):
        raise DegenerateRatioError("G_U[d.e1] <= -L at a hyperplane site")
    return (1.0 - g / L) / den


def hat_rho(env: Environment, M: int, L: int, W: int = 4,
            site_subsample: int = 1, tol: float = RESIDUAL_TARGET) -> float:
    """Supremum of ``(1 - G/L) / (1 + G/L)`` over the (sub)sampled hyperplane."""
    _, g = hat_rho_values(env, M, L, W, site_subsample, tol)
    return float(ratio_from_green(g, L).max())


# ----------------------------------------------------------------------
# Simple symmetric walk on the periodic slab, lumped by symmetry
# ----------------------------------------------------------------------
def _binom_table(n, k):
    t = np.zeros((n + 1, k + 1), dtype=np.int64)
    for a in range(n + 1):
        for b in range(min(a, k) + 1):
            t[a, b] = math.comb(a, b)
    return t


class SSRWSlabGreen:
    """Green function ``g(0, x)`` of the simple walk killed outside the slab.

    The periodic slab is invariant under reflecting or permuting transverse
    axes and so is the start site, so the chain is lumped onto orbit
    representatives (transverse coordinates folded to ``[0, W/2]`` and
    sorted).  The lumped kernel is reversible with respect to orbit sizes,
    which makes the weighted system symmetric positive definite and lets
    conjugate gradients solve it without ever storing the full slab.
    """

    def __init__(self, L: int, W: int, d: int, tol: float = 1e-12):
        SlabSpec(L, W, d)
        self.L, self.W, self.d = L, W, d
        k, h = d - 1, W // 2
        self._k, self._h = k, h
        self._binom = _binom_table(h + k + 1, k + 1)
        tup = np.array(list(itertools.combinations_with_replacement(range(h + 1), k)),
                       dtype=np.int64).reshape(-1, k)
        tup = tup[np.argsort(self._rank(tup))]
        self.tuples = tup
        nt = tup.shape[0]
        self.n_transverse = nt
        fact = np.array([math.factorial(i) for i in range(k + 1)])
        perms = np.full(nt, math.factorial(k), dtype=np.int64)
        for v in range(h + 1):
            perms //= fact[(tup == v).sum(axis=1)]
        free = ((tup != 0) & (tup != h)).sum(axis=1)
        self.orbit_t = perms * 2 ** free
        rows, cols = [], []
        for j in range(k):
            for step in (1, -1):
                t2 = tup.copy()
                t2[:, j] += step
                t2[t2 == -1] = 1
                t2[t2 == h + 1] = h - 1
                t2.sort(axis=1)
                rows.append(np.arange(nt))
                cols.append(self._rank(t2))
        rows, cols = np.concatenate(rows), np.concatenate(cols)
        self._Pt = sp.csr_matrix((np.full(rows.size, 1.0 / (2 * d)), (rows, cols)),
                                 shape=(nt, nt))
        self.values, self.residual, self.iterations = self._solve(tol)

    def _rank(self, t):
        s = t + np.arange(self._k)
        return sum(self._binom[s[:, i], i + 1] for i in range(self._k))

    def _apply(self, u):
        """``D (I - P) u`` on the lumped chain, u of shape (2L * nt,)."""
        n1, nt = 2 * self.L, self.n_transverse
        U = u.reshape(n1, nt)
        PU = (self._Pt @ U.T).T
        PU[1:] += U[:-1] / (2 * self.d)
        PU[:-1] += U[1:] / (2 * self.d)
        return ((U - PU) * self.orbit_t).ravel()

    def _solve(self, tol):
        n = 2 * self.L * self.n_transverse
        A = spla.LinearOperator((n, n), matvec=self._apply, dtype=float)
        b = np.zeros(n)
        b[self.L * self.n_transverse] = 1.0  # the origin is its own orbit
        it = [0]
        x, info = spla.cg(A, b, rtol=tol, atol=0.0, maxiter=20 * n,
                          callback=lambda _: it.__setitem__(0, it[0] + 1))
        res = float(np.abs(self._apply(x) - b).max())
        if info != 0 or res > RESIDUAL_TARGET:
            raise SolverError("simple-walk slab solve did not converge", res)
        return x.reshape(2 * self.L, self.n_transverse), res, it[0]

    def index(self, x) -> tuple[int, int]:
        x = np.asarray(x, dtype=np.int64).ravel()
        if not -self.L <= x[0] < self.L:
            raise ValueError("site is outside the slab")
        W, h = self.W, self._h
        t = np.mod(x[1:] + h, W) - h  # fold to [-W/2, W/2)
        t = np.sort(np.abs(t)).reshape(1, -1)
        return int(x[0] + self.L), int(self._rank(t)[0])

    def __call__(self, x) -> float:
        i, j = self.index(x)
        return float(self.values[i, j])

    def power_sum(self, p: float) -> float:
        """``sum_x g(0, x)^p`` over the whole periodic slab."""
        return float(np.sum(self.orbit_t[None, :] * np.abs(self.values) ** p))


@functools.lru_cache(maxsize=4)
def _ssrw_green(L, W, d):
    return SSRWSlabGreen(L, W, d)


def ssrw_green_slab(slab: SlabSpec, x) -> float:
    """Expected visits to ``x`` from the slab origin for the simple walk."""
    return _ssrw_green(slab.L, slab.W, slab.d)(x)


def gamma_weight_sum(L: int, W: int, alpha: float, d: int,
                     truncation_check: str | None = "double") -> float:
    """``sum_x g(0, x)^(2/(2-alpha))`` over the periodic slab of period ``W``.

    ``truncation_check="double"`` recomputes at ``2W`` and emits a
    :class:`TruncationWarning` if the sum moves by more than 1%;
    ``"halve"`` compares against ``W/2`` instead (cheaper, and conservative
    for a sum that converges monotonically in ``W``).
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    p = 2.0 / (2.0 - alpha)
    s = _ssrw_green(L, W, d).power_sum(p)
    if truncation_check:
        other = {"double": 2 * W, "halve": W // 2}[truncation_check]
        if other >= 2 and other % 2 == 0:
            s2 = SSRWSlabGreen(L, other, d).power_sum(p)
            change = abs(s2 - s) / s
            if change > 0.01:
                warnings.warn(TruncationWarning(
                    f"gamma weight sum changes by {100 * change:.2f}% between W={W} and "
                    f"W={other} (L={L}, d={d}); increase W"))
    return s
