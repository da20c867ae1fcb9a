"""Finite lattice domains and the absorbing chains they induce.

Every domain here is a product of integer intervals, possibly with periodic
identification along the transverse axes.  That keeps site enumeration,
membership and neighbour lookup vectorised mixed-radix arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
import scipy.sparse as sp

FRONT, BACK, SIDE = 0, 1, 2
FACE_NAMES = ("front", "back", "side")


def directions(d: int) -> np.ndarray:
    """Unit vectors in canonical order: axis ascending, + before -."""
    e = np.zeros((2 * d, d), dtype=np.int64)
    for i in range(d):
        e[2 * i, i] = 1
        e[2 * i + 1, i] = -1
    return e


def box_transverse_bound(M: int) -> int:
    """Largest integer t with t < M**3 / 4."""
    return (int(M) ** 3 - 1) // 4


@dataclass(frozen=True)
class LatticeDomain:
    """A finite region of Z^d given by inclusive per-axis bounds.

    Periodic axes wrap around, so a site on such an axis is always "inside";
    only non-periodic axes produce exits.  Use the ``box``, ``slab`` and
    ``rect`` constructors rather than building one directly.
    """

    shape: str
    d: int
    lo: tuple[int, ...]
    hi: tuple[int, ...]
    periodic: tuple[bool, ...]
    params: dict[str, Any] = field(default_factory=dict, compare=False)

    @classmethod
    def box(cls, M: int, d: int) -> "LatticeDomain":
        M = int(M)
        if M < 1 or d < 1:
            raise ValueError("box needs M >= 1 and d >= 1")
        t = box_transverse_bound(M)
        lo = (-M + 1,) + (-t,) * (d - 1)
        hi = (M - 1,) + (t,) * (d - 1)
        return cls("box", d, lo, hi, (False,) * d, {"M": M})

    @classmethod
    def slab(cls, L: int, W: int, d: int, center=None) -> "LatticeDomain":
        L, W = int(L), int(W)
        if L < 1:
            raise ValueError("slab half-width L must be >= 1")
        if W < 2 or W % 2:
            raise ValueError("slab transverse period W must be even and >= 2")
        c = [0] * d if center is None else [int(v) for v in center]
        lo = (-L,) + tuple(c[j] - W // 2 for j in range(1, d))
        hi = (L - 1,) + tuple(c[j] + W // 2 - 1 for j in range(1, d))
        return cls("slab", d, lo, hi, (False,) + (True,) * (d - 1),
                   {"L": L, "W": W, "center": tuple(c)})

    @classmethod
    def rect(cls, bounds) -> "LatticeDomain":
        lo = tuple(int(b[0]) for b in bounds)
        hi = tuple(int(b[1]) for b in bounds)
        if any(h < l for l, h in zip(lo, hi)):
            raise ValueError("rect bounds must satisfy lo <= hi on every axis")
        return cls("rect", len(lo), lo, hi, (False,) * len(lo), {})

    # ------------------------------------------------------------------
    @property
    def extents(self) -> np.ndarray:
        return np.array(self.hi, dtype=np.int64) - np.array(self.lo, dtype=np.int64) + 1

    @property
    def n_states(self) -> int:
        return int(np.prod(self.extents))

    @property
    def strides(self) -> np.ndarray:
        ext = self.extents
        s = np.ones(self.d, dtype=np.int64)
        for i in range(self.d - 2, -1, -1):
            s[i] = s[i + 1] * ext[i + 1]
        return s

    def sites(self) -> np.ndarray:
        """All sites in canonical order (axis 1 slowest), shape ``(n, d)``."""
        axes = [np.arange(l, h + 1, dtype=np.int64) for l, h in zip(self.lo, self.hi)]
        grid = np.meshgrid(*axes, indexing="ij")
        return np.stack([g.ravel() for g in grid], axis=1)

    def fold(self, x) -> np.ndarray:
        x = np.array(x, dtype=np.int64, copy=True)
        lo = np.array(self.lo, dtype=np.int64)
        ext = self.extents
        for i in range(self.d):
            if self.periodic[i]:
                x[..., i] = lo[i] + np.mod(x[..., i] - lo[i], ext[i])
        return x

    def index_of(self, x) -> np.ndarray:
        """Canonical state index of each site, -1 where the site is outside."""
        x = self.fold(np.atleast_2d(x))
        lo = np.array(self.lo, dtype=np.int64)
        hi = np.array(self.hi, dtype=np.int64)
        inside = np.all((x >= lo) & (x <= hi), axis=1)
        idx = (x - lo) @ self.strides
        return np.where(inside, idx, -1)

    def contains(self, x) -> bool:
        return bool(self.index_of(np.asarray(x).reshape(1, -1))[0] >= 0)

    def exit_face(self, y) -> np.ndarray:
        """Face label for points ``y`` lying just outside the domain."""
        y = np.atleast_2d(y)
        face = np.full(y.shape[0], SIDE, dtype=np.int64)
        face[y[:, 0] > self.hi[0]] = FRONT
        face[y[:, 0] < self.lo[0]] = BACK
        return face

    def to_dict(self) -> dict:
        if self.shape == "box":
            return {"shape": "box", "d": self.d, "M": self.params["M"]}
        if self.shape == "slab":
            return {"shape": "slab", "d": self.d, "L": self.params["L"],
                    "W": self.params["W"], "center": list(self.params["center"])}
        return {"shape": "rect", "d": self.d,
                "bounds": [[l, h] for l, h in zip(self.lo, self.hi)]}

    @classmethod
    def from_dict(cls, spec: dict, d: int | None = None) -> "LatticeDomain":
        d = int(spec.get("d", d))
        kind = spec["shape"]
        if kind == "box":
            return cls.box(spec["M"], d)
        if kind == "slab":
            return cls.slab(spec["L"], spec["W"], d, spec.get("center"))
        if kind == "rect":
            return cls.rect(spec["bounds"])
        raise ValueError(f"unknown domain shape {kind!r}")


@dataclass
class Chain:
    """Quenched walk restricted to a domain, with exits encoded as negatives.

    ``nbr[i, k]`` is the state reached from state ``i`` by direction ``k`` or
    ``-1 - face`` when that step leaves the domain.  ``cum`` holds the
    cumulative transition probabilities with the last column pinned to 1.
    """

    domain: LatticeDomain
    sites: np.ndarray
    probs: np.ndarray
    nbr: np.ndarray
    cum: np.ndarray

    @property
    def n_states(self) -> int:
        return self.sites.shape[0]

    def transient_matrix(self) -> sp.csr_matrix:
        n, k = self.nbr.shape
        rows = np.repeat(np.arange(n), k)
        cols = self.nbr.ravel()
        vals = self.probs.ravel()
        keep = cols >= 0
        return sp.csr_matrix((vals[keep], (rows[keep], cols[keep])), shape=(n, n))

    def system_matrix(self) -> sp.csr_matrix:
        """``I - Q`` with ``Q`` the kernel restricted to transient states."""
        return (sp.identity(self.n_states, format="csr") - self.transient_matrix()).tocsr()

    def exit_mass(self, face: int) -> np.ndarray:
        """One-step probability of leaving through ``face`` from each state."""
        return np.where(self.nbr == -1 - face, self.probs, 0.0).sum(axis=1)


def compile_chain(env, domain: LatticeDomain) -> Chain:
    """Tabulate the quenched kernel of ``env`` on ``domain``."""
    sites = domain.sites()
    probs = env.vectors(sites)
    e = directions(domain.d)
    nbr = np.empty((sites.shape[0], 2 * domain.d), dtype=np.int64)
    for k in range(2 * domain.d):
        y = sites + e[k]
        idx = domain.index_of(y)
        out = idx < 0
        if out.any():
            idx[out] = -1 - domain.exit_face(y[out])
        nbr[:, k] = idx
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = 1.0
    return Chain(domain, sites, probs, nbr, cum)
