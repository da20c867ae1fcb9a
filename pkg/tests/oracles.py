"""Independent reference computations used by the tests.

Nothing here goes through the package's chain compiler or solvers: the dense
oracle enumerates sites with ``itertools`` and wraps coordinates itself, the
drift oracle is the classical gambler's ruin, and the formula oracles use
mpmath at 50 digits.
"""
from __future__ import annotations

import itertools

import mpmath as mp
import numpy as np

mp.mp.dps = 50


def dense_slab_green(env, L, W, d, f="drift-e1", center=None):
    """``G_U[f]`` on the periodic slab by a dense solve; returns {site: value}."""
    c = [0] * d if center is None else list(center)
    ranges = [range(-L, L)] + [range(c[j] - W // 2, c[j] + W // 2) for j in range(1, d)]
    sites = list(itertools.product(*ranges))
    index = {s: i for i, s in enumerate(sites)}
    n = len(sites)
    A = np.eye(n)
    b = np.zeros(n)
    for i, s in enumerate(sites):
        w = env.vector(np.array(s))
        for axis in range(d):
            for sgn, k in ((1, 2 * axis), (-1, 2 * axis + 1)):
                y = list(s)
                y[axis] += sgn
                if axis == 0:
                    if not -L <= y[0] < L:
                        continue
                else:
                    lo = c[axis] - W // 2
                    y[axis] = lo + (y[axis] - lo) % W
                A[i, index[tuple(y)]] -= w[k]
        if f == "drift-e1":
            b[i] = w[0] - w[1]
        elif f == "ones":
            b[i] = 1.0
        else:
            raise ValueError(f)
    x = np.linalg.solve(A, b)
    return {s: x[i] for i, s in enumerate(sites)}


def drift_expected_exit_time(lam, L, d):
    """Exit time from ``{-L <= x1 < L}`` under constant drift, exactly.

    The e1 coordinate is a lazy walk: +1 w.p. ``1/2d + lam/2``, -1 w.p.
    ``1/2d - lam/2``.  Gambler's ruin on ``{-L-1, ..., L}`` started at 0.
    """
    lam = mp.mpf(lam)
    p = mp.mpf(1) / (2 * d) + lam / 2
    q = mp.mpf(1) / (2 * d) - lam / 2
    move = p + q
    k, N = L + 1, 2 * L + 1  # start distance from the lower end, interval length
    if lam == 0:
        t = mp.mpf(k * (N - k))
    else:
        pp, qq = p / move, q / move
        s = qq / pp
        t = k / (qq - pp) - N / (qq - pp) * (1 - s ** k) / (1 - s ** N)
    return t / move


def mp_delta_inverse(M, L, H, h, g):
    M, L, H, h, g = map(mp.mpf, (M, L, H, h, g))
    t = g * M / (32 * L)
    gap = max(H * L / (2 * h * M) - 4 / g, mp.mpf(0))
    return mp.e ** (-t) + (10 * M / (g * L)) * mp.e ** (-t * gap ** 2)


def mp_lemma1(rho, p, M, L, H, kappa, delta, d):
    rho, p, M, L, H, kappa, delta = map(mp.mpf, (rho, p, M, L, H, kappa, delta))
    mbar = mp.floor(M ** 3 / (32 * H))
    first = 2 * rho ** (M / (2 * L)) / (1 - mp.sqrt(rho))
    if mbar > 0:
        shift = 7 * M / mbar * mp.log(1 / kappa) / mp.log(delta)
        expo = -(mbar / 2) * max(p - shift, mp.mpf(0)) ** 2
    else:
        expo = mp.mpf(0)
    second = 2 * d * kappa ** (-M / 2) * mp.e ** expo
    return kappa ** -2 * (first + second)
