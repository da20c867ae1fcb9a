"""End-to-end acceptance criteria, one test per criterion.

Each test records a single PASS/FAIL line (printed in the terminal summary)
with the measured quantities, then asserts.
"""
from __future__ import annotations

import contextlib
import filecmp
import math
import os
import time
import warnings

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import (dense_slab_green, drift_expected_exit_time, mp_delta_inverse,
                     mp_lemma1)
from rwrelab import cli
from rwrelab.concentration import bblm_check, mean_bound_check
from rwrelab.criterion import delta_inverse, lemma1_evaluate
from rwrelab.env import make_law, moment_report, sample_environment, ssrw_law
from rwrelab.green import (SlabSpec, TruncationWarning, gamma_weight_sum, green_apply_exact,
                           green_apply_mc, hat_rho)
from rwrelab.lattice import LatticeDomain
from rwrelab.rng import derive_seed
from rwrelab.walk import BACK, FRONT, annealed_face_counts

pytestmark = pytest.mark.acceptance


@contextlib.contextmanager
def criterion(number: int, title: str, budget_s: float):
    info: dict = {}
    t0 = time.perf_counter()
    try:
        yield info
    except BaseException as exc:
        dt = time.perf_counter() - t0
        ACCEPTANCE_LINES.append(f"criterion {number}: FAIL  {title}  ({dt:.1f}s)  "
                                f"{type(exc).__name__}: {str(exc).splitlines()[0][:160]}")
        raise
    dt = time.perf_counter() - t0
    detail = ", ".join(f"{k}={v}" for k, v in info.items())
    ok = dt < budget_s
    ACCEPTANCE_LINES.append(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  "
                            f"({dt:.1f}s / {budget_s:.0f}s)  {detail}")
    assert ok, f"runtime {dt:.1f}s exceeds {budget_s}s"


def test_c01_ssrw_slab_exit_time():
    with criterion(1, "SSRW slab exit time = d L(L+1)", 30) as info:
        worst, worst_dense = 0.0, 0.0
        for d in (2, 4):
            env = sample_environment(ssrw_law(d), None, 0)
            for L in (2, 5, 10):
                slab = SlabSpec(L, 4, d)
                g = green_apply_exact(env, slab, "ones").at(slab.origin)
                exact = d * L * (L + 1)
                worst = max(worst, abs(g - exact) / exact)
                dense = dense_slab_green(env, L, 4, d, "ones")[(0,) * d]
                worst_dense = max(worst_dense, abs(g - dense) / dense)
        info["max_rel_err"] = f"{worst:.1e}"
        info["max_rel_err_dense"] = f"{worst_dense:.1e}"
        assert worst < 1e-9
        assert worst_dense < 1e-9


def test_c02_green_exact_vs_mc_and_dense():
    with criterion(2, "Green exact vs MC (3 SE) and dense (1e-10)", 300) as info:
        law = make_law("two-point", 4, {"a": 0.02})
        slab = SlabSpec(3, 4, 4)
        assert slab.n_states <= 2000
        zs, worst_dense = [], 0.0
        for i in range(20):
            env = sample_environment(law, slab.domain(), derive_seed(2024, "env", i))
            gf = green_apply_exact(env, slab, "drift-e1")
            exact = gf.at(slab.origin)
            dense = dense_slab_green(env, 3, 4, 4)
            worst_dense = max(worst_dense,
                              max(abs(gf.at(np.array(s)) - v) for s, v in dense.items()))
            mc = green_apply_mc(env, slab, "drift-e1", 10 ** 6, derive_seed(2024, "mc", i))
            zs.append((exact - mc.values[0]) / mc.std_error[0])
        zs = np.abs(zs)
        info["max_|z|"] = f"{zs.max():.2f}"
        info["max_abs_err_dense"] = f"{worst_dense:.1e}"
        assert zs.max() <= 3
        assert worst_dense <= 1e-10


def test_c03_hat_rho_cap():
    with criterion(3, "hat_rho <= 3 over 1000 envs (eps L < 3/4); SSRW = 1", 300) as info:
        worst = 0.0
        for d, M, L, a in ((2, 2, 3, 0.03), (4, 2, 2, 0.02)):
            law = make_law("two-point", d, {"a": a})
            assert law.epsilon * L < 0.75
            for i in range(1000):
                env = sample_environment(law, None, derive_seed(77, d, i))
                worst = max(worst, hat_rho(env, M, L, 4))
        ss = [hat_rho(sample_environment(ssrw_law(d), None, 0), 2, 3, 4) for d in (2, 4)]
        info["max_hat_rho"] = f"{worst:.4f}"
        info["ssrw"] = ss
        assert worst <= 3
        assert ss == [1.0, 1.0]


def test_c04_formula_fidelity():
    with criterion(4, "delta^-1 and box bound vs mpmath (1e-12)", 10) as info:
        rng = np.random.default_rng(4)
        worst = 0.0
        for _ in range(100):
            M = float(rng.uniform(10, 5000))
            L = float(rng.uniform(1, 50))
            g = float(rng.uniform(0.01, 2))
            h = float(rng.uniform(1, 100))
            H = float(rng.uniform(h, 10 * M * M))
            ours = delta_inverse(M, L, H, h, g)
            ref = mp_delta_inverse(M, L, H, h, g)
            worst = max(worst, float(abs(ours - ref) / ref))

            d = int(rng.choice([2, 3, 4, 5]))
            kappa = 1 / (4 * d)
            Mb = float(rng.uniform(2, 200))
            Lb = float(rng.uniform(1, 20))
            Hb = float(rng.uniform(1, Mb ** 2))
            rho = float(rng.uniform(0, 0.99))
            p = float(rng.uniform(0, 1))
            delta = float(rng.uniform(1.01, 1e6))
            lv = lemma1_evaluate(rho, p, Mb, Lb, Hb, kappa, delta, d)
            ref = mp_lemma1(rho, p, Mb, Lb, Hb, kappa, delta, d)
            worst = max(worst, float(abs(lv.value - ref) / ref))
        hand1 = delta_inverse(320, 10, 256, 1, 1)  # HL/(2hM) = 4
        hand2 = delta_inverse(3200, 10, 3200, 1, 1)  # HL/(2hM) - 4 = 1
        e1 = math.exp(-1) + 320
        e2 = math.exp(-10) + 3200 * math.exp(-10)
        info["max_rel_err"] = f"{worst:.1e}"
        info["hand"] = f"{hand1:.6f},{hand2:.6f}"
        assert worst <= 1e-12
        assert abs(hand1 - e1) / e1 <= 1e-12
        assert abs(hand2 - e2) / e2 <= 1e-12


def _moment_chain_laws():
    return [
        make_law("two-point", 4, {"a": 0.01}),
        make_law("two-point", 2, {"a": 0.05, "lam": 0.02}),
        make_law("isotropic-plus-drift", 4, {"a": 0.01, "lam": 0.005, "base": "uniform"}),
        make_law("isotropic-plus-drift", 5, {"a": 0.01, "lam": 0.0, "base": "rademacher"}),
        make_law("custom-table", 2, {"table": [[0.3, 0.2, 0.25, 0.25], [0.2, 0.3, 0.25, 0.25],
                                               [0.25, 0.25, 0.3, 0.2]],
                                     "weights": [0.5, 0.25, 0.25]}),
    ]


def test_c05_moment_chain():
    with criterion(5, "sigma_2 <= (2d)^((r-1)/r) sigma_2r <= ... eps (3 SE)", 60) as info:
        worst = -math.inf
        for law in _moment_chain_laws():
            d = law.dimension
            exact = law.support() is not None
            rep = moment_report(law, rs=(1, 2, 4), n_samples=None if exact else 400_000,
                                seed=11)
            s2, se2 = rep.sigma[2], rep.standard_errors["2"]
            for r in (1, 2, 4):
                s, se = rep.sigma[2 * r], rep.standard_errors[str(2 * r)]
                c = (2 * d) ** ((r - 1) / r)
                mid = c * s
                top = c * (2 * d) ** (1 / (2 * r)) * law.epsilon
                tol1 = 3 * math.hypot(se2, c * se) + 1e-12 * mid
                tol2 = 3 * c * se + 1e-12 * top
                assert s2 <= mid + tol1, (law, r)
                assert mid <= top + tol2, (law, r)
                worst = max(worst, (s2 - mid) / max(mid, 1e-300), (mid - top) / top)
        info["worst_relative_slack"] = f"{worst:.3g}"


def test_c06_bblm_inequality():
    with criterion(6, "BBLM moment inequality, q in {2,4}, d in {2,4}", 900) as info:
        rows = []
        for d in (2, 4):
            law = make_law("two-point", d, {"a": 0.02})
            rep = bblm_check(law, SlabSpec(2, 4, d), [2, 4], 500, 8, seed=6)
            for row in rep["rows"]:
                rows.append(row)
                info[f"d{d}q{int(row['q'])}"] = (f"{row['lhs']:.4f}<={row['rhs']:.4f}"
                                                 f"(se {row['margin_se']:.4f})")
        assert all(r["margin"] + 3 * r["margin_se"] >= 0 for r in rows)


def test_c07_mean_lower_bound():
    with criterion(7, "E[Z]/(d lambda L^2) >= 2/5", 600) as info:
        lam, L, d = 0.02, 4, 4
        slab = SlabSpec(L, 4, d)
        det = mean_bound_check(make_law("deterministic-drift", d, {"lam": lam}), slab, 3)
        oracle = lam * float(drift_expected_exit_time(lam, L, d)) / (d * lam * L * L)
        assert det["ratio_se"] == 0.0
        assert abs(det["ratio"] - oracle) <= 1e-10 * oracle
        assert det["ratio"] >= 0.4
        law = make_law("two-point", d, {"a": 0.005, "lam": lam})
        sto = mean_bound_check(law, slab, 200, seed=7)
        info["deterministic_ratio"] = f"{det['ratio']:.6f} (oracle {oracle:.6f}, "\
                                      f"small-drift limit {L * (L + 1) / L ** 2})"
        info["stochastic_ratio"] = f"{sto['ratio']:.4f}+-{sto['ratio_se']:.4f}"
        assert sto["ratio"] + 3 * sto["ratio_se"] >= 0.4


def test_c08_green_weight_scaling():
    with criterion(8, "SSRW Green weight sums: d=4 slope, d=5 saturation", 600) as info:
        alpha4 = 1 - 1 / 4
        Ls = [3, 5, 8, 12]
        with warnings.catch_warnings():
            warnings.simplefilter("error", TruncationWarning)
            s4 = [gamma_weight_sum(L, 8 * L, alpha4, 4, truncation_check=None) for L in Ls]
            coarse = [gamma_weight_sum(L, 6 * L, alpha4, 4, truncation_check=None) for L in Ls]
        assert max(abs(a - b) / a for a, b in zip(s4, coarse)) < 0.01
        slope = float(np.polyfit(np.log(Ls), np.log(s4), 1)[0])
        target = 4 * (1 - alpha4) / (2 - alpha4)
        alpha5 = 1 - 1 / (4 * 4)
        s5 = [gamma_weight_sum(L, 6 * L, alpha5, 5, truncation_check=None) for L in (8, 12)]
        s5_coarse = [gamma_weight_sum(L, 5 * L, alpha5, 5, truncation_check=None)
                     for L in (8, 12)]
        assert max(abs(a - b) / a for a, b in zip(s5, s5_coarse)) < 0.01
        change = abs(s5[1] - s5[0]) / s5[0]
        # same solves at r = 4, reported only: the d=5 sum keeps growing there
        s5_r4 = [gamma_weight_sum(L, 6 * L, alpha4, 5, truncation_check=None) for L in (8, 12)]
        info["d4_slope"] = f"{slope:.4f} (target {target:.4f})"
        info["d5_change"] = f"{100 * change:.2f}% at alpha={alpha5}"
        info["d5_change_alpha_0.75"] = f"{100 * (s5_r4[1] - s5_r4[0]) / s5_r4[0]:.2f}%"
        assert abs(slope - target) <= 0.25 * target
        assert change < 0.10


_DET_CONFIGS = [
    {"command": "walk", "seed": 9, "law": {"kind": "two-point", "d": 2, "params": {"a": 0.03}},
     "domain": {"type": "box", "M": 3}, "walk": {"n_env": 16, "n_walks": 3000}},
    {"command": "green", "seed": 9, "law": {"kind": "two-point", "d": 2, "params": {"a": 0.03}},
     "slab": {"L": 3, "W": 4}, "green": {"method": "mc", "n_walks": 200000}},
    {"command": "concentration", "seed": 9,
     "law": {"kind": "two-point", "d": 2, "params": {"a": 0.02, "lam": 0.01}},
     "slab": {"L": 2, "W": 4},
     "concentration": {"n_env": 64, "min_tail_samples": 10, "q": [2, 4]}},
    {"command": "criterion", "seed": 9,
     "law": {"kind": "two-point", "d": 2, "params": {"a": 0.02, "lam": 0.05}},
     "criterion": {"r": 2, "caps": {"n_env": 8, "n_walks": 500}}},
]


def test_c09_determinism_across_workers(tmp_path):
    with criterion(9, "byte-identical archives for workers 1/4/16", 120) as info:
        for cfg in _DET_CONFIGS:
            paths = []
            for w in (1, 4, 16):
                code, path, _ = cli.run(dict(cfg, deterministic=True), str(tmp_path / f"w{w}"), w)
                assert code == 0, cfg["command"]
                paths.append(path)
            names = sorted(os.listdir(paths[0]))
            for other in paths[1:]:
                assert sorted(os.listdir(other)) == names
                match, mismatch, errors = filecmp.cmpfiles(paths[0], other, names, shallow=False)
                assert not mismatch and not errors, (cfg["command"], mismatch, errors)
        info["configs"] = len(_DET_CONFIGS)


def test_c10_front_back_symmetry():
    with criterion(10, "front/back exits agree for e1-symmetric laws (3 SE)", 120) as info:
        dom = LatticeDomain.box(3, 2)
        for name, law in (("two-point", make_law("two-point", 2, {"a": 0.03})),
                          ("isotropic", make_law("isotropic-plus-drift", 2,
                                                 {"a": 0.03, "lam": 0.0}))):
            counts = annealed_face_counts(law, dom, 100, 1000, seed=10)
            n = counts[:, :3].sum(axis=1)
            diff = (counts[:, FRONT] - counts[:, BACK]) / n
            mean, se = diff.mean(), diff.std(ddof=1) / math.sqrt(diff.size)
            front = (counts[:, FRONT] / n).mean()
            back = (counts[:, BACK] / n).mean()
            info[name] = f"front {front:.4f} back {back:.4f} diff {mean:+.4f}+-{se:.4f}"
            assert abs(mean) <= 3 * se
