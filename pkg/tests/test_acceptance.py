"""One test per acceptance criterion, each at its stated tolerance.

Each test records a PASS/FAIL line that the conftest prints after the run.
"""

import math
import time

import numpy as np

from microadam.cli import main
from microadam.compress import contraction_factor, topk_global
from microadam.lowrank_ef import nondecreasing_fraction, run_lowrank_ef
from microadam.optim import (
    AnalyticalState,
    BucketQuantizer,
    HyperParams,
    Identity,
    MicroAdamState,
    TopK,
    amsgrad_step,
    microadam_analytical_step,
    microadam_step,
    run,
)
from microadam.problems import quadratic, rosenbrock
from microadam.quantize import dequantize, quant_params, quantize_nearest, quantize_stochastic
from microadam.theory import (
    MODELS,
    CompressionParams,
    ef_bound,
    memory_footprints,
    quantizer_omega_worst,
    solve_mmax,
    topk_q,
    vhat_bound,
)
from microadam.window import GradientWindow, ema_oracle

OPTIMUM = np.array([1.0, 1.0])


def test_criterion_01_memory_table(acceptance, capsys):
    expected = {
        "AdamW-32bit": 50.21, "AdamW-16bit": 25.10, "AdamW-8bit": 12.55, "MicroAdam(m=10)": 5.65,
        "GaLore-AdamW-8bit(r=256)": 1.36, "GaLore-AdamW-8bit(r=1024)": 5.43,
        "GaLore-AdamW-16bit(r=256)": 2.04, "GaLore-AdamW-16bit(r=1024)": 8.15,
    }
    start = time.perf_counter()
    code = main(["memory", "--model", "llama2-7b", "--format", "csv"])
    elapsed = time.perf_counter() - start
    lines = capsys.readouterr().out.splitlines()[1:]
    got = {name: float(gb) for name, _, gb in (line.split(",") for line in lines)}
    exact = {r.name: r.gib for r in memory_footprints(MODELS["llama2-7b"])}
    ok = (
        code == 0
        and all(abs(got[k] - v) <= 0.01 + 1e-9 and abs(exact[k] - v) <= 0.01 for k, v in expected.items())
        and elapsed < 1.0
    )
    acceptance(1, "memory table", ok, f"{', '.join(f'{got[k]:.2f}' for k in expected)} GB in {elapsed:.3f}s")
    assert ok


def test_criterion_02_mmax(acceptance):
    d = 6_738_415_616
    val = solve_mmax(d, d / 100)
    ok = acceptance(2, "m_max", val == 37.5, f"m_max = {val!r}")
    assert ok


def test_criterion_03_quantizer_suite(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    checked = violations = 0
    for d in (3, 64, 1024):
        for bits in (2, 4, 8):
            for _ in range(120):
                x = rng.normal(loc=rng.normal(), scale=rng.exponential() + 0.1, size=d)
                p = quant_params(x, bits)
                factor = math.sqrt(d - 2) / (2**bits - 1) * (p.hi - p.lo) / math.hypot(p.hi, p.lo)
                bound = factor * np.linalg.norm(x)
                for codes in (quantize_nearest(x, p), quantize_stochastic(x, p, rng)):
                    checked += 1
                    if np.linalg.norm(dequantize(codes, p) - x) > bound * (1 + 1e-12):
                        violations += 1
    # unbiasedness: N = 1e5 draws of every coordinate of a random vector
    n = 10**5
    x = rng.normal(size=16)
    p = quant_params(x, 4)
    draws = dequantize(quantize_stochastic(np.tile(x, (n, 1)), p, rng), p)
    se = draws.std(axis=0, ddof=1) / math.sqrt(n)
    inner = (x > p.lo) & (x < p.hi)  # endpoints are reproduced exactly and have no spread
    z = np.abs(draws.mean(axis=0) - x)[inner] / se[inner]
    unbiased = bool(np.all(z < 4)) and np.all(draws[:, ~inner] == x[~inner])
    elapsed = time.perf_counter() - start
    ok = checked >= 1000 and violations == 0 and unbiased and elapsed < 30
    acceptance(3, "quantizer error bound + unbiasedness", ok,
               f"{violations}/{checked} violations, max z={z.max():.2f}, {elapsed:.1f}s")
    assert ok


def test_criterion_04_contraction(acceptance):
    rng = np.random.default_rng(7)
    checked = violations = 0
    for d in (4, 64, 1000):
        for _ in range(400):
            x = rng.normal(size=d) * (rng.standard_cauchy(size=d) if rng.random() < 0.3 else 1.0)
            for k in sorted({1, max(1, d // 10), d // 2, int(rng.integers(1, d + 1)), d}):
                checked += 1
                if contraction_factor(x, topk_global(x, k)) > topk_q(k, d) * (1 + 1e-12):
                    violations += 1
    ok = checked >= 1000 and violations == 0
    acceptance(4, "Top-K contraction", ok, f"{violations}/{checked} violations")
    assert ok


def test_criterion_05_rosenbrock(acceptance):
    start = time.perf_counter()
    f = rosenbrock()
    hp = HyperParams(lr=2e-2, k=1)
    traj = {name: run(name, f, 500, hp) for name in ("adam", "topk_adam", "topk_ef_adam", "microadam")}
    dist = {k: float(np.linalg.norm(t.final - OPTIMUM)) for k, t in traj.items()}
    path = {k: t.path_length() for k, t in traj.items()}
    elapsed = time.perf_counter() - start
    rel = {k: abs(dist[k] - dist["adam"]) / dist["adam"] for k in ("microadam", "topk_ef_adam")}
    ef_variant = min(rel, key=rel.get)
    part_a = rel[ef_variant] <= 0.10
    part_b = (
        dist["topk_adam"] >= 2 * dist["adam"]
        and dist["topk_adam"] >= 2 * dist[ef_variant]
        and path["topk_adam"] > path["adam"]
    )
    ok = part_a and part_b and elapsed < 5
    detail = (
        f"dist adam={dist['adam']:.4f} topk={dist['topk_adam']:.4f} topk_ef={dist['topk_ef_adam']:.4f} "
        f"microadam={dist['microadam']:.4f}; (a) {ef_variant} rel={rel[ef_variant]:.3f} "
        f"{'ok' if part_a else 'no'}; (b) topk/adam={dist['topk_adam'] / dist['adam']:.2f}, "
        f"path topk={path['topk_adam']:.2f} > adam={path['adam']:.2f} {'ok' if part_b else 'no'}; "
        f"{elapsed:.2f}s"
    )
    acceptance(5, "Rosenbrock trajectories", ok, detail)
    assert ok, detail


def test_criterion_06_window_oracle(acceptance):
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(500):
        d = int(rng.integers(1, 65))
        m = int(rng.integers(1, 16))
        t = int(rng.integers(1, m + 1))
        beta = float(rng.uniform(0.5, 0.9999))
        hist = rng.normal(size=(t, d))
        w = GradientWindow(d, m, d)
        for g in hist:
            w.push(topk_global(g, d))
        for square in (False, True):
            want = ema_oracle(hist, beta, square)
            err = np.linalg.norm(w.adam_stats(beta, square) - want) / np.linalg.norm(want)
            worst = max(worst, err)
    ok = acceptance(6, "window statistics vs EMA", worst <= 1e-12, f"max relative error {worst:.2e}")
    assert ok


def test_criterion_07_reductions(acceptance):
    rng = np.random.default_rng(13)
    ulp_mismatch = 0
    for trial in range(10):
        f = quadratic([rng.uniform(0.1, 10)], [rng.normal()]).with_noise(rng.uniform(0, 1))
        hp = HyperParams(lr=float(rng.uniform(1e-3, 0.2)))
        a, b = AnalyticalState(f.start), AnalyticalState(f.start)
        ra, rb = np.random.default_rng(trial), np.random.default_rng(trial)
        for _ in range(100):
            amsgrad_step(a, f.stochastic_grad(a.params, ra), hp)
            microadam_analytical_step(b, f.stochastic_grad(b.params, rb), hp, Identity(), Identity())
            ulp_mismatch += a.params.tobytes() != b.params.tobytes()
    stream_mismatch = 0
    for trial in range(10):
        grads = np.random.default_rng(100 + trial).normal(size=(50, 8))
        k = 1 + trial % 4
        hp = HyperParams(lr=0.01, k=k, bits=None)
        p = MicroAdamState.create(np.zeros(8), hp)
        s = AnalyticalState(np.zeros(8))
        for g in grads:
            rp = microadam_step(p, g, hp)
            rs = microadam_analytical_step(s, g, hp, TopK(k), Identity())
            stream_mismatch += not np.array_equal(rp.compressed, rs.compressed)
    ok = ulp_mismatch == 0 and stream_mismatch == 0
    acceptance(7, "reduction identities", ok,
               f"{ulp_mismatch} iterate mismatches over 1000 steps, {stream_mismatch} stream mismatches over 500 steps")
    assert ok


def test_criterion_08_diagnostic_bounds(acceptance):
    d, k, bits, G = 16, 8, 4, 1.0
    cp = CompressionParams(topk_q(k, d), quantizer_omega_worst(bits, d))
    e_cap, v_cap = ef_bound(cp, G), vhat_bound(cp, G)
    f = quadratic(np.linspace(1, 10, d), np.ones(d)).with_noise(1.0)
    hp = HyperParams(lr=1e-2, k=k, bits=bits, bucket=d)
    worst_e = worst_v = 0.0
    breaches = 0
    for seed in range(10):
        Q = BucketQuantizer(bits, d, "stochastic", np.random.default_rng(1000 + seed))
        tr = run("microadam_analytical", f, 1000, hp, seed=seed, clip=G, Q=Q)
        for r in tr.reports:
            breaches += (r.error_norm**2 > e_cap) + (r.vhat_max > v_cap) + (r.grad_norm > G * (1 + 1e-12))
            worst_e, worst_v = max(worst_e, r.error_norm**2), max(worst_v, r.vhat_max)
    ok = breaches == 0
    acceptance(8, "error-feedback and second-moment bounds", ok,
               f"q_omega={cp.q_omega:.4f}; max |e|^2={worst_e:.3g} <= {e_cap:.4g}, "
               f"max vhat={worst_v:.3g} <= {v_cap:.4g}")
    assert ok


def test_criterion_09_rate_trend(acceptance):
    start = time.perf_counter()
    f = quadratic(np.linspace(1, 10, 16), np.ones(16)).with_noise(0.1)
    hp = HyperParams(lr=1.0, k=8, bucket=16)
    means = []
    for T in (200, 800, 3200):
        tr = run("microadam_analytical", f, T, hp, schedule="sqrt", seed=0)
        means.append(float(np.mean(np.square(tr.grad_norms[:-1]))))
    elapsed = time.perf_counter() - start
    ok = means[0] >= means[1] >= means[2] and means[2] <= 0.6 * means[0] and elapsed < 30
    acceptance(9, "rate trend with eta = 1/sqrt(T)", ok,
               f"means {', '.join(f'{m:.4g}' for m in means)}; ratio {means[2] / means[0]:.3f}; {elapsed:.1f}s")
    assert ok


def test_criterion_10_lowrank_error(acceptance):
    fixed = run_lowrank_ef((32, 32), rank=4, t_sub=None, steps=1000, seed=0)
    worst = max(p / e for p, e in zip(fixed.proj_error_norm, fixed.error_norm))
    periodic = run_lowrank_ef((32, 32), rank=4, t_sub=200, steps=1000, seed=0)
    frac = nondecreasing_fraction(periodic)
    ok = worst < 1e-8 and frac >= 0.9
    acceptance(10, "low-rank error feedback", ok,
               f"max |proj(e)|/|e| = {worst:.2e}; nondecreasing on {100 * frac:.1f}% of intra-window steps")
    assert ok


def test_criterion_11_cli_determinism(acceptance, tmp_path, capsys):
    runs = [
        ["run", "--optimizer", opt, "--problem", prob, "--steps", "200", "--seed", "5", "--k", "1",
         "--noise", "0.05", "--rounding", "stochastic"]
        for opt in ("adam", "amsgrad", "topk_adam", "topk_ef_adam", "microadam",
                    "microadam_analytical", "microadamw")
        for prob in ("rosenbrock", "logistic")
    ]
    runs.append(["ef-lowrank", "--steps", "300"])
    identical = total = 0
    for i, argv in enumerate(runs):
        outs = []
        for rep in range(2):
            out = tmp_path / f"{i}_{rep}.csv"
            assert main(argv + ["--out", str(out)]) == 0
            outs.append(out.read_bytes())
        total += 1
        identical += outs[0] == outs[1]
    capsys.readouterr()  # drop the run summaries printed so far
    for argv in (["memory", "--model", "llama2-7b"], ["constants", "--k", "1", "--d", "100"]):
        first = (main(argv), capsys.readouterr().out)
        second = (main(argv), capsys.readouterr().out)
        total += 1
        identical += first == second
    ok = acceptance(11, "CLI determinism", identical == total, f"{identical}/{total} byte-identical")
    assert ok
