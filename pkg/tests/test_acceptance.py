"""Acceptance criteria, each at its stated tolerance.

Every test prints one ``PASS``/``FAIL`` line and repeats it in the pytest
terminal summary.  The module also runs standalone::

    python tests/test_acceptance.py
"""
import subprocess
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

try:
    from conftest import ACCEPTANCE_LINES
except ImportError:  # standalone run outside pytest's rootdir handling
    ACCEPTANCE_LINES = []

from bjsfod.estimators import DeconvolutionDesign, FitConfig, bjs_transform, shrinkage_factors
from bjsfod.experiment import (
    ExperimentConfig,
    benchmark_throughput,
    cpu_count,
    lateralization_score,
    run_synthetic_experiment,
    two_way_anova,
)
from bjsfod.model import (
    FiberConfiguration,
    ResponseKernel,
    add_rician_noise,
    build_r_matrix,
    synthesize_signal,
)
from bjsfod.peaks import detect_peaks
from bjsfod.sphere import (
    LevelBlockIndex,
    acute_angle_deg,
    design_for_count,
    eval_sh_basis,
    icosphere_grid,
    n_coefficients,
)


def _report(number, ok, detail):
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    return ok


def _fmt(r):
    return f"D.R. {100 * r.detection_rate:.0f}%  Bias.Sep {r.bias:+.2f} (s.e. {r.bias_sep_se[0]:.2f})  RMSAE {r.rmsae:.2f}"


@pytest.mark.slow
def test_criterion_1_crossing_45_b3000():
    cfg = ExperimentConfig(separation_deg=45.0, b=3000.0, snr=50.0, n_gradients=41, l_max=6,
                           l_max_super=12, replicates=100)
    t0 = time.perf_counter()
    r = run_synthetic_experiment(cfg, workers=min(4, cpu_count()))["bjs"]
    elapsed = time.perf_counter() - t0
    checks = {
        "D.R. >= 95%": r.detection_rate >= 0.95,
        "|Bias.Sep + 1.03| <= 1.0": abs(r.bias - (-1.03)) <= 1.0,
        "|RMSAE - 5.10| <= 1.5": abs(r.rmsae - 5.10) <= 1.5,
        "runtime < 300 s": elapsed < 300.0,
    }
    failed = [k for k, v in checks.items() if not v]
    ok = _report(1, not failed, f"BJS {_fmt(r)}  runtime {elapsed:.1f}s"
                 + (f"  failed: {', '.join(failed)}" if failed else ""))
    assert ok, failed


@pytest.mark.slow
def test_criterion_2_crossing_45_b1000():
    cfg = ExperimentConfig(separation_deg=45.0, b=1000.0, snr=50.0, n_gradients=41, l_max=6,
                           l_max_super=12, replicates=100, estimators=("bjs", "shridge"))
    res = run_synthetic_experiment(cfg, workers=min(4, cpu_count()))
    bjs, ridge = res["bjs"].detection_rate, res["shridge"].detection_rate
    checks = {
        "BJS D.R. within 62 +- 15": abs(100 * bjs - 62.0) <= 15.0,
        "SHridge D.R. <= 15%": ridge <= 0.15,
    }
    failed = [k for k, v in checks.items() if not v]
    ok = _report(2, not failed, f"BJS D.R. {100 * bjs:.0f}%  SHridge D.R. {100 * ridge:.0f}%"
                 + (f"  failed: {', '.join(failed)}" if failed else ""))
    assert ok, failed


@pytest.mark.slow
def test_criterion_3_crossing_30_n91():
    cfg = ExperimentConfig(separation_deg=30.0, b=3000.0, snr=50.0, n_gradients=91, l_max=10,
                           l_max_super=16, replicates=100, estimators=("bjs", "scsd"))
    res = run_synthetic_experiment(cfg, workers=min(4, cpu_count()))
    b, s = res["bjs"], res["scsd"]
    checks = {
        "BJS D.R. within 77 +- 15": abs(100 * b.detection_rate - 77.0) <= 15.0,
        "BJS D.R. - SCSD D.R. >= 15": 100 * (b.detection_rate - s.detection_rate) >= 15.0,
        "BJS |Bias.Sep| <= 3": abs(b.bias) <= 3.0,
        "SCSD Bias.Sep <= -5": s.bias <= -5.0,
    }
    failed = [k for k, v in checks.items() if not v]
    ok = _report(3, not failed, f"BJS {_fmt(b)} | SCSD {_fmt(s)}"
                 + (f"  failed: {', '.join(failed)}" if failed else ""))
    assert ok, failed


@pytest.mark.slow
def test_criterion_4_speed():
    res = benchmark_throughput(10_000, FitConfig(l_max=10, l_max_super=10), threads=1, n_gradients=91,
                               include_batch=False)
    t = {k.split("/")[0]: v for k, v in res.seconds.items()}
    r_ridge, r_scsd = t["bjs"] / t["shridge"], t["bjs"] / t["scsd"]
    ok = _report(4, r_ridge <= 0.2 and r_scsd <= 0.2,
                 f"10K voxels serial: BJS {t['bjs']:.1f}s  SHridge {t['shridge']:.1f}s  SCSD {t['scsd']:.1f}s"
                 f"  (ratios {r_ridge:.3f}, {r_scsd:.3f}; limit 0.200)")
    assert ok


@pytest.mark.slow
@pytest.mark.skipif(cpu_count() < 4, reason="thread scaling needs at least 4 cores")
def test_criterion_4_thread_scaling():
    cfg = FitConfig(l_max=10, l_max_super=10)
    one = benchmark_throughput(4000, cfg, threads=2, estimators=("bjs",), include_batch=False)
    two = benchmark_throughput(4000, cfg, threads=4, estimators=("bjs",), include_batch=False)
    speedup = one.seconds["bjs/parallel"] / two.seconds["bjs/parallel"]
    assert speedup >= 1.6


def _property_checks():
    """Each entry: (name, passed, detail)."""
    out = []
    dense = icosphere_grid(4)
    kernel = ResponseKernel(1.7e-3, 3e-4, 3000.0, 1.0, 16)

    # SH Gram on the dense quadrature
    dev = 0.0
    for l_max in (2, 4, 6, 8, 10, 12):
        B = eval_sh_basis(dense.directions, l_max).values
        G = B.T @ (dense.quadrature_weights[:, None] * B)
        dev = max(dev, float(np.abs(G - np.eye(B.shape[1])).max()))
    out.append(("SH Gram", dev <= 1e-3, f"max dev {dev:.1e}"))

    # addition theorem
    rng = np.random.default_rng(0)
    d = rng.standard_normal((500, 3))
    d /= np.linalg.norm(d, axis=1)[:, None]
    B = eval_sh_basis(d, 16).values
    err = 0.0
    for l, s, n in LevelBlockIndex(16).blocks:
        err = max(err, float(np.abs((B[:, s:s + n] ** 2).sum(1) - (2 * l + 1) / (4 * np.pi)).max()))
    out.append(("addition theorem", err <= 1e-10, f"max err {err:.1e}"))

    # convolution theorem: SH product vs dense quadrature of a smooth FOD
    fib = FiberConfiguration.symmetric(2, 45.0)
    grad = design_for_count(91).directions
    S_sh = synthesize_signal(fib, kernel, grad)
    K = kernel.profile(grad @ dense.directions.T)
    rel = 0.0
    for l_max in (4, 8, 10):
        f = rng.standard_normal(n_coefficients(l_max))
        F = eval_sh_basis(dense.directions, l_max).values @ f
        direct = K @ (dense.quadrature_weights * F)
        sh = eval_sh_basis(grad, l_max).values @ (build_r_matrix(kernel.r, l_max) * f)
        rel = max(rel, float(np.abs(direct - sh).max() / np.abs(sh).max()))
    out.append(("convolution theorem", rel <= 1e-3, f"rel err {rel:.1e}"))

    # BJS unshrunk blocks equal OLS exactly; factors in [0, 1]
    design = DeconvolutionDesign(grad, kernel, FitConfig(l_max=10, l_max_super=12), dense)
    Bg = eval_sh_basis(grad, 10)
    r = build_r_matrix(kernel.r, 10)
    same, in_range = True, True
    for rep in range(50):
        y = add_rician_noise(S_sh, 1.0, 20.0, (3, rep))
        t = bjs_transform(y, Bg, r)
        ols = np.linalg.lstsq(Bg.values * r, y, rcond=None)[0]
        k = n_coefficients(4)
        z, s2 = design.transform(y)
        shr = design.shrink(z, s2)
        same &= bool(np.array_equal(shr[:k], z[:k])) and bool(np.allclose(t.z, ols, atol=1e-10))
        fac = shrinkage_factors(z, design.thresholds, s2, 10, 4)
        in_range &= bool(np.all((fac >= 0) & (fac <= 1)))
    out.append(("unshrunk blocks = OLS", same, "50 noisy replicates"))
    out.append(("shrinkage factor in [0,1]", in_range, "50 noisy replicates"))

    # false survival of null blocks (known noise variance)
    worst = []
    fs_ok = True
    for n_grad, l_max in ((41, 6), (91, 10)):
        dd = DeconvolutionDesign(design_for_count(n_grad).directions, kernel,
                                 FitConfig(l_max=l_max, l_max_super=12), dense)
        Y = np.random.default_rng(2024).standard_normal((10 ** 4, dd.n)) * 0.05
        Z = Y @ dd.K.T
        for (l, s, n), thr in zip(dd.blocks, dd.thresholds):
            if l <= 4:
                continue
            p = float(np.mean(np.einsum("ij,ij->i", Z[:, s:s + n], Z[:, s:s + n]) > 0.05 ** 2 * thr))
            bound = (2 * l + 1) ** -2.0
            limit = bound + 3 * np.sqrt(bound * (1 - bound) / 10 ** 4)
            fs_ok &= p <= limit
            worst.append(f"n{dd.n}/l{l} {p:.4f}<={limit:.4f}")
    out.append(("null-block false survival", fs_ok, ", ".join(worst)))

    # noiseless single fiber end to end
    errs = []
    for est in ("bjs", "scsd"):
        for u in ([0, 0, 1.0], [1.0, 0, 0]):
            y = synthesize_signal(FiberConfiguration.equal([u]), kernel, grad)
            pk = detect_peaks(design.fit(y, est), dense)
            errs.append(acute_angle_deg(pk[0].direction, u) if len(pk) == 1 else 90.0)
    out.append(("noiseless single-fiber peak", max(errs) <= 1.0, f"max err {max(errs):.2f} deg"))

    # superCSD mask stabilization
    g41 = design_for_count(41).directions
    d41 = DeconvolutionDesign(g41, kernel, FitConfig(l_max=6, l_max_super=12), dense)
    S41 = synthesize_signal(fib, kernel, g41)
    conv = 0
    for rep in range(100):
        y = add_rician_noise(S41, 1.0, 50.0, (31, rep))
        conv += d41.super_csd(d41.fit_shridge(y), y).converged
    out.append(("superCSD mask stabilizes", conv >= 95, f"{conv}/100"))

    # balanced two-way ANOVA against the closed form
    rng = np.random.default_rng(1)
    h = np.repeat(["a", "a", "b", "b"], 8)
    g = np.repeat(["x", "y", "x", "y"], 8)
    yv = rng.standard_normal(32) + (h == "a") * 0.4 + (g == "y") * 0.2
    res = two_way_anova(yv, list(h), list(g))
    mu = yv.mean()
    ma = {k: yv[h == k].mean() for k in "ab"}
    mb = {k: yv[g == k].mean() for k in "xy"}
    mc = {(i, j): yv[(h == i) & (g == j)].mean() for i in "ab" for j in "xy"}
    ref = {
        "handedness": sum((ma[i] - mu) ** 2 for i in h),
        "gender": sum((mb[j] - mu) ** 2 for j in g),
        "interaction": sum((mc[i, j] - ma[i] - mb[j] + mu) ** 2 for i, j in zip(h, g)),
        "residual": sum((v - mc[i, j]) ** 2 for v, i, j in zip(yv, h, g)),
    }
    diff = max(abs(res.terms[k].ss - v) for k, v in ref.items())
    out.append(("balanced ANOVA SS", diff <= 1e-10, f"max diff {diff:.1e}"))

    ls = [lateralization_score(0, 100), lateralization_score(100, 100), lateralization_score(100, 0)]
    out.append(("LS boundary values", ls == [-2.0, 0.0, 2.0], str(ls)))
    return out


def test_criterion_5_property_suite():
    checks = _property_checks()
    failed = [name for name, ok, _ in checks if not ok]
    detail = "; ".join(f"{name}: {'ok' if ok else 'FAIL'} ({d})" for name, ok, d in checks)
    ok = _report(5, not failed, f"{len(checks) - len(failed)}/{len(checks)} properties  [{detail}]")
    assert ok, failed


def test_criterion_6_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = tmp / "exp.toml"
        cfg.write_text("[defaults]\nreplicates = 20\nseed = 424242\n"
                       "[[settings]]\nseparation_deg = 45.0\n"
                       "[[settings]]\nseparation_deg = 75.0\nb = 1000.0\n")
        outs = []
        for k, threads in enumerate(("1", "1", "2", "3")):
            p = tmp / f"run{k}.csv"
            proc = subprocess.run([sys.executable, "-m", "bjsfod.cli", "simulate", str(cfg), "--out", str(p),
                                   "--threads", threads], capture_output=True, text=True)
            assert proc.returncode == 0, proc.stderr
            outs.append(p.read_bytes())
    same = all(o == outs[0] for o in outs)
    ok = _report(6, same, "simulate CSV byte-identical across 2 serial runs and 2/3 workers"
                 if same else "simulate CSV differs between runs")
    assert ok


if __name__ == "__main__":
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_criterion_")]
    failures = 0
    for fn in tests:
        try:
            if fn.__name__ == "test_criterion_4_thread_scaling" and cpu_count() < 4:
                print("criterion 4 (thread scaling): SKIP  fewer than 4 cores")
                continue
            fn()
        except AssertionError:
            failures += 1
    sys.exit(1 if failures else 0)
