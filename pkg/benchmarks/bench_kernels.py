"""Compare the compiled and numpy kernel backends.

Times each hot kernel on identical inputs with both backends, checks that
the outputs agree, and prints one line per kernel:

    python benchmarks/bench_kernels.py [--voxels 2000] [--repeat 5]
"""
import argparse
import sys
import timeit

import numpy as np

from bjsfod import kernels
from bjsfod.estimators import DeconvolutionDesign, FitConfig
from bjsfod.experiment import synthetic_voxels
from bjsfod.model import ResponseKernel
from bjsfod.sphere import design_for_count, icosphere_grid, k_hop_adjacency


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--voxels", type=int, default=2000)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--gradients", type=int, default=91)
    ap.add_argument("--lmax", type=int, default=10)
    ap.add_argument("--lmax-super", type=int, default=10)
    args = ap.parse_args(argv)

    comp = kernels.compiled()
    if comp is None:
        print("compiled kernels are not built; nothing to compare", file=sys.stderr)
        return 1
    py = kernels.python

    cfg = FitConfig(l_max=args.lmax, l_max_super=args.lmax_super)
    grad = design_for_count(args.gradients).directions
    kern = ResponseKernel(1.7e-3, 3e-4, 3000.0, 1.0, 16)
    design = DeconvolutionDesign(grad, kern, cfg, icosphere_grid(4))
    Y = synthetic_voxels(args.voxels, grad, kern, 50.0, seed=3)
    rng = np.random.default_rng(0)

    Z = Y @ design.K.T
    s2 = np.full(len(Y), 1e-3)
    mask = rng.random(len(design.dense_mult)) < 0.3
    vals = rng.random(len(design.dense))
    ip, ix = k_hop_adjacency(*design.dense.adjacency(), 2)

    def shrink(m):
        out = Z.copy()
        m.block_shrink(out, design._starts, design._lens, design._shrink_thr, s2)
        return out

    cases = [
        ("block_shrink", shrink),
        ("masked_gram", lambda m: m.masked_gram(design.dense_weighted, design.dense_gram,
                                                mask, design.dense_mult)),
        ("strict_local_maxima", lambda m: m.strict_local_maxima(vals, ip, ix)),
        ("bjs_batch", lambda m: m.bjs_batch(design, Y)),
    ]
    print(f"{'kernel':<22}{'python s':>12}{'compiled s':>12}{'speedup':>9}{'max |diff|':>13}")
    for name, call in cases:
        a, b = call(py), call(comp)
        if isinstance(a, tuple):
            a, b = a[0], b[0]
        diff = float(np.max(np.abs(np.asarray(a, dtype=float) - np.asarray(b, dtype=float))))
        tp = _best(lambda: call(py), args.repeat)
        tc = _best(lambda: call(comp), args.repeat)
        print(f"{name:<22}{tp:>12.4f}{tc:>12.4f}{tp / tc:>9.2f}{diff:>13.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
