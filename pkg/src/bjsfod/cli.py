"""Command-line front end.

Subcommands
-----------
fit       voxelwise FOD estimation over a masked volume
simulate  synthetic crossing-fiber experiments from a TOML/JSON config
bench     serial/parallel timing of the three estimators
anova     lateralization-score two-way ANOVA from a CSV table

Progress and per-voxel failures go to stderr; data go to files or stdout.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .estimators import ESTIMATORS, DeconvolutionDesign, FitConfig, KernelLevelError
from .io import (
    VolumeFormatError,
    load_config_document,
    read_volume,
    write_coefficients_csv,
    write_fodc,
    write_peaks_csv,
)
from .model import ResponseEstimationError, ResponseKernel, estimate_response
from .peaks import PeakFinder
from .sphere import icosphere_grid, n_coefficients, read_bvecs_bvals

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2

STATUS_OK = "ok"
STATUS_NO_B0 = "no_b0_signal"
STATUS_NONFINITE = "nonfinite_signal"
STATUS_FAILED = "fit_failed"


class CliError(Exception):
    """Validation failure reported to the user with a nonzero exit code."""


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _fit_config(args) -> FitConfig:
    base = {}
    if getattr(args, "config", None):
        doc = load_config_document(args.config)
        base = doc.get("fit", doc)
    over = {"estimator": args.estimator, "l_max": args.lmax, "l_max_super": args.lmax_super,
            "l0": args.l0, "c": args.c}
    base.update({k: v for k, v in over.items() if v is not None})
    try:
        return FitConfig(**base)
    except TypeError as exc:
        raise CliError(f"invalid fit config: {exc}") from exc


def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    d = FitConfig()
    p.add_argument("--estimator", choices=ESTIMATORS, default=None,
                   help=f"estimator (default: {d.estimator})")
    p.add_argument("--lmax", type=int, default=None, help=f"SH order of the initial fit (default: {d.l_max})")
    p.add_argument("--lmax-super", type=int, default=None,
                   help=f"SH order after sharpening / superCSD (default: {d.l_max_super})")
    p.add_argument("--l0", type=int, default=None, help=f"highest level left unshrunk (default: {d.l0})")
    p.add_argument("--c", type=float, default=None, help=f"shrinkage threshold constant (default: {d.c})")
    p.add_argument("--config", metavar="<file>", help="TOML/JSON document with FitConfig fields")
    p.add_argument("--threads", type=int, default=1, help="worker threads (default: 1)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default: 0)")


def config_hash(doc: dict) -> str:
    """SHA-256 of the canonical JSON form of ``doc``."""
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=float)
    return hashlib.sha256(text.encode()).hexdigest()


# --------------------------------------------------------------------------
# fit

def _load_inputs(args):
    try:
        vol = read_volume(args.data)
        grad = read_bvecs_bvals(args.bvecs, args.bvals)
        mask = None if args.mask is None else read_volume(args.mask)
    except (OSError, VolumeFormatError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    if vol.data.ndim != 4 or vol.frame_count != len(grad):
        raise CliError(f"data has {vol.frame_count} frames but the gradient table has {len(grad)} entries")
    if mask is not None:
        if mask.data.ndim != 3 or mask.dims != vol.dims:
            raise CliError(f"mask shape {mask.data.shape} does not match data dims {vol.dims}")
        m = mask.data > 0
    else:
        m = np.ones(vol.dims, dtype=bool)
    if not grad.b0_mask.any():
        raise CliError("no b0 frames (b <= 50) for signal normalization")
    if grad.b0_mask.all():
        raise CliError("no diffusion-weighted frames")
    return vol, grad, m


def _fit_chunk(design, finder, Y, est):
    out = []
    for y in Y:
        try:
            f = design.fit(y, est)
        except (np.linalg.LinAlgError, ValueError) as exc:
            out.append((None, None, str(exc)))
            continue
        out.append((f, finder(f), None))
    return out


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    cfg = _fit_config(args)
    vol, grad, mask = _load_inputs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    ids = np.flatnonzero(mask.ravel())
    frames = vol.data.reshape(-1, vol.frame_count)[ids]
    s0 = frames[:, grad.b0_mask].mean(axis=1) if len(ids) else np.zeros(0)
    dw = grad.weighted()
    status = np.full(len(ids), STATUS_OK, dtype=object)
    with np.errstate(divide="ignore", invalid="ignore"):
        Y = frames[:, ~grad.b0_mask] / s0[:, None]
    status[~(s0 > 0)] = STATUS_NO_B0
    status[(s0 > 0) & ~np.isfinite(Y).all(axis=1)] = STATUS_NONFINITE
    usable = status == STATUS_OK
    _log(f"{len(ids)} masked voxels, {int(usable.sum())} usable, {len(dw)} diffusion-weighted frames")

    kernel = None
    if args.response:
        try:
            kernel = ResponseKernel.load(args.response)
        except (OSError, KeyError, ValueError) as exc:
            raise CliError(f"cannot read response kernel {args.response}: {exc}") from exc
    elif usable.any():
        vox = [(frames[i, ~grad.b0_mask], s0[i]) for i in np.flatnonzero(usable)]
        try:
            kernel = estimate_response(vox, dw, l_max=max(16, cfg.l_max_super))
        except ResponseEstimationError as exc:
            raise CliError(str(exc)) from exc
        _log(f"response: lambda_major={kernel.lambda_major:.3e} lambda_minor={kernel.lambda_minor:.3e}")

    coefs = np.zeros((len(ids), 0))
    peaks: list = [[] for _ in ids]
    est = cfg.estimator
    l_out = cfg.l_max if est == "shridge" else cfg.l_max_super
    if usable.any():
        try:
            design = DeconvolutionDesign(dw, kernel, cfg, icosphere_grid(4))
        except KernelLevelError as exc:
            raise CliError(str(exc)) from exc
        except ValueError as exc:
            raise CliError(f"cannot build the design: {exc}") from exc
        if est != "bjs":
            design._ridge_cache()  # build once before threads share the design
        finder = PeakFinder(design.dense, l_out)
        rows = np.flatnonzero(usable)
        chunks = [c for c in np.array_split(rows, max(1, min(len(rows), 64 * args.threads))) if len(c)]
        if args.threads > 1:
            with ThreadPoolExecutor(args.threads) as ex:
                parts = list(ex.map(lambda c: _fit_chunk(design, finder, Y[c], est), chunks))
        else:
            parts = []
            for k, c in enumerate(chunks):
                parts.append(_fit_chunk(design, finder, Y[c], est))
                if (k + 1) % 8 == 0 or k + 1 == len(chunks):
                    _log(f"fitted {sum(len(p) for p in parts)}/{len(rows)} voxels")
        coefs = np.zeros((len(ids), n_coefficients(l_out)))
        for c, part in zip(chunks, parts):
            for i, (f, pk, err) in zip(c, part):
                if f is None:
                    status[i] = STATUS_FAILED
                    _log(f"voxel {ids[i]}: {err}")
                else:
                    coefs[i] = f
                    peaks[i] = pk

    ok = np.flatnonzero(status == STATUS_OK)
    write_coefficients_csv(out / "coefficients.csv", ((int(ids[i]), est, l_out, coefs[i]) for i in ok), l_out)
    write_fodc(out / "coefficients.fodc", [coefs[i] for i in ok], l_out)
    n_peaks = write_peaks_csv(out / "peaks.csv", ((int(ids[i]), peaks[i]) for i in ok))
    with open(out / "status.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["voxel_id", "i", "j", "k", "status"])
        for vid, st in zip(ids, status):
            w.writerow([int(vid), *np.unravel_index(vid, vol.dims), st])
    if kernel is not None:
        kernel.save(out / "kernel.json")

    cfg_doc = {"fit": asdict(cfg), "kernel": None if kernel is None else json.loads(kernel.to_json()),
               "seed": args.seed}
    counts = {s: int((status == s).sum()) for s in (STATUS_OK, STATUS_NO_B0, STATUS_NONFINITE, STATUS_FAILED)}
    manifest = {
        "inputs": {"data": str(args.data), "bvecs": str(args.bvecs), "bvals": str(args.bvals),
                   "mask": None if args.mask is None else str(args.mask),
                   "response": None if args.response is None else str(args.response)},
        "config_hash": config_hash(cfg_doc),
        "seed": args.seed,
        "estimator": est,
        "software_version": __version__,
        "kernel_backend": kernels.BACKEND,
        "threads": args.threads,
        "n_voxels": int(len(ids)),
        "n_peaks": n_peaks,
        "status_counts": counts,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    _log(f"done: {counts}")
    return EXIT_OK


# --------------------------------------------------------------------------
# simulate / bench / anova

def cmd_simulate(args) -> int:
    from .experiment import format_report_table, load_experiment_configs, report_rows, rows_to_csv, run_synthetic_experiment

    try:
        cfgs = load_experiment_configs(args.config)
    except (OSError, ValueError, TypeError) as exc:
        raise CliError(f"invalid experiment config: {exc}") from exc
    if args.seed is not None:
        cfgs = [replace(c, seed=args.seed) for c in cfgs]
    if args.replicates is not None:
        cfgs = [replace(c, replicates=args.replicates) for c in cfgs]
    rows = []
    for k, c in enumerate(cfgs):
        _log(f"setting {k + 1}/{len(cfgs)}: {c.n_fibers} fibers {c.separation_deg:g} deg b={c.b:g}")
        rows.extend(report_rows(c, run_synthetic_experiment(c, workers=args.threads)))
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
        print(format_report_table(rows))
    else:
        sys.stdout.write(text)
        _log(format_report_table(rows))
    return EXIT_OK


def cmd_bench(args) -> int:
    from .experiment import benchmark_throughput

    cfg = _fit_config(args)
    if args.lmax is None and args.lmax_super is None and not args.config:
        cfg = cfg.with_(l_max=10, l_max_super=10)
    res = benchmark_throughput(args.voxels, cfg, args.threads, n_gradients=args.gradients,
                               seed=args.seed, estimators=args.estimators or ESTIMATORS)
    lines = ["estimator,mode,n_voxels,threads,n_gradients,l_max,l_max_super,seconds,seconds_per_voxel"]
    for key, sec in res.seconds.items():
        est, mode = key.split("/")
        lines.append(f"{est},{mode},{res.n_voxels},{res.threads},{res.n_gradients},{res.l_max},"
                     f"{res.l_max_super},{sec:.6f},{sec / res.n_voxels:.3e}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_anova(args) -> int:
    from .experiment import read_scores_csv, two_way_anova

    try:
        _, scores, hand, gender = read_scores_csv(args.scores)
        res = two_way_anova(scores, hand, gender, order=tuple(args.order.split(",")))
    except (OSError, KeyError, ValueError) as exc:
        raise CliError(str(exc)) from exc
    print(res.table())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "anova.csv").write_text(res.to_csv())
        np.savetxt(out / "residuals.csv", res.residuals, fmt="%.10g", header="residual", comments="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bjsfod", description="FOD estimation by spherical deconvolution")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit FODs in every masked voxel")
    f.add_argument("data", help="4-D volume (.nii, .nii.gz, or raw f32 with a .json sidecar)")
    f.add_argument("bvecs", help="3 x n gradient direction file")
    f.add_argument("bvals", help="1 x n b-value file")
    f.add_argument("--mask", metavar="<file>", help="3-D mask volume; nonzero voxels are fitted (default: all)")
    f.add_argument("--response", metavar="<file>", help="response kernel JSON (default: estimated from the data)")
    f.add_argument("--out", metavar="<dir>", required=True, help="output directory")
    _add_fit_flags(f)
    f.set_defaults(func=cmd_fit)

    s = sub.add_parser("simulate", help="run synthetic experiments")
    s.add_argument("config", help="experiment TOML/JSON")
    s.add_argument("--out", metavar="<file>", help="metrics CSV (default: stdout)")
    s.add_argument("--threads", type=int, default=1, help="worker processes (default: 1)")
    s.add_argument("--seed", type=int, default=None, help="override the master seed")
    s.add_argument("--replicates", type=int, default=None, help="override the replicate count")
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("bench", help="time the estimators on synthetic voxels")
    b.add_argument("--voxels", type=int, default=10000, help="number of voxels (default: 10000)")
    b.add_argument("--gradients", type=int, default=91, help="requested gradient count (default: 91)")
    b.add_argument("--estimators", nargs="+", choices=ESTIMATORS, help="subset to time (default: all)")
    b.add_argument("--out", metavar="<file>", help="also write the timing CSV here")
    _add_fit_flags(b)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("anova", help="two-way ANOVA of lateralization scores")
    a.add_argument("scores", help="CSV with subject_id, score, handedness, gender")
    a.add_argument("--order", default="handedness,gender,interaction",
                   help="sequential term order (default: handedness,gender,interaction)")
    a.add_argument("--out", metavar="<dir>", help="write anova.csv and residuals.csv here")
    a.set_defaults(func=cmd_anova)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        _log(f"error: {exc}")
        return EXIT_ERROR
    except ValueError as exc:
        _log(f"error: {exc}")
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
