"""Synthetic-experiment harness, evaluation metrics, timing benchmark and
group-analysis statistics (lateralization score, two-way ANOVA)."""
from __future__ import annotations

import csv
import io
import json
import os
import time
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from itertools import combinations
from typing import Sequence

import numpy as np
from scipy import stats

from .io import load_config_document
from .estimators import ESTIMATORS, DeconvolutionDesign, FitConfig
from .model import FiberConfiguration, ResponseKernel, add_rician_noise, make_rng, synthesize_signal
from .peaks import PeakFinder, match_peaks
from .sphere import acute_angle_deg, design_for_count, icosphere_grid

ESTIMATOR_LABELS = {"bjs": "BJS", "shridge": "SHridge", "scsd": "SCSD"}


@dataclass(frozen=True)
class ExperimentConfig:
    """One synthetic setting.

    ``n_gradients`` selects the closest upper-hemisphere face-center
    geodesic design; the size actually used is reported as ``n_used``.
    """

    n_fibers: int = 2
    separation_deg: float = 45.0
    b: float = 3000.0
    snr: float = 50.0
    n_gradients: int = 41
    l_max: int = 6
    l_max_super: int = 12
    replicates: int = 100
    seed: int = 20240101
    estimators: tuple[str, ...] = ("bjs", "scsd", "shridge")
    lambda_major: float = 1.7e-3
    lambda_minor: float = 3e-4
    c: float = 2.0
    l0: int = 4
    scsd_threshold_mode: str = "mean-relative"
    rel_threshold: float = 0.25
    neighborhood_hops: int = 2
    merge_angle_deg: float = 15.0
    dense_subdivision: int = 4
    name: str = ""

    def __post_init__(self):
        if self.replicates < 1:
            raise ValueError("replicates must be >= 1")
        ests = tuple(self.estimators)
        if not ests or any(e not in ESTIMATORS for e in ests):
            raise ValueError(f"estimators must be a nonempty subset of {ESTIMATORS}")
        object.__setattr__(self, "estimators", ests)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown experiment fields: {sorted(unknown)}")
        return cls(**d)

    def fit_config(self) -> FitConfig:
        return FitConfig(l_max=self.l_max, l_max_super=self.l_max_super, l0=self.l0, c=self.c,
                         scsd_threshold_mode=self.scsd_threshold_mode)

    def fibers(self) -> FiberConfiguration:
        return FiberConfiguration.symmetric(self.n_fibers, self.separation_deg)


def load_experiment_configs(path) -> list[ExperimentConfig]:
    """Read one or more settings from JSON or TOML.

    The document is either a single setting, or ``{"defaults": {...},
    "settings": [{...}, ...]}``.
    """
    doc = load_config_document(path)
    if "settings" in doc:
        base = doc.get("defaults", {})
        return [ExperimentConfig.from_dict({**base, **s}) for s in doc["settings"]]
    return [ExperimentConfig.from_dict(doc)]


@dataclass
class MetricsReport:
    """Per-estimator summary over replicates.

    Separation statistics have one entry per pair of true fibers (one entry
    for two-fiber settings).  They are NaN when no replicate detected the
    correct number of fibers.
    """

    estimator: str
    replicates: int
    n_correct: int
    detection_rate: float
    mean_sep: tuple[float, ...]
    bias_sep: tuple[float, ...]
    bias_sep_se: tuple[float, ...]
    rmsae: float
    n_errors: int = 0
    wall_time_per_voxel: float = 0.0

    @property
    def bias(self) -> float:
        return self.bias_sep[0]


class _Trial:
    """Everything needed to run replicates of one setting (picklable)."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.grad = design_for_count(cfg.n_gradients).directions
        self.kernel = ResponseKernel(cfg.lambda_major, cfg.lambda_minor, cfg.b, 1.0,
                                     max(cfg.l_max_super, 16))
        self.fibers = cfg.fibers()
        self.signal = synthesize_signal(self.fibers, self.kernel, self.grad)
        dense = icosphere_grid(cfg.dense_subdivision)
        self.design = DeconvolutionDesign(self.grad, self.kernel, cfg.fit_config(), dense)
        kw = dict(rel_threshold=cfg.rel_threshold, neighborhood_hops=cfg.neighborhood_hops,
                  merge_angle_deg=cfg.merge_angle_deg)
        self.finder_super = PeakFinder(dense, cfg.l_max_super, **kw)
        self.finder_base = self.finder_super if cfg.l_max == cfg.l_max_super else PeakFinder(dense, cfg.l_max, **kw)

    def run(self, rep: int) -> dict:
        """Peaks and timing of every estimator on replicate ``rep``."""
        cfg = self.cfg
        y = add_rician_noise(self.signal, 1.0, cfg.snr, (cfg.seed, rep))
        out = {}
        for est in cfg.estimators:
            t0 = time.perf_counter()
            try:
                f = self.design.fit(y, est)
            except (np.linalg.LinAlgError, ValueError):
                out[est] = (None, time.perf_counter() - t0)
                continue
            finder = self.finder_base if est == "shridge" else self.finder_super
            peaks = finder(f)
            out[est] = ([p.direction for p in peaks], time.perf_counter() - t0)
        return out


_WORKER_TRIAL: _Trial | None = None


def _init_worker(cfg: ExperimentConfig) -> None:
    global _WORKER_TRIAL
    _WORKER_TRIAL = _Trial(cfg)


def _run_chunk(reps: Sequence[int]) -> list[dict]:
    return [_WORKER_TRIAL.run(r) for r in reps]


def summarize(estimator: str, peak_lists: Sequence, truth: np.ndarray, times: Sequence[float]) -> MetricsReport:
    """Aggregate replicate peak lists into a :class:`MetricsReport`."""
    k = len(truth)
    pairs = list(combinations(range(k), 2))
    seps = [[] for _ in pairs]
    sq_err = []
    n_correct = n_err = 0
    for peaks in peak_lists:
        if peaks is None:
            n_err += 1
            continue
        m = match_peaks(peaks, truth)
        if m is None:
            continue
        n_correct += 1
        by_truth = {mm.truth: peaks[mm.estimated] for mm in m}
        for p, (i, j) in enumerate(pairs):
            seps[p].append(acute_angle_deg(by_truth[i], by_truth[j]))
        sq_err.extend(mm.angle ** 2 for mm in m)
    true_sep = [acute_angle_deg(truth[i], truth[j]) for i, j in pairs]
    mean_sep, bias, se = [], [], []
    for s, t in zip(seps, true_sep):
        s = np.asarray(s)
        if s.size:
            mean_sep.append(float(s.mean()))
            bias.append(float(s.mean() - t))
            se.append(float(s.std(ddof=1) / np.sqrt(s.size)) if s.size > 1 else float("nan"))
        else:
            mean_sep.append(float("nan"))
            bias.append(float("nan"))
            se.append(float("nan"))
    n = len(peak_lists)
    return MetricsReport(
        estimator=estimator, replicates=n, n_correct=n_correct,
        detection_rate=n_correct / n if n else 0.0,
        mean_sep=tuple(mean_sep), bias_sep=tuple(bias), bias_sep_se=tuple(se),
        rmsae=float(np.sqrt(np.mean(sq_err))) if sq_err else float("nan"),
        n_errors=n_err, wall_time_per_voxel=float(np.mean(times)) if len(times) else 0.0,
    )


def run_synthetic_experiment(cfg: ExperimentConfig, workers: int = 1) -> dict[str, MetricsReport]:
    """Run all replicates of one setting and summarize per estimator.

    Every estimator sees the same noisy replicate; the noise of replicate
    ``i`` comes from the stream ``(seed, i)`` so results do not depend on
    ``workers``.
    """
    reps = list(range(cfg.replicates))
    if workers <= 1:
        trial = _Trial(cfg)
        results = [trial.run(r) for r in reps]
        truth = trial.fibers.directions
    else:
        chunks = [reps[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(cfg,)) as ex:
            parts = list(ex.map(_run_chunk, chunks))
        results = [None] * len(reps)
        for chunk, part in zip(chunks, parts):
            for r, res in zip(chunk, part):
                results[r] = res
        truth = cfg.fibers().directions
    return {
        est: summarize(est, [res[est][0] for res in results], truth, [res[est][1] for res in results])
        for est in cfg.estimators
    }


REPORT_COLUMNS = [
    "setting", "n_fibers", "separation_deg", "b", "snr", "n_gradients", "n_used", "l_max",
    "l_max_super", "replicates", "seed", "lambda_major", "lambda_minor", "estimator",
    "detection_rate", "n_correct", "mean_sep", "bias_sep", "bias_sep_se", "rmsae", "n_errors",
]


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ";".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return "nan" if np.isnan(v) else repr(round(v, 10))
    return str(v)


def report_rows(cfg: ExperimentConfig, reports: dict[str, MetricsReport]) -> list[dict]:
    n_used = len(design_for_count(cfg.n_gradients))
    rows = []
    for est, rep in reports.items():
        rows.append({
            "setting": cfg.name, "n_fibers": cfg.n_fibers, "separation_deg": cfg.separation_deg,
            "b": cfg.b, "snr": cfg.snr, "n_gradients": cfg.n_gradients, "n_used": n_used,
            "l_max": cfg.l_max, "l_max_super": cfg.l_max_super, "replicates": cfg.replicates,
            "seed": cfg.seed, "lambda_major": cfg.lambda_major, "lambda_minor": cfg.lambda_minor,
            "estimator": ESTIMATOR_LABELS[est], "detection_rate": rep.detection_rate,
            "n_correct": rep.n_correct, "mean_sep": rep.mean_sep, "bias_sep": rep.bias_sep,
            "bias_sep_se": rep.bias_sep_se, "rmsae": rep.rmsae, "n_errors": rep.n_errors,
        })
    return rows


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_COLUMNS)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def format_report_table(rows: Sequence[dict]) -> str:
    lines = [f"{'setting':<14}{'estimator':<10}{'D.R.':>7}{'Bias.Sep (s.e.)':>22}{'RMSAE':>9}"]
    for row in rows:
        bias = "; ".join("-" if np.isnan(b) else f"{b:.2f} ({'-' if np.isnan(s) else f'{s:.2f}'})"
                         for b, s in zip(row["bias_sep"], row["bias_sep_se"]))
        rm = "-" if np.isnan(row["rmsae"]) else f"{row['rmsae']:.2f}"
        label = row["setting"] or f"{row['separation_deg']:g}deg b{row['b']:g}"
        lines.append(f"{label:<14}{row['estimator']:<10}{row['detection_rate']:>7.0%}{bias:>22}{rm:>9}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# timing

def synthetic_voxels(n_voxels: int, gradients: np.ndarray, kernel: ResponseKernel, snr: float,
                     seed: int, separation_deg: float = 45.0) -> np.ndarray:
    """Randomly oriented two-fiber voxels with Rician noise, ``(n_voxels, n)``."""
    rng = make_rng((seed, 0xBE4C))
    base = FiberConfiguration.symmetric(2, separation_deg).directions
    out = np.empty((n_voxels, len(gradients)))
    for v in range(n_voxels):
        q = rng.standard_normal(4)
        q /= np.linalg.norm(q)
        w, x, y, z = q
        Rm = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ])
        S = synthesize_signal(FiberConfiguration.equal(base @ Rm.T), kernel, gradients)
        out[v] = add_rician_noise(S, 1.0, snr, (seed, v))
    return out


def _fit_range(design: DeconvolutionDesign, Y: np.ndarray, est: str) -> int:
    failures = 0
    for y in Y:
        try:
            design.fit(y, est)
        except (np.linalg.LinAlgError, ValueError):
            failures += 1
    return failures


def _timed_fits(design: DeconvolutionDesign, Y: np.ndarray, est: str, threads: int) -> float:
    t0 = time.perf_counter()
    if threads <= 1:
        _fit_range(design, Y, est)
    else:
        parts = np.array_split(Y, threads)
        with ThreadPoolExecutor(threads) as ex:
            list(ex.map(lambda p: _fit_range(design, p, est), parts))
    return time.perf_counter() - t0


@dataclass
class BenchmarkResult:
    n_voxels: int
    threads: int
    n_gradients: int
    l_max: int
    l_max_super: int
    backend: str
    seconds: dict = field(default_factory=dict)


def benchmark_throughput(n_voxels: int, cfg: FitConfig | None = None, threads: int = 1,
                         n_gradients: int = 91, b: float = 3000.0, snr: float = 50.0,
                         seed: int = 1, estimators: Sequence[str] = ESTIMATORS,
                         include_batch: bool = True) -> BenchmarkResult:
    """Wall time to fit ``n_voxels`` synthetic voxels with each estimator.

    SHridge is timed with its full BIC grid; SCSD as SHridge followed by
    superCSD.  ``seconds`` maps ``"<estimator>/serial"`` and, when
    ``threads > 1``, ``"<estimator>/parallel"`` to wall seconds.  With
    ``include_batch`` the vectorized BJS path is timed too, once per
    available kernel backend.
    """
    from . import kernels

    cfg = cfg or FitConfig(l_max=10, l_max_super=10)
    grad = design_for_count(n_gradients).directions
    kernel = ResponseKernel(1.7e-3, 3e-4, b, 1.0, max(16, cfg.l_max_super))
    design = DeconvolutionDesign(grad, kernel, cfg, icosphere_grid(4))
    design._ridge_cache()
    Y = synthetic_voxels(n_voxels, grad, kernel, snr, seed)
    res = BenchmarkResult(n_voxels, threads, len(grad), cfg.l_max, cfg.l_max_super, kernels.BACKEND)
    for est in estimators:
        res.seconds[f"{est}/serial"] = _timed_fits(design, Y, est, 1)
        if threads > 1:
            res.seconds[f"{est}/parallel"] = _timed_fits(design, Y, est, threads)
    if include_batch:
        backends = [("python", kernels.python)]
        if kernels.compiled() is not None:
            backends.append(("compiled", kernels.compiled()))
        for name, mod in backends:
            t0 = time.perf_counter()
            mod.bjs_batch(design, Y)
            res.seconds[f"bjs-batch-{name}/serial"] = time.perf_counter() - t0
    return res


# --------------------------------------------------------------------------
# group analysis

def lateralization_score(left_count: int, right_count: int) -> float:
    """``(L - R) / ((L + R) / 2)``, in [-2, 2]."""
    if left_count < 0 or right_count < 0:
        raise ValueError("streamline counts must be nonnegative")
    total = left_count + right_count
    if total == 0:
        raise ValueError("lateralization score undefined when both counts are zero")
    return (left_count - right_count) / (total / 2.0)


@dataclass(frozen=True)
class AnovaTerm:
    df: int
    ss: float
    ms: float
    f: float
    p: float


@dataclass(frozen=True)
class AnovaResult:
    """Sequential (Type I) two-way ANOVA with interaction.

    ``contrast`` is the difference between the two handedness levels (first
    minus second, averaged over gender cells) with its 95% interval.
    """

    terms: dict
    grand_mean: float
    order: tuple[str, ...]
    handedness_levels: tuple
    gender_levels: tuple
    contrast: tuple[float, float, float]
    residuals: np.ndarray = field(repr=False)

    def table(self) -> str:
        names = {"handedness": "Handedness", "gender": "Gender",
                 "interaction": "Handedness * Gender", "residual": "Residuals"}
        lines = [f"{'':<22}{'d.f.':>6}{'SS':>12}{'MS':>12}{'F-value':>10}{'p-value':>10}"]
        for key in (*self.order, "residual"):
            t = self.terms[key]
            if key == "residual":
                lines.append(f"{names[key]:<22}{t.df:>6}{t.ss:>12.3f}{t.ms:>12.3f}")
            else:
                lines.append(f"{names[key]:<22}{t.df:>6}{t.ss:>12.3f}{t.ms:>12.3f}{t.f:>10.3f}{t.p:>10.4f}")
        est, lo, hi = self.contrast
        lines.append(f"contrast {self.handedness_levels[0]} - {self.handedness_levels[1]}: "
                     f"{est:.3f}, 95% CI ({lo:.3f}, {hi:.3f})")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["term", "df", "ss", "ms", "f", "p"])
        for key in (*self.order, "residual"):
            t = self.terms[key]
            w.writerow([key, t.df, repr(t.ss), repr(t.ms), repr(t.f), repr(t.p)])
        return buf.getvalue()


def _levels(labels, given):
    labels = list(labels)
    lv = tuple(given) if given is not None else tuple(sorted(set(labels), key=str))
    if len(lv) != 2 or set(labels) - set(lv):
        raise ValueError(f"factor must have exactly two levels, got {sorted(set(labels), key=str)}")
    return lv, np.array([1.0 if x == lv[0] else -1.0 for x in labels])


def _rss(X: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    beta = np.linalg.lstsq(X, y, rcond=None)[0]
    r = y - X @ beta
    return float(r @ r), r


def two_way_anova(scores, handedness, gender, order: Sequence[str] = ("handedness", "gender", "interaction"),
                  handedness_levels=None, gender_levels=None, alpha: float = 0.05) -> AnovaResult:
    """Two-way ANOVA with interaction using sequential sums of squares.

    Effects are sum-to-zero coded; terms enter in ``order``.  F statistics
    are 0 (p = 1) for terms with zero sum of squares when the residual mean
    square is also zero.
    """
    y = np.asarray(scores, dtype=np.float64)
    N = len(y)
    if N < 5 or len(handedness) != N or len(gender) != N:
        raise ValueError("need at least 5 observations with one label per factor each")
    h_lv, h = _levels(handedness, handedness_levels)
    g_lv, g = _levels(gender, gender_levels)
    cells = {(a, b): np.flatnonzero((h == a) & (g == b)) for a in (1.0, -1.0) for b in (1.0, -1.0)}
    if any(len(ix) == 0 for ix in cells.values()):
        raise ValueError("every handedness x gender cell needs at least one observation")
    if sorted(order) != ["gender", "handedness", "interaction"]:
        raise ValueError("order must be a permutation of handedness, gender, interaction")
    cols = {"handedness": h, "gender": g, "interaction": h * g}

    X = np.ones((N, 1))
    prev, _ = _rss(X, y)
    ss = {}
    for term in order:
        X = np.column_stack([X, cols[term]])
        cur, resid = _rss(X, y)
        ss[term] = max(prev - cur, 0.0)
        prev = cur
    df_res = N - 4
    ms_res = prev / df_res
    terms = {}
    for term in order:
        if ms_res > 0:
            F = ss[term] / ms_res
            p = float(stats.f.sf(F, 1, df_res))
        elif ss[term] > 0:
            F, p = float("inf"), 0.0
        else:
            F, p = 0.0, 1.0
        terms[term] = AnovaTerm(1, ss[term], ss[term], float(F), p)
    terms["residual"] = AnovaTerm(df_res, prev, ms_res, float("nan"), float("nan"))

    m = {k: y[ix].mean() for k, ix in cells.items()}
    est = 0.5 * ((m[1.0, 1.0] - m[-1.0, 1.0]) + (m[1.0, -1.0] - m[-1.0, -1.0]))
    se = np.sqrt(ms_res * 0.25 * sum(1.0 / len(ix) for ix in cells.values()))
    q = stats.t.ppf(1 - alpha / 2, df_res)
    return AnovaResult(terms, float(y.mean()), tuple(order), h_lv, g_lv,
                       (float(est), float(est - q * se), float(est + q * se)), resid)


def read_scores_csv(path) -> tuple[list, list, list, list]:
    """Columns ``subject_id, score, handedness, gender``."""
    ids, sc, hand, gen = [], [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            ids.append(row["subject_id"])
            sc.append(float(row["score"]))
            hand.append(row["handedness"].strip())
            gen.append(row["gender"].strip())
    return ids, sc, hand, gen


def cpu_count() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1
