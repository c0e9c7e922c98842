import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from bjsfod import experiment as ex
from bjsfod.experiment import (
    ExperimentConfig,
    MetricsReport,
    lateralization_score,
    load_experiment_configs,
    report_rows,
    run_synthetic_experiment,
    summarize,
    two_way_anova,
)
from bjsfod.model import FiberConfiguration, synthesize_signal


class TestLateralization:
    @pytest.mark.parametrize("l,r,expect", [(100, 100, 0.0), (300, 100, 1.0), (0, 100, -2.0),
                                            (100, 0, 2.0)])
    def test_examples(self, l, r, expect):
        assert lateralization_score(l, r) == expect

    def test_both_zero(self):
        with pytest.raises(ValueError):
            lateralization_score(0, 0)

    @given(st.integers(0, 10 ** 6), st.integers(0, 10 ** 6))
    def test_range_and_antisymmetry(self, l, r):
        if l + r == 0:
            return
        s = lateralization_score(l, r)
        assert -2.0 <= s <= 2.0
        assert s == -lateralization_score(r, l)


def _balanced(n_per=6, seed=0):
    rng = np.random.default_rng(seed)
    h, g, y = [], [], []
    means = {("R", "F"): 0.4, ("R", "M"): 0.1, ("L", "F"): -0.2, ("L", "M"): 0.3}
    for (a, b), mu in means.items():
        h += [a] * n_per
        g += [b] * n_per
        y += list(mu + 0.2 * rng.standard_normal(n_per))
    return np.array(y), h, g


def _closed_form_balanced(y, h, g):
    y, h, g = np.asarray(y), np.asarray(h), np.asarray(g)
    mu = y.mean()
    a = {lv: y[h == lv].mean() for lv in set(h)}
    b = {lv: y[g == lv].mean() for lv in set(g)}
    cell = {(i, j): y[(h == i) & (g == j)].mean() for i in a for j in b}
    ss_a = sum((a[h[k]] - mu) ** 2 for k in range(len(y)))
    ss_b = sum((b[g[k]] - mu) ** 2 for k in range(len(y)))
    ss_ab = sum((cell[h[k], g[k]] - a[h[k]] - b[g[k]] + mu) ** 2 for k in range(len(y)))
    ss_e = sum((y[k] - cell[h[k], g[k]]) ** 2 for k in range(len(y)))
    return ss_a, ss_b, ss_ab, ss_e


class TestAnova:
    def test_balanced_closed_form(self):
        y, h, g = _balanced()
        res = two_way_anova(y, h, g)
        ss_a, ss_b, ss_ab, ss_e = _closed_form_balanced(y, h, g)
        assert res.terms["handedness"].ss == pytest.approx(ss_a, abs=1e-10)
        assert res.terms["gender"].ss == pytest.approx(ss_b, abs=1e-10)
        assert res.terms["interaction"].ss == pytest.approx(ss_ab, abs=1e-10)
        assert res.terms["residual"].ss == pytest.approx(ss_e, abs=1e-10)

    def test_balanced_order_irrelevant(self):
        y, h, g = _balanced(seed=3)
        a = two_way_anova(y, h, g)
        b = two_way_anova(y, h, g, order=("interaction", "gender", "handedness"))
        for k in ("handedness", "gender", "interaction", "residual"):
            assert a.terms[k].ss == pytest.approx(b.terms[k].ss, abs=1e-10)

    def test_identical_scores(self):
        res = two_way_anova([0.5] * 12, ["a", "b"] * 6, ["x"] * 6 + ["y"] * 6)
        for k in ("handedness", "gender", "interaction", "residual"):
            assert res.terms[k].ss == pytest.approx(0.0, abs=1e-25)
        for k in ("handedness", "gender", "interaction"):
            assert res.terms[k].f == 0.0

    def test_unbalanced_degrees_of_freedom(self):
        rng = np.random.default_rng(4)
        h = ["R"] * 69 + ["L"] * 23 + ["R"] * 69 + ["L"] * 23
        g = ["M"] * 92 + ["F"] * 92
        res = two_way_anova(rng.standard_normal(184), h, g)
        assert [res.terms[k].df for k in ("handedness", "gender", "interaction", "residual")] == [1, 1, 1, 180]
        assert "Residuals" in res.table()

    @given(st.integers(0, 10 ** 6), st.integers(2, 9), st.integers(2, 9), st.integers(2, 9), st.integers(2, 9))
    def test_total_ss_decomposition(self, seed, n1, n2, n3, n4):
        rng = np.random.default_rng(seed)
        h = ["a"] * (n1 + n2) + ["b"] * (n3 + n4)
        g = ["x"] * n1 + ["y"] * n2 + ["x"] * n3 + ["y"] * n4
        y = rng.standard_normal(len(h)) + np.array([0.5 if k == "a" else 0 for k in h])
        res = two_way_anova(y, h, g)
        total = ((y - y.mean()) ** 2).sum()
        parts = sum(t.ss for t in res.terms.values())
        assert parts == pytest.approx(total, rel=1e-9)
        assert all(t.ss >= 0 for t in res.terms.values())
        assert sum(t.df for t in res.terms.values()) == len(y) - 1

    def test_matches_statsmodels_type1(self):
        sm = pytest.importorskip("statsmodels.formula.api")
        anova_lm = pytest.importorskip("statsmodels.stats.anova").anova_lm
        pd = pytest.importorskip("pandas")
        rng = np.random.default_rng(7)
        h = ["R"] * 30 + ["L"] * 10 + ["R"] * 30 + ["L"] * 10
        g = ["M"] * 40 + ["F"] * 40
        y = rng.standard_normal(80) + np.where(np.array(h) == "R", 0.3, 0.0)
        df = pd.DataFrame({"y": y, "h": h, "g": g})
        model = sm.ols("y ~ C(h, Sum) * C(g, Sum)", data=df).fit()
        ref = anova_lm(model, typ=1)
        res = two_way_anova(y, h, g)
        for ours, theirs in [("handedness", "C(h, Sum)"), ("gender", "C(g, Sum)"),
                             ("interaction", "C(h, Sum):C(g, Sum)"), ("residual", "Residual")]:
            assert res.terms[ours].ss == pytest.approx(ref.loc[theirs, "sum_sq"], rel=1e-9)
            if ours != "residual":
                assert res.terms[ours].p == pytest.approx(ref.loc[theirs, "PR(>F)"], rel=1e-6)

    def test_contrast_interval(self):
        y, h, g = _balanced(seed=9)
        res = two_way_anova(y, h, g, handedness_levels=("R", "L"))
        est, lo, hi = res.contrast
        y, h = np.asarray(y), np.asarray(h)
        assert est == pytest.approx(y[h == "R"].mean() - y[h == "L"].mean(), abs=1e-12)
        assert lo < est < hi

    def test_empty_cell_and_bad_levels(self):
        with pytest.raises(ValueError):
            two_way_anova([1, 2, 3, 4, 5, 6], ["a", "a", "b", "b", "b", "b"], ["x", "y", "x", "x", "x", "x"][:5] + ["x"])
        with pytest.raises(ValueError):
            two_way_anova([1, 2, 3, 4, 5], ["a", "b", "c", "a", "b"], ["x", "y", "x", "y", "x"])

    def test_read_scores_and_csv(self, tmp_path):
        p = tmp_path / "s.csv"
        p.write_text("subject_id,score,handedness,gender\n1,0.5,R,M\n2,-0.1,L,F\n")
        ids, sc, hand, gen = ex.read_scores_csv(p)
        assert ids == ["1", "2"] and sc == [0.5, -0.1] and hand == ["R", "L"] and gen == ["M", "F"]
        y, h, g = _balanced()
        assert two_way_anova(y, h, g).to_csv().splitlines()[0] == "term,df,ss,ms,f,p"


class TestSummarize:
    truth = np.array([[0, 0, 1.0], [1.0, 0, 0]])

    def test_counts_and_errors(self):
        good = [np.array([0, 0, 1.0]), np.array([1.0, 0, 0])]
        r = summarize("bjs", [good, None, [good[0]], good], self.truth, [0.1, 0.2, 0.3, 0.4])
        assert (r.replicates, r.n_correct, r.n_errors) == (4, 2, 1)
        assert r.detection_rate == 0.5
        assert r.bias == pytest.approx(0.0, abs=1e-9)
        assert r.rmsae == pytest.approx(0.0, abs=1e-9)
        assert r.wall_time_per_voxel == pytest.approx(0.25)

    def test_nothing_correct(self):
        r = summarize("bjs", [[], []], self.truth, [0, 0])
        assert r.detection_rate == 0 and np.isnan(r.rmsae) and np.isnan(r.bias)

    def test_three_fiber_pairs(self):
        t = np.eye(3)
        r = summarize("bjs", [list(t)], t, [0.0])
        assert len(r.bias_sep) == 3


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            ExperimentConfig(replicates=0)
        with pytest.raises(ValueError):
            ExperimentConfig(estimators=())
        with pytest.raises(ValueError):
            ExperimentConfig.from_dict({"bogus": 1})

    def test_load_settings_document(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text(json.dumps({"defaults": {"replicates": 3},
                                 "settings": [{"separation_deg": 30}, {"separation_deg": 60}]}))
        cfgs = load_experiment_configs(p)
        assert [c.separation_deg for c in cfgs] == [30, 60]
        assert all(c.replicates == 3 for c in cfgs)
        t = tmp_path / "c.toml"
        t.write_text('separation_deg = 75.0\nestimators = ["bjs"]\n')
        assert load_experiment_configs(t)[0].estimators == ("bjs",)


SMALL = dict(n_gradients=41, l_max=6, l_max_super=12, replicates=12, seed=77)


class TestRuns:
    @staticmethod
    def _key(reports):
        # repr keeps NaN entries comparable; timing is excluded
        return {k: repr(dataclasses.replace(v, wall_time_per_voxel=0.0)) for k, v in reports.items()}

    def test_reproducible(self):
        cfg = ExperimentConfig(**SMALL)
        assert self._key(run_synthetic_experiment(cfg)) == self._key(run_synthetic_experiment(cfg))

    def test_workers_do_not_change_results(self):
        cfg = ExperimentConfig(**{**SMALL, "replicates": 6, "estimators": ("bjs", "shridge")})
        assert self._key(run_synthetic_experiment(cfg)) == self._key(run_synthetic_experiment(cfg, workers=2))

    def test_report_rows(self):
        cfg = ExperimentConfig(**{**SMALL, "replicates": 2, "estimators": ("bjs",)})
        rows = report_rows(cfg, run_synthetic_experiment(cfg))
        assert rows[0]["n_used"] == 40 and rows[0]["estimator"] == "BJS"
        csv_text = ex.rows_to_csv(rows)
        assert csv_text.splitlines()[0].split(",") == ex.REPORT_COLUMNS
        assert "BJS" in ex.format_report_table(rows)


_UNRESOLVED = {
    (41, 45, "shridge"): "a level-6 SHridge FOD cannot resolve a 45 degree crossing",
    (41, 60, "shridge"): "a level-6 SHridge FOD cannot resolve a 60 degree crossing",
    (41, 45, "scsd"): "superCSD pulls 45 degree peaks inward by about 3.8 degrees without noise",
    (91, 45, "scsd"): "superCSD pulls 45 degree peaks inward by about 3.8 degrees without noise",
}


def _noiseless_cases():
    for n, sep in [(n, s) for n in (41, 91) for s in (45, 60, 75, 90)]:
        for est in ("bjs", "scsd", "shridge"):
            why = _UNRESOLVED.get((n, sep, est))
            marks = [pytest.mark.xfail(strict=True, reason=why)] if why else []
            yield pytest.param(n, sep, est, marks=marks, id=f"n{n}-{sep}deg-{est}")


_NOISELESS_CACHE: dict = {}


@pytest.mark.parametrize("n_grad,sep,est", list(_noiseless_cases()))
def test_noiseless_two_fibers(n_grad, sep, est):
    """SNR 1e12: every replicate resolves both fibers with RMSAE <= 2 degrees."""
    key = (n_grad, sep)
    if key not in _NOISELESS_CACHE:
        cfg = ExperimentConfig(n_gradients=n_grad, l_max=6 if n_grad == 41 else 10, l_max_super=12,
                               snr=1e12, separation_deg=float(sep), replicates=3)
        _NOISELESS_CACHE[key] = run_synthetic_experiment(cfg)
    r = _NOISELESS_CACHE[key][est]
    assert r.detection_rate == 1.0
    assert r.rmsae <= 2.0


class _RotatedTrial(ex._Trial):
    """Same setting with gradients and fibers rotated together."""

    def __init__(self, cfg, rotation):
        super().__init__(cfg)
        Q = rotation.as_matrix()
        self.grad = self.grad @ Q.T
        self.fibers = FiberConfiguration(self.fibers.directions @ Q.T, self.fibers.weights)
        self.signal = synthesize_signal(self.fibers, self.kernel, self.grad)
        self.design = ex.DeconvolutionDesign(self.grad, self.kernel, cfg.fit_config(), self.design.dense)


def _run_trial(trial, cfg):
    res = [trial.run(r) for r in range(cfg.replicates)]
    return {e: summarize(e, [x[e][0] for x in res], trial.fibers.directions, [0.0]) for e in cfg.estimators}


@pytest.mark.slow
def test_rotation_invariance():
    cfg = ExperimentConfig(n_gradients=91, l_max=8, l_max_super=12, separation_deg=60.0,
                           replicates=40, seed=5, estimators=("bjs", "shridge"))
    base = _run_trial(ex._Trial(cfg), cfg)
    for rot in Rotation.random(5, random_state=11):
        other = _run_trial(_RotatedTrial(cfg, rot), cfg)
        for est in cfg.estimators:
            a, b = base[est], other[est]
            p = max(a.detection_rate, b.detection_rate, 0.05)
            assert abs(a.detection_rate - b.detection_rate) <= 3 * np.sqrt(2 * p * (1 - p) / cfg.replicates) + 1e-9
            if a.n_correct > 5 and b.n_correct > 5:
                se = np.hypot(a.bias_sep_se[0], b.bias_sep_se[0])
                # grid quantization of the peak finder adds up to ~2 x 2.7 degrees of separation jitter
                assert abs(a.bias - b.bias) <= 3 * se + 1.0, (est, a.bias, b.bias, se)
                assert abs(a.rmsae - b.rmsae) <= 1.5, (est, a.rmsae, b.rmsae)


def test_metrics_report_fields():
    r = MetricsReport("bjs", 1, 1, 1.0, (1.0,), (0.5,), (0.1,), 2.0)
    assert r.bias == 0.5 and r.n_errors == 0
