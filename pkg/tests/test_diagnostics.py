import math

import numpy as np
import pytest

import anchorpu.diagnostics as diag
from anchorpu import (
    DataError,
    Dataset,
    FitConfig,
    ModelParams,
    accuracy,
    bootstrap_se,
    calibration_table,
    cross_validate,
    fit,
    predict_prob,
)
from anchorpu.diagnostics import _monotone_repair, _plug_in_measures
from anchorpu.estimation import FitResult
from anchorpu.model import sigmoid

from _oracles import rank_auc
from conftest import make_logistic_data


def _result_with(params, data, q_ratio=None):
    n_par = params.n_features + params.n_sens
    h = float(data.anchor.mean())
    return FitResult(
        params=params,
        vcov=np.full((n_par, n_par), np.nan),
        se=np.full(n_par, np.nan),
        loglik=0.0,
        h=h,
        q_ratio=h / float(params.sens[0]) if q_ratio is None else q_ratio,
        q_avg=0.0,
        q_ratio_se=float("nan"),
    )


def _logit(p):
    return math.log(p / (1.0 - p))


class TestCalibration:
    def test_counts_partition_the_data(self, rng):
        data, _, _ = make_logistic_data(rng, n=500, p=3, c=0.5)
        res = fit(data)
        cal = calibration_table(res, data)
        assert int(cal.n_unlabeled.sum() + cal.n_anchor.sum()) == data.n_rows

    def test_nonparametric_cases_total_identity(self, rng):
        # Summing p_hat_n * n_unlabeled over intervals telescopes to
        # (q* - h) * N exactly, independent of the interval layout.
        data, _, _ = make_logistic_data(rng, n=800, p=3, c=0.5)
        res = fit(data)
        cal = calibration_table(res, data)
        expected = (cal.q_star - data.anchor.mean()) * data.n_rows
        assert np.nansum(cal.nonparametric_cases) == pytest.approx(expected, rel=1e-10)

    def test_single_interval_with_tiny_sensitivity_collapses_to_mean_probability(self):
        # With c ~ 0 the model-based estimate over one interval covering
        # everything reduces to the mean fitted probability.
        rng = np.random.default_rng(3)
        design = np.column_stack([np.ones(200), rng.normal(size=200)])
        anchor = np.zeros(200, dtype=int)
        anchor[:5] = 1
        data = Dataset(design=design, anchor=anchor)
        params = ModelParams(beta=[-1.0, 0.8], sens=[1e-12])
        res = _result_with(params, data, q_ratio=0.5)
        cal = calibration_table(res, data, edges=[0.0, 1.0])
        probs = sigmoid(data.design @ params.beta)
        assert cal.p_model[0] == pytest.approx(probs.mean(), abs=1e-9)

    def test_zero_unlabeled_interval_reported_as_na_not_zero(self):
        # All unlabeled probabilities sit below 0.5, anchors above: the top
        # intervals with anchors but no unlabeled rows must be NaN.
        n = 60
        anchor = np.zeros(n, dtype=int)
        anchor[:10] = 1
        logits = np.where(anchor == 1, _logit(0.95), _logit(0.05))
        data = Dataset(
            design=np.column_stack([logits, np.ones(n)]),
            anchor=anchor,
            feature_names=("score", "one"),
        )
        params = ModelParams(beta=[1.0, 0.0], sens=[0.5])
        cal = calibration_table(_result_with(params, data, q_ratio=0.4), data)
        top = -1
        assert cal.n_unlabeled[top] == 0 and cal.n_anchor[top] == 10
        assert np.isnan(cal.model_predicted_cases[top])
        assert np.isnan(cal.nonparametric_cases[top])

    def test_q_star_must_exceed_anchor_fraction(self, rng):
        data, _, _ = make_logistic_data(rng, n=300, p=2, c=0.5)
        res = fit(data)
        h = float(data.anchor.mean())
        with pytest.raises(DataError):
            calibration_table(res, data, q_star=h)
        with pytest.raises(DataError):
            calibration_table(res, data, q_star=h / 2)
        with pytest.raises(DataError):
            calibration_table(res, data, q_star=1.0)

    def test_edges_must_partition_unit_interval(self, rng):
        data, _, _ = make_logistic_data(rng, n=300, p=2, c=0.5)
        res = fit(data)
        with pytest.raises(DataError):
            calibration_table(res, data, edges=[0.1, 0.5, 1.0])
        with pytest.raises(DataError):
            calibration_table(res, data, edges=[0.0, 0.5, 0.5, 1.0])

    def test_interval_membership_is_left_open(self):
        # A probability exactly on an inner edge belongs to the lower interval.
        n = 40
        anchor = np.zeros(n, dtype=int)
        anchor[:4] = 1
        logits = np.full(n, _logit(0.5))
        data = Dataset(
            design=np.column_stack([logits, np.ones(n)]),
            anchor=anchor,
            feature_names=("score", "one"),
        )
        params = ModelParams(beta=[1.0, 0.0], sens=[0.5])
        cal = calibration_table(
            _result_with(params, data, q_ratio=0.3), data, edges=[0.0, 0.5, 1.0]
        )
        assert cal.n_unlabeled[0] + cal.n_anchor[0] == n
        assert cal.n_unlabeled[1] + cal.n_anchor[1] == 0

    def test_stratified_uses_per_row_sensitivity(self):
        rng = np.random.default_rng(12)
        data, params, _ = make_logistic_data(rng, n=2000, p=2, c=[0.3, 0.8], k=2)
        res = fit(data)
        cal = calibration_table(res, data)
        c_row = res.params.sens[data.stratum]
        p = sigmoid(data.design @ res.params.beta)
        idx = np.searchsorted(cal.edges, p, side="left") - 1
        j = int(np.argmax(cal.n_unlabeled))
        mask = idx == j
        manual = ((1 - c_row[mask]) * p[mask]).sum() / (1 - c_row[mask] * p[mask]).sum()
        assert cal.p_model[j] == pytest.approx(manual, rel=1e-12)

    def test_misspecified_model_shows_larger_discrepancy(self):
        # Dropping the strong predictor trio leaves a visibly worse count
        # match than the well-specified fit on the same cohort.
        from anchorpu.simulation import SimDesign, generate

        train, _ = generate(
            SimDesign(n_train=10_000, n_test=500, replicates=1, seed=101), 0
        )
        full = train.data
        cols = [0, 1, 2, 3, 4, 5, 6]
        dropped = Dataset(
            design=full.design[:, cols],
            anchor=full.anchor,
            feature_names=tuple(full.feature_names[j] for j in cols),
        )
        cal_full = calibration_table(fit(full), full)
        cal_drop = calibration_table(fit(dropped), dropped)
        assert cal_drop.max_count_discrepancy > 2.0 * cal_full.max_count_discrepancy


class TestAccuracy:
    def test_perfect_separation_auc_exactly_one(self):
        # Anchor-positives all at P=0.99, the rest at P=0.01; trapezoid AUC
        # must be exactly 1 and must agree with the rank-based oracle.
        n = 100
        anchor = np.zeros(n, dtype=int)
        anchor[:10] = 1
        logits = np.where(anchor == 1, _logit(0.99), _logit(0.01))
        data = Dataset(
            design=np.column_stack([logits, np.ones(n)]),
            anchor=anchor,
            feature_names=("score", "one"),
        )
        params = ModelParams(beta=[1.0, 0.0], sens=[0.5])
        rep = accuracy(_result_with(params, data, q_ratio=0.2), data)
        p = sigmoid(data.design @ params.beta)
        assert rep.auc == 1.0
        assert rank_auc(p[anchor == 1], p[anchor == 0]) == 1.0

    def test_tiny_threshold_gives_tpr_one_and_flagged_npv(self, rng):
        data, params, _ = make_logistic_data(rng, n=300, p=2, beta=[1.0, 0.5], c=0.5)
        res = fit(data)
        rep = accuracy(res, data, thresholds=[1e-9, 0.5])
        assert rep.tpr[0] == 1.0
        assert rep.empty_set_flags["npv"][0]
        assert rep.npv[0] == 1.0
        assert not rep.empty_set_flags["npv"][1]

    def test_raw_values_retained_and_clamped_flagged(self):
        # Small samples push the FPR plug-in negative at high thresholds;
        # the raw value is kept, the headline value is clamped and flagged.
        n = 80
        anchor = np.zeros(n, dtype=int)
        anchor[:8] = 1
        logits = np.where(anchor == 1, _logit(0.97), _logit(0.03))
        data = Dataset(
            design=np.column_stack([logits, np.ones(n)]),
            anchor=anchor,
            feature_names=("score", "one"),
        )
        params = ModelParams(beta=[1.0, 0.0], sens=[0.5])
        rep = accuracy(_result_with(params, data, q_ratio=0.2), data, thresholds=[0.5])
        assert rep.raw["fpr"][0] < 0
        assert rep.fpr[0] == 0.0
        assert rep.clamp_flags["fpr"][0]

    def test_monotone_after_repair(self, rng):
        data, _, _ = make_logistic_data(rng, n=400, p=3, c=0.5)
        res = fit(data)
        rep = accuracy(res, data, thresholds=np.linspace(0.05, 0.95, 19))
        assert np.all(np.diff(rep.tpr) <= 1e-12)
        assert np.all(np.diff(rep.fpr) <= 1e-12)

    def test_auc_invariant_to_thresholds_with_no_mass(self, rng):
        # Adding sweep points where no fitted probability falls cannot move
        # the trapezoid value.
        data, _, _ = make_logistic_data(rng, n=200, p=2, c=0.5)
        res = fit(data)
        p = sigmoid(data.design @ res.params.beta)
        s = data.anchor

        def auc_over(grid):
            raw, _, _ = _plug_in_measures(p, s, grid)
            tpr = _monotone_repair(np.clip(raw["tpr"], 0, 1))
            fpr = _monotone_repair(np.clip(raw["fpr"], 0, 1))
            xs = np.concatenate([[0.0], fpr[::-1], [1.0]])
            ys = np.concatenate([[0.0], tpr[::-1], [1.0]])
            return float(np.trapezoid(ys, xs))

        base = np.unique(p)
        extra = np.unique(np.concatenate([base, (base[:-1] + base[1:]) / 2.0]))
        assert auc_over(base) == pytest.approx(auc_over(extra), abs=1e-14)
        assert rep_auc_equal(res, data, auc_over(base))

    def test_degenerate_prevalence_flagged_not_fatal(self):
        # Mean fitted probability below the anchor fraction breaks the
        # PPV/NPV identities; flagged per measure, no exception.
        n = 50
        anchor = np.zeros(n, dtype=int)
        anchor[:25] = 1
        data = Dataset(
            design=np.column_stack([np.full(n, -3.0), np.ones(n)]),
            anchor=anchor,
            feature_names=("score", "one"),
        )
        params = ModelParams(beta=[1.0, 0.0], sens=[0.9])
        rep = accuracy(_result_with(params, data, q_ratio=0.6), data)
        assert rep.degenerate

    def test_threshold_validation(self, rng):
        data, _, _ = make_logistic_data(rng, n=100, p=2, c=0.5)
        res = fit(data)
        with pytest.raises(ValueError):
            accuracy(res, data, thresholds=[0.0, 0.5])
        with pytest.raises(ValueError):
            accuracy(res, data, thresholds=[0.5, 0.2])


def rep_auc_equal(res, data, expected):
    return accuracy(res, data).auc == pytest.approx(expected, abs=1e-14)


class TestBootstrap:
    def test_identical_resamples_give_zero_se(self, rng, monkeypatch):
        data, _, _ = make_logistic_data(rng, n=250, p=2, c=0.5)
        monkeypatch.setattr(
            diag, "_resample_indices", lambda _rng, n: np.arange(n)
        )
        rep = bootstrap_se(data, n_boot=2, seed=1)
        assert np.all(rep.se.tpr == 0.0)
        assert np.all(rep.se.ppv == 0.0)
        assert rep.se.auc == 0.0
        assert rep.se.n_failed == 0

    def test_bootstrap_sensitivity_consistent_with_full_fit(self):
        rng = np.random.default_rng(14)
        data, _, _ = make_logistic_data(rng, n=700, p=2, beta=[0.0, 1.2], c=0.5)
        full = fit(data)
        rep = bootstrap_se(data, n_boot=30, seed=2)
        gap = abs(rep.se.sens_mean[0] - full.params.sens[0])
        assert gap <= 2.0 * rep.se.sens_sd[0]

    def test_failed_replicates_counted_and_warned(self, rng, monkeypatch):
        data, _, _ = make_logistic_data(rng, n=200, p=2, c=0.5)
        anchor_row = int(np.flatnonzero(data.anchor == 1)[0])
        real = diag._resample_indices
        calls = {"n": 0}

        def flaky(_rng, n):
            calls["n"] += 1
            if calls["n"] % 2 == 0:
                return np.full(n, anchor_row)  # violates the data contract
            return real(_rng, n)

        monkeypatch.setattr(diag, "_resample_indices", flaky)
        rep = bootstrap_se(data, n_boot=10, seed=3)
        assert rep.se.n_failed == 5
        assert rep.se.warning is not None

    def test_requires_two_replicates(self, rng):
        data, _, _ = make_logistic_data(rng, n=200, p=2, c=0.5)
        with pytest.raises(ValueError):
            bootstrap_se(data, n_boot=1)

    def test_bootstrap_se_magnitude_on_synthetic_cohort(self):
        # At 10% prevalence and c=0.5 the across-replicate spread of the
        # PPV estimate at cutoff 0.5 on a 5000-row cohort is about 0.056;
        # a 200-resample bootstrap on one such cohort must land within 30%.
        from anchorpu.simulation import SimDesign, generate

        _, test = generate(
            SimDesign(prevalence_target=0.10, c_true=0.5, replicates=1, seed=606), 0
        )
        rep = bootstrap_se(test.data, n_boot=200, seed=7)
        assert 0.7 * 0.056 <= rep.se.ppv[3] <= 1.3 * 0.056


class TestCrossValidate:
    def test_duplicated_halves_reproduce_full_data_accuracy(self, rng, monkeypatch):
        data, _, _ = make_logistic_data(rng, n=300, p=2, c=0.5)
        doubled = data.take(np.concatenate([np.arange(300), np.arange(300)]))
        monkeypatch.setattr(
            diag,
            "_fold_assignment",
            lambda d, folds, r: np.concatenate([np.zeros(300, int), np.ones(300, int)]),
        )
        cv = cross_validate(doubled, folds=2, seed=0)
        full = accuracy(fit(doubled), doubled)
        np.testing.assert_allclose(cv.tpr, full.tpr, atol=1e-6)
        np.testing.assert_allclose(cv.ppv, full.ppv, atol=1e-6)
        assert cv.auc == pytest.approx(full.auc, abs=1e-6)

    def test_fold_means_stable_under_reshuffle(self):
        rng = np.random.default_rng(23)
        data, _, _ = make_logistic_data(
            rng, n=4000, p=3, beta=[-1.0, 1.5, -1.0], c=0.5
        )
        a = cross_validate(data, folds=10, seed=1)
        b = cross_validate(data, folds=10, seed=2)
        assert a.fold_aucs != b.fold_aucs
        assert abs(a.auc - b.auc) < 0.005

    def test_anchors_spread_across_folds(self, rng):
        data, _, _ = make_logistic_data(rng, n=400, p=2, c=0.5)
        assign = diag._fold_assignment(
            data, 5, np.random.default_rng(0)
        )
        per_fold = np.bincount(assign[data.anchor == 1], minlength=5)
        assert per_fold.max() - per_fold.min() <= 1

    def test_fold_without_anchor_positive_errors_after_one_retry(self):
        # One anchor-positive row cannot cover two folds.
        design = np.column_stack([np.ones(40), np.linspace(-1, 1, 40)])
        anchor = np.zeros(40, dtype=int)
        anchor[0] = 1
        data = Dataset(design=design, anchor=anchor)
        with pytest.raises(DataError):
            cross_validate(data, folds=2, seed=0)

    def test_heldout_scores_use_heldout_anchor_fraction(self, rng, monkeypatch):
        data, _, _ = make_logistic_data(rng, n=500, p=2, c=0.5)
        seen = []
        orig = diag.accuracy

        def spy(result, d, thresholds=None):
            rep = orig(result, d, thresholds)
            seen.append((d.n_rows, rep.h))
            return rep

        monkeypatch.setattr(diag, "accuracy", spy)
        cross_validate(data, folds=5, seed=0)
        assert len(seen) == 5
        assert all(rows < data.n_rows for rows, _ in seen)
