import itertools
import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from drrspec.cohort import SynthConfig, generate_cohort
from drrspec.evaluation import (DEFAULT_K_GRID, WIDE_LAMBDA_GRID, CVSettings, auroc,
                                auroc_columns, balanced_accuracy, check_no_leakage,
                                column_ranks, fold_relevance_diagnostics, lda_fit, lda_predict,
                                make_folds, model_count, nested_cv, patient_aggregate,
                                pick_peaks_auroc, select_k, select_lambda, select_log_mean,
                                stratified_folds)
from drrspec.training import TrainConfig


# ---------------------------------------------------------------- metrics


def test_balanced_accuracy_examples():
    assert balanced_accuracy([0, 1, 1, 0], [0, 1, 1, 0]) == 1.0
    assert balanced_accuracy([0, 0, 0, 0], [0, 0, 1, 1]) == 0.5
    pred = [0, 0, 0, 1, 1, 1, 0, 0]
    true = [0, 0, 0, 0, 1, 1, 1, 1]
    assert balanced_accuracy(pred, true) == 0.625
    with pytest.raises(ValueError):
        balanced_accuracy([0, 1], [1, 1])


def test_patient_aggregate_examples():
    assert patient_aggregate([0, 0, 1], ["a"] * 3) == {"a": 0}
    assert patient_aggregate([1, 1], ["b", "b"]) == {"b": 1}
    assert patient_aggregate([0, 1], ["c", "c"]) == {"c": 0}
    assert patient_aggregate([1, 0, 1, 1], ["x", "y", "x", "y"]) == {"x": 1, "y": 0}


def test_auroc_examples():
    assert auroc([1, 2, 3, 4], [0, 0, 1, 1]) == 1.0
    assert auroc([5, 5, 5, 5], [0, 1, 0, 1]) == 0.5
    assert auroc([1, 2, 3, 4], [0, 1, 0, 1]) == 0.75
    with pytest.raises(ValueError):
        auroc([1, 2], [1, 1])


@given(st.integers(0, 2**31 - 1))
def test_column_ranks_match_pairwise_count(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 4, size=(int(rng.integers(1, 12)), 3)).astype(float)
    R = column_ranks(X)
    for j in range(3):
        col = X[:, j]
        for i, v in enumerate(col):
            assert R[i, j] == np.sum(col < v) + 0.5 * (np.sum(col == v) + 1)


def test_pick_peaks_examples(rng):
    X = rng.normal(size=(20, 6))
    y = np.repeat([0, 1], 10)
    np.testing.assert_array_equal(pick_peaks_auroc(X, y, 6), np.arange(6))
    X[:, 4] = y * 10.0
    np.testing.assert_array_equal(pick_peaks_auroc(X, y, 1), [4])
    X[:, 2] = -y * 10.0
    assert list(pick_peaks_auroc(X, y, 1, two_sided=False)) == [4]
    assert list(pick_peaks_auroc(X, y, 2)) == [2, 4]
    with pytest.raises(ValueError):
        pick_peaks_auroc(X, y, 0)


@pytest.mark.parametrize("seed", range(20))
def test_pick_peaks_matches_exhaustive_ranking(seed):
    rng = np.random.default_rng(seed)
    X = rng.integers(0, 5, size=(10, 5)).astype(float)
    y = np.array([0, 1] * 5)
    rng.shuffle(y)
    # brute force: pairwise win counts, then sort by (-|auc - 1/2|, index)
    aucs = []
    for j in range(5):
        pos, neg = X[y == 1, j], X[y == 0, j]
        wins = sum(1.0 if a > b else 0.5 if a == b else 0.0 for a in pos for b in neg)
        aucs.append(wins / (len(pos) * len(neg)))
    order = sorted(range(5), key=lambda j: (-abs(aucs[j] - 0.5), j))
    np.testing.assert_array_equal(pick_peaks_auroc(X, y, 3), sorted(order[:3]))
    np.testing.assert_allclose(auroc_columns(X, y), aucs, rtol=0, atol=1e-15)


# ---------------------------------------------------------------- LDA


def test_lda_symmetric_boundary():
    F = np.array([-1.2, -1.0, -0.8, 0.8, 1.0, 1.2])
    y = np.array([0, 0, 0, 1, 1, 1])
    m = lda_fit(F, y)
    # the discriminant difference vanishes at x = 0
    assert abs(m.intercept[1] - m.intercept[0]) < 1e-12
    np.testing.assert_array_equal(lda_predict(m, np.array([-0.01, 0.01])), [0, 1])


def test_lda_separable_blobs_match_mahalanobis_oracle(rng):
    F = np.concatenate([rng.normal([0, 0], 0.3, size=(30, 2)),
                        rng.normal([3, 1], 0.3, size=(30, 2))])
    y = np.repeat([0, 1], 30)
    m = lda_fit(F, y, shrinkage=0.1)
    pred = lda_predict(m, F)
    assert np.array_equal(pred, y)
    # oracle: nearest mean in the shrunk pooled metric (equal priors)
    means = np.array([F[y == c].mean(0) for c in (0, 1)])
    S = sum((F[y == c] - means[c]).T @ (F[y == c] - means[c]) for c in (0, 1)) / (60 - 2)
    S = 0.9 * S + 0.1 * np.trace(S) / 2 * np.eye(2)
    P = np.linalg.inv(S)
    dist = np.array([[(f - mu) @ P @ (f - mu) for mu in means] for f in F])
    np.testing.assert_array_equal(pred, dist.argmin(axis=1))


def test_lda_singular_covariance_rejected():
    F = np.zeros((6, 2))
    y = np.array([0, 0, 0, 1, 1, 1])
    with pytest.raises(np.linalg.LinAlgError):
        lda_fit(F, y)
    with pytest.raises(ValueError):
        lda_fit(np.ones((3, 1)), np.zeros(3, dtype=int))


# ---------------------------------------------------------------- folds and selection


def test_make_folds_sizes():
    assert [len(g) for g in make_folds([f"p{i}" for i in range(10)])] == [2] * 5
    groups = make_folds([f"p{i}" for i in range(13)], 5, seed=1)
    assert [len(g) for g in groups] == [3, 3, 3, 2, 2]
    assert sorted(itertools.chain(*groups)) == sorted(f"p{i}" for i in range(13))
    assert make_folds(range(13), 5, 7) == make_folds(range(13), 5, 7)
    with pytest.raises(ValueError):
        make_folds(range(3), 5)


def test_stratified_folds_hold_both_classes():
    labels = {f"p{i}": i % 2 for i in range(20)}
    groups = stratified_folds(labels, 5, seed=3)
    assert sorted(itertools.chain(*groups)) == sorted(labels)
    for g in groups:
        assert {labels[p] for p in g} == {0, 1}
    assert stratified_folds(labels, 5, 3) == groups


def test_select_lambda_rules():
    G = list(WIDE_LAMBDA_GRID)
    scores = [0.5] * 7
    scores[4] = 0.9  # 1e-3
    assert select_lambda(G, scores) == pytest.approx(10 ** -2.5)
    scores = [0.5] * 6 + [0.9]
    assert select_lambda(G, scores) == 1e-2
    assert select_lambda([0.1], [0.3]) == 0.1
    # ties go to the larger lambda before stepping up
    assert select_lambda([1, 2, 3, 4], [0.8, 0.8, 0.1, 0.1]) == 3


def test_select_k_rules():
    assert select_k([5, 10, 20], [0.9, 0.1, 0.1]) == 5
    assert select_k([5, 10, 20, 40, 80], [0, 0, 0, 1, 0]) == 20
    assert select_k([5, 10, 20, 40], [0.1, 0.2, 0.3, 0.4]) == 20
    assert select_k([5, 10, 20, 40], [0.1, 0.9, 0.9, 0.1]) == 5


def test_select_log_mean():
    assert select_log_mean([1e-4, 1e-3, 1e-2], [0.8, 0.8, 0.5]) == pytest.approx(10 ** -3.5)


def test_model_count():
    assert model_count(2, 5, 5, 7) == 360
    assert model_count(2, 3, 2, 4) == 54
    assert model_count(2, 5, 5, 7, "unregularized-nn") == 10
    assert model_count(2, 5, 5, len(DEFAULT_K_GRID), "roc-lda") == 2 * 5 * 5 * 16 + 10


def test_settings_defaults_and_aliases():
    assert CVSettings(method="unregularized-nn").method == "plain-nn"
    assert CVSettings(method="roc-lda").grid == DEFAULT_K_GRID
    with pytest.raises(ValueError):
        CVSettings(method="svm")


# ---------------------------------------------------------------- nested CV


@pytest.fixture(scope="module")
def small_cohort():
    cfg = SynthConfig(patients_per_class=6, spots_per_patient=(4, 6), n_bins=360,
                      n_background=10, biomarkers=(((850.0, 0.5), (950.0, 0.5)),
                                                   ((880.0, 0.5), (990.0, 0.5))))
    return generate_cohort(cfg)


def test_nested_roc_lda_bookkeeping(small_cohort, tmp_path):
    settings = CVSettings(method="roc-lda", grid=(2, 4, 8), outer_folds=3, inner_folds=2)
    rep = nested_cv(small_cohort, settings)
    assert rep.model_count == model_count(2, 3, 2, 3, "roc-lda") == 42
    assert len(rep.folds) == 6
    assert check_no_leakage(rep, small_cohort)
    # every spectrum is predicted exactly once (each patient is tested once per lab)
    assert sorted(rep.predictions["sample_id"]) == sorted(small_cohort.sample_ids)
    for rec in rep.folds:
        assert rec["chosen"] in (2, 4, 8)
        assert len(rec["mean_validation_scores"]) == 3
    rep.write(tmp_path)
    header = (tmp_path / "predictions.csv").read_text().splitlines()[0]
    assert header == "sample_id,patient_id,train_lab,fold,pred,true"
    data = json.loads((tmp_path / "cv_report.json").read_text())
    assert data["aggregate"]["model_count"] == 42
    assert 0.0 <= rep.patient_balanced_accuracy() <= 1.0


def test_leakage_check_catches_tampering(small_cohort):
    rep = nested_cv(small_cohort, CVSettings(method="roc-lda", grid=(2, 4), outer_folds=2,
                                             inner_folds=2))
    rec = rep.folds[0]
    rec["train_patients"] = rec["train_patients"] + [rec["test_patients"][0]]
    with pytest.raises(AssertionError):
        check_no_leakage(rep, small_cohort)


def test_nested_nn_runs_and_is_reproducible(small_cohort):
    settings = CVSettings(method="drr-nn", grid=(1e-3, 1e-2), outer_folds=2, inner_folds=2,
                          train=TrainConfig(epochs=1, lr=3e-3))
    a = nested_cv(small_cohort, settings)
    b = nested_cv(small_cohort, settings)
    assert a.model_count == 2 * 2 * 2 * 2 + 4
    np.testing.assert_array_equal(a.predictions["pred"], b.predictions["pred"])
    assert check_no_leakage(a, small_cohort)
    diag = fold_relevance_diagnostics(small_cohort, a)
    assert len(diag) == 4
    for d in diag:
        assert -1.0 <= d["cosine"] <= 1.0 and 0.0 <= d["test_sparsity"] <= 1.0


def test_plain_nn_trains_one_model_per_fold(small_cohort):
    rep = nested_cv(small_cohort, CVSettings(method="plain-nn", outer_folds=2,
                                             train=TrainConfig(epochs=1)))
    assert rep.model_count == 4 and len(rep.models) == 4
    assert all(not rec["inner"] for rec in rep.folds)


def test_parallel_workers_match_serial(small_cohort):
    base = dict(method="roc-lda", grid=(2, 4), outer_folds=2, inner_folds=2)
    a = nested_cv(small_cohort, CVSettings(**base))
    b = nested_cv(small_cohort, CVSettings(**base, workers=2))
    np.testing.assert_array_equal(a.predictions["pred"], b.predictions["pred"])


def test_single_lab_cohort_rejected(small_cohort):
    with pytest.raises(ValueError, match="two labs"):
        nested_cv(small_cohort.select("A"), CVSettings(method="roc-lda"))
