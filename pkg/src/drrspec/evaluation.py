"""Metrics, the ROC/LDA baseline and nested inter-lab cross-validation."""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .attribution import cosine_similarity, mean_relevance, relevance_sparsity
from .model import build_isotopenet_lite, classify, predict_logits, save_checkpoint
from .training import TrainConfig, train

log = logging.getLogger(__name__)

METHODS = ("drr-nn", "plain-nn", "roc-lda")
METHOD_ALIASES = {"unregularized-nn": "plain-nn"}
WIDE_LAMBDA_GRID = tuple(10.0 ** e for e in (-5, -4.5, -4, -3.5, -3, -2.5, -2))
DEFAULT_LAMBDA_GRID = tuple(10.0 ** e for e in (-4, -3.5, -3, -2.5, -2))
DEFAULT_K_GRID = (5, 6, 8, 10, 13, 17, 21, 27, 35, 45, 57, 73, 93, 119, 155, 200)
# The relevance penalty is still shrinking after 30 epochs at lr 1e-3; the
# cross-validation experiment therefore trains with a larger step by default.
CV_LEARNING_RATE = 3e-3


def default_cv_train_config():
    return TrainConfig(lr=CV_LEARNING_RATE)


# ---------------------------------------------------------------- metrics


def balanced_accuracy(pred, labels):
    """Mean of the per-class recalls of a binary problem (class 0 is 'positive')."""
    pred = np.asarray(pred)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise ValueError("predictions and labels differ in length")
    pos = labels == 0
    neg = labels == 1
    if not pos.any() or not neg.any():
        raise ValueError("balanced accuracy needs both classes among the labels")
    tpr = np.count_nonzero(pred[pos] == 0) / np.count_nonzero(pos)
    tnr = np.count_nonzero(pred[neg] == 1) / np.count_nonzero(neg)
    return 0.5 * (tpr + tnr)


def patient_aggregate(pred, patient_ids):
    """Majority vote per patient; an exact tie goes to class 0.

    Returns a dict patient id -> label, in order of first appearance.
    """
    votes = {}
    for p, y in zip(patient_ids, pred):
        votes.setdefault(p, []).append(int(y))
    out = {}
    for p, v in votes.items():
        ones = sum(v)
        out[p] = 1 if ones > len(v) - ones else 0
    return out


def auroc(values, labels, positive=1):
    """Probability that a random positive outranks a random negative (ties count 1/2)."""
    values = np.asarray(values, dtype=np.float64).ravel()
    return float(auroc_columns(values[:, None], labels, positive)[0])


def column_ranks(X):
    """Average (1-based) ranks within each column, ties sharing their mean rank."""
    X = np.asarray(X, dtype=np.float64)
    N = X.shape[0]
    order = np.argsort(np.ascontiguousarray(X.T), axis=1, kind="stable").T
    S = np.take_along_axis(X, order, axis=0)
    idx = np.broadcast_to(np.arange(N)[:, None], S.shape)
    first = np.ones(S.shape, dtype=bool)
    first[1:] = S[1:] != S[:-1]
    last = np.ones(S.shape, dtype=bool)
    last[:-1] = first[1:]
    start = np.maximum.accumulate(np.where(first, idx, 0), axis=0)
    end = np.minimum.accumulate(np.where(last, idx, N - 1)[::-1], axis=0)[::-1]
    ranks = np.empty_like(S)
    np.put_along_axis(ranks, order, 0.5 * (start + end) + 1.0, axis=0)
    return ranks


def auroc_columns(X, labels, positive=1):
    """AUROC of every column of ``X`` (rank-sum form, ties counted 1/2)."""
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels)
    pos = labels == positive
    n1, n0 = int(pos.sum()), int((~pos).sum())
    if n1 == 0 or n0 == 0:
        raise ValueError("AUROC needs both classes")
    u = column_ranks(X)[pos].sum(axis=0) - n1 * (n1 + 1) / 2.0
    return u / (n1 * n0)


def pick_peaks_auroc(X, labels, k, two_sided=True, aucs=None):
    """Indices of the ``k`` most discriminative bins by AUROC; ties by lower index.

    ``aucs`` may pass precomputed per-column AUROCs of ``X``.
    """
    X = np.asarray(X)
    if not 1 <= k <= X.shape[1]:
        raise ValueError(f"k must lie in 1..{X.shape[1]}")
    a = auroc_columns(X, labels) if aucs is None else aucs
    score = np.abs(a - 0.5) if two_sided else a
    order = np.lexsort((np.arange(score.size), -score))
    return np.sort(order[:k])


@dataclass
class LDAModel:
    means: np.ndarray  # (C, k)
    priors: np.ndarray
    coef: np.ndarray  # (C, k)
    intercept: np.ndarray
    shrinkage: float


def lda_fit(features, labels, shrinkage=0.1):
    """Shrinkage LDA: pooled covariance pulled toward a trace-scaled identity."""
    F = np.asarray(features, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    labels = np.asarray(labels, dtype=np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise ValueError("LDA needs both classes")
    C = int(classes.max()) + 1
    k = F.shape[1]
    means = np.zeros((C, k))
    priors = np.zeros(C)
    scatter = np.zeros((k, k))
    for c in range(C):
        Fc = F[labels == c]
        if Fc.shape[0] == 0:
            raise ValueError(f"class {c} missing")
        means[c] = Fc.mean(axis=0)
        priors[c] = Fc.shape[0] / F.shape[0]
        D = Fc - means[c]
        scatter += D.T @ D
    pooled = scatter / max(F.shape[0] - C, 1)
    target = np.trace(pooled) / k * np.eye(k)
    cov = (1.0 - shrinkage) * pooled + shrinkage * target
    try:
        if np.linalg.cond(cov) > 1e14:
            raise np.linalg.LinAlgError
        prec = np.linalg.inv(cov)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("covariance is singular after shrinkage") from exc
    coef = means @ prec
    intercept = -0.5 * np.einsum("ck,ck->c", coef, means) + np.log(priors)
    return LDAModel(means, priors, coef, intercept, shrinkage)


def lda_decision(model, features):
    F = np.asarray(features, dtype=np.float64)
    if F.ndim == 1:
        F = F[:, None]
    return F @ model.coef.T + model.intercept


def lda_predict(model, features):
    return np.argmax(lda_decision(model, features), axis=1)


# ---------------------------------------------------------------- folds & selection


def make_folds(patient_ids, folds=5, seed=0):
    """Seeded shuffle then round-robin assignment of patients to ``folds`` groups."""
    ids = sorted(set(patient_ids))
    if len(ids) < folds:
        raise ValueError(f"{len(ids)} patients cannot fill {folds} folds")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ids))
    groups = [[] for _ in range(folds)]
    for pos, i in enumerate(perm):
        groups[pos % folds].append(ids[i])
    return [sorted(g) for g in groups]


def stratified_folds(patient_labels, folds=5, seed=0):
    """:func:`make_folds` applied per class and merged, so every fold holds both classes
    when each class has at least ``folds`` patients."""
    by_class = {}
    for p, y in sorted(patient_labels.items()):
        by_class.setdefault(y, []).append(p)
    groups = [[] for _ in range(folds)]
    offset = 0
    for y in sorted(by_class):
        ids = by_class[y]
        rng = np.random.default_rng([seed, y])
        perm = rng.permutation(len(ids))
        for pos, i in enumerate(perm):
            groups[(pos + offset) % folds].append(ids[i])
        offset += len(ids)
    if any(not g for g in groups):
        raise ValueError(f"{len(patient_labels)} patients cannot fill {folds} folds")
    return [sorted(g) for g in groups]


def select_lambda(grid, scores):
    """Value one step above the best-scoring one (ties -> larger), if there is one."""
    grid = list(grid)
    scores = np.asarray(scores, dtype=np.float64)
    if len(grid) != scores.size or not grid:
        raise ValueError("need one score per grid value")
    best = max(range(len(grid)), key=lambda i: (scores[i], i))
    return grid[min(best + 1, len(grid) - 1)]


def select_k(grid, scores):
    """Value one step below the best-scoring one (ties -> smaller), if there is one."""
    grid = list(grid)
    scores = np.asarray(scores, dtype=np.float64)
    if len(grid) != scores.size or not grid:
        raise ValueError("need one score per grid value")
    best = max(range(len(grid)), key=lambda i: (scores[i], -i))
    return grid[max(best - 1, 0)]


def select_log_mean(grid, scores, drop=0.02):
    """Geometric mean of the grid values scoring within ``drop`` of the best."""
    grid = np.asarray(grid, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    good = grid[scores >= scores.max() - drop]
    return float(np.exp(np.mean(np.log(good))))


def model_count(labs, outer, inner, grid_size, method="drr-nn"):
    """Number of models nested_cv trains."""
    method = METHOD_ALIASES.get(method, method)
    if method == "plain-nn":
        return labs * outer
    return labs * outer * inner * grid_size + labs * outer


# ---------------------------------------------------------------- nested CV


@dataclass
class CVSettings:
    method: str = "drr-nn"
    grid: tuple | None = None
    outer_folds: int = 5
    inner_folds: int = 5
    seed: int = 0
    train: TrainConfig = field(default_factory=default_cv_train_config)
    lda_shrinkage: float = 0.1
    two_sided_auroc: bool = True
    selection: str = "next"  # "next" (shift by one grid step) or "log-mean"
    workers: int = 1
    keep_models: bool = True

    def __post_init__(self):
        self.method = METHOD_ALIASES.get(self.method, self.method)
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}")
        if self.grid is None:
            if self.method == "drr-nn":
                self.grid = DEFAULT_LAMBDA_GRID
            elif self.method == "roc-lda":
                self.grid = DEFAULT_K_GRID
            else:
                self.grid = ()
        self.grid = tuple(sorted(self.grid))
        if self.method != "plain-nn" and not self.grid:
            raise ValueError(f"{self.method} needs a non-empty grid")
        if self.selection not in ("next", "log-mean"):
            raise ValueError("selection must be 'next' or 'log-mean'")


def _seed_for(base, *key):
    return int(np.random.SeedSequence([base, *key]).generate_state(1)[0])


_SHARED = {}


def _install(X, y):
    _SHARED["X"], _SHARED["y"] = X, y


def _fit_predict(job):
    """Train one model and predict a held-out set. Runs in worker processes.

    Jobs carry row indices; the spectra live in ``_SHARED`` so a job list
    stays small even for hundreds of models.
    """
    method, tr, te, value, settings, seed, n_classes, bin_width = job
    X, y = _SHARED["X"], _SHARED["y"]
    Xtr, ytr, Xte = X[tr], y[tr], X[te]
    t0 = time.perf_counter()
    if method == "roc-lda":
        # grid values of one training set arrive back to back; rank it once
        key = (tr.tobytes(), 0)
        if _SHARED.get("auc_key") != key:
            _SHARED["auc_key"], _SHARED["auc"] = key, auroc_columns(Xtr, ytr)
        bins = pick_peaks_auroc(Xtr, ytr, int(value), settings.two_sided_auroc,
                                aucs=_SHARED["auc"])
        lda = lda_fit(Xtr[:, bins], ytr, settings.lda_shrinkage)
        return {"pred": lda_predict(lda, Xte[:, bins]), "model": {"bins": bins, "lda": lda},
                "seconds": time.perf_counter() - t0}
    cfg = settings.train
    if method == "plain-nn":
        cfg = replace(cfg, lambda1=0.0, lambda2=0.0, seed=seed)
    else:
        cfg = replace(cfg.with_lambda(value), seed=seed)
    model = build_isotopenet_lite(Xtr.shape[1], n_classes, bin_width, seed=seed)
    model, report = train(model, Xtr, ytr, cfg)
    return {"pred": classify(model, Xte), "model": model, "history": report.history,
            "seconds": time.perf_counter() - t0}


def _run_jobs(jobs, workers, X, y):
    if workers <= 1 or len(jobs) <= 1:
        _install(X, y)
        try:
            return [_fit_predict(j) for j in jobs]
        finally:
            _SHARED.clear()
    with ProcessPoolExecutor(max_workers=workers, initializer=_install,
                             initargs=(X, y)) as ex:
        return list(ex.map(_fit_predict, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


@dataclass
class CVReport:
    method: str
    grid: list
    outer_folds: int
    inner_folds: int
    seed: int
    folds: list  # per outer fold record
    predictions: dict  # arrays: sample_id, patient_id, train_lab, fold, pred, true, test_lab
    models: dict = field(default_factory=dict, repr=False)  # (lab, fold) -> fitted model
    model_count: int = 0
    seconds: float = 0.0

    def spot_balanced_accuracy(self):
        return balanced_accuracy(self.predictions["pred"], self.predictions["true"])

    def patient_balanced_accuracy(self):
        # a patient's spots from one test lab are voted together
        keys = [f"{lab}|{p}" for lab, p in zip(self.predictions["test_lab"],
                                               self.predictions["patient_id"])]
        votes = patient_aggregate(self.predictions["pred"], keys)
        truth = dict(zip(keys, self.predictions["true"]))
        ks = list(votes)
        return balanced_accuracy([votes[k] for k in ks], [truth[k] for k in ks])

    def summary(self):
        return {"method": self.method,
                "spot_balanced_accuracy": self.spot_balanced_accuracy(),
                "patient_balanced_accuracy": self.patient_balanced_accuracy(),
                "model_count": self.model_count}

    def to_json(self):
        preds = {k: [v.item() if hasattr(v, "item") else v for v in arr]
                 for k, arr in self.predictions.items()}
        return {"method": self.method, "grid": list(self.grid),
                "outer_folds": self.outer_folds, "inner_folds": self.inner_folds,
                "seed": self.seed, "model_count": self.model_count,
                "seconds": self.seconds, "folds": self.folds,
                "aggregate": self.summary(), "predictions": preds}

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "cv_report.json").write_text(json.dumps(self.to_json(), indent=1))
        cols = ("sample_id", "patient_id", "train_lab", "fold", "pred", "true")
        lines = [",".join(cols)]
        for row in zip(*(self.predictions[c] for c in cols)):
            lines.append(",".join(str(v) for v in row))
        (out / "predictions.csv").write_text("\n".join(lines) + "\n")


def check_no_leakage(report, cohort):
    """Assert train/test separation over every outer fold of ``report``."""
    lab_of = dict(zip(cohort.sample_ids, cohort.lab_ids))
    pid_of = dict(zip(cohort.sample_ids, cohort.patient_ids))
    for rec in report.folds:
        train = set(rec["train_patients"])
        for inner in rec.get("inner", []):
            assert not set(inner["validation_patients"]) & set(rec["test_patients"])
            assert set(inner["train_patients"]) | set(inner["validation_patients"]) == train
        assert not train & set(rec["test_patients"]), "test patient used for training"
        assert rec["test_lab"] != rec["train_lab"], "test lab equals training lab"
    P = report.predictions
    for sid, lab, fold, tlab in zip(P["sample_id"], P["train_lab"], P["fold"], P["test_lab"]):
        rec = report.folds[_fold_index(report, lab, fold)]
        assert lab_of[sid] == tlab != lab, f"{sid}: tested on its training lab"
        assert pid_of[sid] in rec["test_patients"], f"{sid}: patient not in test group"
        assert pid_of[sid] not in rec["train_patients"], f"{sid}: patient leaked into training"
    return True


def _fold_index(report, lab, fold):
    for i, rec in enumerate(report.folds):
        if rec["train_lab"] == lab and rec["fold"] == fold:
            return i
    raise KeyError((lab, fold))


def nested_cv(cohort, settings):
    """Inter-lab nested cross-validation.

    For each lab and outer fold, models are trained on the lab's remaining
    patients and tested on the other lab's spectra of the held-out patients.
    For ``drr-nn`` and ``roc-lda`` an inner patient-level CV inside the
    training lab scores every grid value first.
    """
    t0 = time.perf_counter()
    labs = cohort.labs
    if len(labs) != 2:
        raise ValueError(f"nested inter-lab CV needs exactly two labs, found {labs}")
    for lab in labs:
        if set(cohort.labels[cohort.lab_ids == lab]) != {0, 1}:
            raise ValueError(f"lab {lab} does not contain both classes")
    plabels = cohort.patient_labels()
    method, grid = settings.method, list(settings.grid)
    n_classes = 2
    bin_width = cohort.mz_step

    def rows(lab, patients):
        m = (cohort.lab_ids == lab) & np.isin(cohort.patient_ids, list(patients))
        return np.flatnonzero(m)

    plan = []
    for li, lab in enumerate(labs):
        other = labs[1 - li]
        pl = {p: plabels[p] for p in cohort.patients(lab)}
        outer = stratified_folds(pl, settings.outer_folds, _seed_for(settings.seed, li))
        for f, test_group in enumerate(outer):
            train_p = sorted(set(pl) - set(test_group))
            rec = {"train_lab": lab, "test_lab": other, "fold": f,
                   "train_patients": train_p, "test_patients": sorted(test_group), "inner": []}
            if method != "plain-nn":
                inner = stratified_folds({p: pl[p] for p in train_p}, settings.inner_folds,
                                         _seed_for(settings.seed, li, f))
                for g, val_group in enumerate(inner):
                    rec["inner"].append({"fold": g,
                                         "train_patients": sorted(set(train_p) - set(val_group)),
                                         "validation_patients": sorted(val_group)})
            plan.append(rec)

    # inner jobs
    jobs, keys = [], []
    for ri, rec in enumerate(plan):
        lab = rec["train_lab"]
        li = labs.index(lab)
        for inner in rec["inner"]:
            tr = rows(lab, inner["train_patients"])
            va = rows(lab, inner["validation_patients"])
            for vi, value in enumerate(grid):
                seed = _seed_for(settings.seed, li, rec["fold"], inner["fold"], vi)
                jobs.append((method, tr, va, value, settings, seed, n_classes, bin_width))
                keys.append((ri, inner["fold"], vi, va))
    results = _run_jobs(jobs, settings.workers, cohort.X, cohort.labels)
    scores = {}
    for (ri, g, vi, va), res in zip(keys, results):
        s = balanced_accuracy(res["pred"], cohort.labels[va])
        scores.setdefault(ri, {}).setdefault(g, {})[vi] = s
    n_models = len(jobs)

    # outer jobs
    jobs = []
    for ri, rec in enumerate(plan):
        li = labs.index(rec["train_lab"])
        value = None
        if method != "plain-nn":
            per_inner = scores[ri]
            for inner in rec["inner"]:
                inner["scores"] = [per_inner[inner["fold"]][vi] for vi in range(len(grid))]
            mean_scores = [float(np.mean([per_inner[g][vi] for g in per_inner]))
                           for vi in range(len(grid))]
            rec["mean_validation_scores"] = mean_scores
            if settings.selection == "log-mean":
                value = select_log_mean(grid, mean_scores)
                if method == "roc-lda":
                    value = int(round(value))
            elif method == "drr-nn":
                value = select_lambda(grid, mean_scores)
            else:
                value = select_k(grid, mean_scores)
            rec["chosen"] = value
        tr = rows(rec["train_lab"], rec["train_patients"])
        te = rows(rec["test_lab"], rec["test_patients"])
        seed = _seed_for(settings.seed, li, rec["fold"], 999)
        rec["seed"] = seed
        jobs.append((method, tr, te, value, settings, seed, n_classes, bin_width))
    results = _run_jobs(jobs, settings.workers, cohort.X, cohort.labels)
    n_models += len(jobs)

    pred_cols = {k: [] for k in ("sample_id", "patient_id", "train_lab", "test_lab",
                                 "fold", "pred", "true")}
    models = {}
    for rec, res in zip(plan, results):
        te = rows(rec["test_lab"], rec["test_patients"])
        rec["test_balanced_accuracy"] = balanced_accuracy(res["pred"], cohort.labels[te]) \
            if len(set(cohort.labels[te])) == 2 else None
        rec["seconds"] = res["seconds"]
        pred_cols["sample_id"].extend(cohort.sample_ids[te])
        pred_cols["patient_id"].extend(cohort.patient_ids[te])
        pred_cols["train_lab"].extend([rec["train_lab"]] * te.size)
        pred_cols["test_lab"].extend([rec["test_lab"]] * te.size)
        pred_cols["fold"].extend([rec["fold"]] * te.size)
        pred_cols["pred"].extend(int(v) for v in res["pred"])
        pred_cols["true"].extend(int(v) for v in cohort.labels[te])
        if settings.keep_models:
            models[(rec["train_lab"], rec["fold"])] = res["model"]
    predictions = {k: np.asarray(v, dtype=object if k in ("sample_id", "patient_id",
                                                           "train_lab", "test_lab") else None)
                   for k, v in pred_cols.items()}
    predictions["pred"] = predictions["pred"].astype(np.int64)
    predictions["true"] = predictions["true"].astype(np.int64)
    predictions["fold"] = predictions["fold"].astype(np.int64)
    return CVReport(method, grid, settings.outer_folds, settings.inner_folds, settings.seed,
                    plan, predictions, models, n_models, time.perf_counter() - t0)


# ---------------------------------------------------------------- relevance diagnostics


def fold_relevance_diagnostics(cohort, report, tau=0.01):
    """Per outer fold: mean relevance maps (per class) on the training set and on
    the other lab's test set, their cosine similarity and sparsity."""
    out = []
    for rec in report.folds:
        model = report.models.get((rec["train_lab"], rec["fold"]))
        if model is None or not hasattr(model, "layers"):
            continue
        tr = cohort.select(rec["train_lab"], rec["train_patients"])
        te = cohort.select(rec["test_lab"], rec["test_patients"])
        entry = {"train_lab": rec["train_lab"], "fold": rec["fold"], "classes": {}}
        cos, sp = [], []
        for c in (0, 1):
            if not np.any(tr.labels == c) or not np.any(te.labels == c):
                continue
            m_tr = mean_relevance(model, tr.X[tr.labels == c], c)
            m_te = mean_relevance(model, te.X[te.labels == c], c)
            cs = cosine_similarity(m_tr, m_te) if np.any(m_tr.values) and np.any(m_te.values) \
                else 0.0
            entry["classes"][c] = {"train_map": m_tr.values, "test_map": m_te.values,
                                   "cosine": cs,
                                   "test_sparsity": relevance_sparsity(m_te, tau),
                                   "train_sparsity": relevance_sparsity(m_tr, tau)}
            cos.append(cs)
            sp.append(relevance_sparsity(m_te, tau))
        entry["cosine"] = float(np.mean(cos)) if cos else float("nan")
        entry["test_sparsity"] = float(np.mean(sp)) if sp else float("nan")
        out.append(entry)
    return out
