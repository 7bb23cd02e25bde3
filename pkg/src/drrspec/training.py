"""Relevance-regularized training: objective, Adam and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .attribution import SCORE_MODES, one_hot, relevance_graph
from .model import logits_graph

log = logging.getLogger(__name__)

NLL_EPS = 1e-12


class NumericalError(FloatingPointError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass
class TrainConfig:
    lambda1: float = 0.0
    lambda2: float = 0.0
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    score_mode: str = "logit"
    class_weights: bool = True
    weight_decay: float = 0.0
    penalty_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"score_mode must be one of {SCORE_MODES}")
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("need epochs >= 0, batch_size >= 1 and lr > 0")
        if self.penalty_mask is not None:
            m = np.asarray(self.penalty_mask, dtype=np.float64)
            if m.ndim != 1 or np.any(m < 0) or not np.all(np.isfinite(m)):
                raise ValueError("penalty mask must be a 1-d vector of non-negative weights")
            self.penalty_mask = m

    @property
    def penalized(self):
        return self.lambda1 > 0 or self.lambda2 > 0

    def with_lambda(self, lam):
        """Copy with ``lambda1 = lambda2 = lam``."""
        return replace(self, lambda1=float(lam), lambda2=float(lam))

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "penalty_mask"}
        d["penalty_mask"] = None if self.penalty_mask is None else self.penalty_mask.tolist()
        return d

    @classmethod
    def from_mapping(cls, data, base_dir=None):
        known = {f.name for f in fields(cls)} | {"penalty_mask_path"}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training config keys: {sorted(unknown)}")
        data = dict(data)
        path = data.pop("penalty_mask_path", None)
        if path is not None:
            p = Path(path)
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            data["penalty_mask"] = load_mask(p)
        return cls(**data)

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        return cls.from_mapping(read_config(path), base_dir=path.parent)


def read_config(path):
    """Read a JSON or YAML key-value file into a dict."""
    path = Path(path)
    text = path.read_text()
    if path.suffix in (".yaml", ".yml"):
        import yaml
        data = yaml.safe_load(text) or {}
    else:
        data = json.loads(text)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: expected a key-value mapping")
    return data


def load_mask(path):
    path = Path(path)
    if path.suffix == ".npy":
        return np.load(path)
    return np.loadtxt(path, delimiter=",", ndmin=1)


@dataclass
class TrainReport:
    history: list  # per epoch: dict(epoch, nll, l1, l2, weight_decay, total, clamped)
    model: object
    seed: int
    wall_time: float = 0.0
    steps: int = 0

    def loss_rows(self):
        return [dict(h) for h in self.history]

    def write_csv(self, path):
        cols = ("epoch", "nll", "l1", "l2", "weight_decay", "total", "clamped")
        lines = [",".join(cols)]
        for h in self.history:
            lines.append(",".join(repr(h[c]) if isinstance(h[c], float) else str(h[c])
                                  for c in cols))
        Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------- pieces


def class_weights(labels, n_classes):
    """``w_y = N / (C * N_y)``; the plain mean is recovered for balanced labels."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes)[:n_classes]
    if labels.size == 0 or np.any(counts == 0):
        missing = [c for c in range(n_classes) if counts[c] == 0]
        raise ValueError(f"classes {missing} have no samples")
    return labels.size / (n_classes * counts.astype(np.float64))


def nll_loss(p, y, eps=NLL_EPS):
    """``-log p_y``, with ``p_y`` clamped to ``eps`` (a warning is logged)."""
    p = np.asarray(p, dtype=np.float64)
    py = float(p[y])
    if py < eps:
        log.warning("nll_loss: p_y=%g below %g, clamped", py, eps)
        py = eps
    return -math.log(py)


def drr_penalty(rho, lambda1, lambda2, mask=None):
    """``lambda1 * ||w*rho||_1 + lambda2 * ||w*rho||_2^2`` for one relevance map."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("penalty weights must be non-negative")
    r = np.asarray(getattr(rho, "values", rho), dtype=np.float64)
    if mask is not None:
        r = r * mask
    return float(lambda1 * np.abs(r).sum() + lambda2 * np.square(r).sum())


def _penalty_rows(rho, config):
    """Per-row L1 and L2 penalty Values for a (B, n) relevance Value."""
    if config.penalty_mask is not None:
        if config.penalty_mask.shape != (rho.shape[1],):
            raise ValueError(f"penalty mask has length {config.penalty_mask.size}, "
                             f"spectra have {rho.shape[1]} bins")
        rho = ad.mul(rho, config.penalty_mask)
    l1 = ad.mul(ad.vsum(ad.vabs(rho), axis=1), config.lambda1)
    l2 = ad.mul(ad.vsum(ad.square(rho), axis=1), config.lambda2)
    return l1, l2


def objective_graph(model, X, y, config, weights=None, *, force_penalty=False):
    """Build the training objective on a fresh tape.

    Returns ``(total, parts, param_leaves)``; ``parts`` holds the scalar
    Values ``nll``, ``l1``, ``l2``, ``weight_decay`` (each already averaged
    over the batch) and the clamped-sample count.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("objective needs a non-empty (batch, n) array")
    B = X.shape[0]
    if weights is None:
        weights = np.ones(model.n_classes)
    tape = ad.Tape()
    params = [tape.param(a) for a in model.arrays()]
    penalized = config.penalized or force_penalty
    x = tape.input(X, requires_grad=penalized)
    if penalized:
        rho, z = relevance_graph(model, x, y, params, config.score_mode, create_graph=True)
    else:
        z = logits_graph(model, x, params)
    mask = one_hot(y, model.n_classes)
    logp = ad.vsum(ad.mul(ad.log_softmax(z), mask), axis=1)
    clamped = int(np.count_nonzero(logp.data < math.log(NLL_EPS)))
    logp = ad.clamp_min(logp, math.log(NLL_EPS))
    sample_w = np.asarray(weights, dtype=np.float64)[y]
    nll = ad.div(ad.vsum(ad.mul(ad.neg(logp), sample_w)), float(B))
    parts = {"nll": nll}
    total = nll
    if penalized:
        l1, l2 = _penalty_rows(rho, config)
        parts["l1"] = ad.div(ad.vsum(l1), float(B))
        parts["l2"] = ad.div(ad.vsum(l2), float(B))
        total = ad.add(ad.add(total, parts["l1"]), parts["l2"])
    if config.weight_decay > 0:
        wd = None
        for p, spec in zip(params[0::2], [s for s in model.layers
                                          if s.kind in ("conv", "locally-connected", "dense")]):
            term = ad.vsum(ad.square(p))
            wd = term if wd is None else ad.add(wd, term)
        parts["weight_decay"] = ad.mul(wd, config.weight_decay)
        total = ad.add(total, parts["weight_decay"])
    parts["clamped"] = clamped
    return total, parts, params


def _part_floats(parts):
    out = {k: 0.0 for k in ("nll", "l1", "l2", "weight_decay")}
    for k in out:
        if k in parts:
            out[k] = float(parts[k].data)
    out["clamped"] = parts["clamped"]
    return out


def total_objective(model, X, y, config, weights=None):
    """Objective value (float) and its components for a batch."""
    total, parts, _ = objective_graph(model, X, y, config, weights)
    return float(total.data), _part_floats(parts)


def objective_and_grad(model, X, y, config, weights=None, *, force_penalty=False):
    """Objective value, components and parameter gradients (numpy arrays)."""
    total, parts, params = objective_graph(model, X, y, config, weights,
                                           force_penalty=force_penalty)
    grads = ad.gradient(total, params)
    return float(total.data), _part_floats(parts), [g.data for g in grads]


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays):
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns new parameter arrays.

    ``state`` is updated in place.
    """
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape:
            raise ValueError(f"gradient {i} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise NumericalError(f"non-finite gradient in parameter array {i} "
                                 f"({bad} of {g.size} entries) at step {state.t + 1}")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * (g * g)
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        out.append(p - lr * mhat / (np.sqrt(vhat) + eps))
    return out


# ---------------------------------------------------------------- loop


def train(model, X, y, config, progress=None):
    """Minimize the (class-weighted) objective with Adam over shuffled mini-batches.

    ``X`` holds TIC-normalized spectra row-wise. Returns ``(model, report)``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("training needs a non-empty (samples, n) array")
    if X.shape[1] != model.n_inputs:
        raise ValueError(f"spectra have {X.shape[1]} bins, model expects {model.n_inputs}")
    if np.any(y < 0) or np.any(y >= model.n_classes):
        raise ValueError("labels outside 0..C-1")
    weights = class_weights(y, model.n_classes) if config.class_weights \
        else np.ones(model.n_classes)

    rng = np.random.default_rng(config.seed)
    arrays = [a.copy() for a in model.arrays()]
    state = AdamState.zeros_like(arrays)
    history = []
    report = TrainReport(history, model, config.seed)
    t0 = time.perf_counter()
    N = X.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(N)
        sums = {k: 0.0 for k in ("nll", "l1", "l2", "weight_decay")}
        clamped = 0
        current = model.with_arrays(arrays)
        for start in range(0, N, config.batch_size):
            idx = order[start:start + config.batch_size]
            total, parts, grads = objective_and_grad(current, X[idx], y[idx], config, weights)
            if not math.isfinite(total):
                report.model = current
                report.wall_time = time.perf_counter() - t0
                raise NumericalError(f"loss became non-finite in epoch {epoch + 1}", report)
            for k in sums:
                sums[k] += parts[k] * len(idx)
            clamped += parts["clamped"]
            arrays = adam_step(arrays, grads, state, config.lr)
            current = model.with_arrays(arrays)
            report.steps += 1
        row = {"epoch": epoch + 1}
        row.update({k: sums[k] / N for k in sums})
        row["total"] = row["nll"] + row["l1"] + row["l2"] + row["weight_decay"]
        row["clamped"] = clamped
        history.append(row)
        if progress is not None:
            progress(row)
        log.debug("epoch %d: %s", epoch + 1, row)
    report.model = model.with_arrays(arrays)
    report.wall_time = time.perf_counter() - t0
    return report.model, report
