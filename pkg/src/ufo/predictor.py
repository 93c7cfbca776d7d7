"""Per-task architecture-performance predictors (Bayesian linear regression).

A predictor maps an architecture's feature vector to an expected task score.
The model is ridge regression with an unpenalized intercept, read as a
Gaussian process with a linear kernel: prior ``w ~ N(0, alpha2 I)``, noise
variance ``sigma2``.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .arch_space import Architecture, Gate, SearchSpace, cost
from .objectives import UndefinedCorrelation, average_ranks, kendall_tau

GATE_ORDER = (Gate.SHARED, Gate.PRIVATE, Gate.BOTH)
DEFAULT_ALPHA2 = 1.0
DEFAULT_SIGMA2 = 0.01
DEFAULT_THRESHOLD = 0.7


def feature_length(space: SearchSpace) -> int:
    return space.num_layers * (len(space.heads) + len(space.mlp_ratios) + len(GATE_ORDER) + 1) + 2


def feature_spec_hash(space: SearchSpace) -> str:
    """Identifies the feature layout; predictors only apply to matching spaces."""
    spec = {
        "heads": list(space.heads),
        "mlp_ratios": list(space.mlp_ratios),
        "num_layers": space.num_layers,
        "gates": [g.value for g in GATE_ORDER],
        "embed_dim": space.embed_dim,
        "head_dim": space.head_dim,
        "tokens": space.tokens,
    }
    return hashlib.sha256(json.dumps(spec, sort_keys=True).encode()).hexdigest()[:16]


def _reference_cost(space: SearchSpace, task: int) -> tuple[int, int]:
    ref = cost(space.max_arch(Gate.BOTH), space, tasks=[task])
    return ref.flops, ref.params


def featurize(arch: Architecture, task: int, space: SearchSpace) -> np.ndarray:
    """Per layer one-hot(h), one-hot(m), one-hot(gate of ``task``), keep flag;
    then flops and params of the task-trimmed model relative to the max arch.

    Only ``task``'s gate symbols are encoded, so archs differing solely in
    other tasks' gates map to the same vector.
    """
    if not 0 <= task < space.num_tasks:
        raise ValueError(f"task {task} outside [0, {space.num_tasks})")
    parts = []
    for layer in arch.layers:
        parts.append(np.asarray(space.heads) == layer.heads)
        parts.append(np.asarray(space.mlp_ratios) == layer.mlp_ratio)
        parts.append(np.asarray([g is layer.gates[task] for g in GATE_ORDER]))
        parts.append([layer.keep])
    rep = cost(arch, space, tasks=[task])
    ref_flops, ref_params = _reference_cost(space, task)
    parts.append([rep.flops / ref_flops, rep.params / ref_params])
    return np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])


def feature_matrix(archs: Sequence[Architecture], task: int, space: SearchSpace) -> np.ndarray:
    return np.stack([featurize(a, task, space) for a in archs]) if archs else np.zeros((0, feature_length(space)))


@dataclass
class RankPredictor:
    task: int
    alpha2: float
    sigma2: float
    weights: np.ndarray
    covariance: np.ndarray
    x_mean: np.ndarray
    y_mean: float
    feature_hash: str = ""
    n_train: int = 0
    pinv_fallback: bool = False
    train_encodings: list[str] = field(default_factory=list)

    def predict_features(self, phi: np.ndarray) -> np.ndarray:
        phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
        return self.y_mean + (phi - self.x_mean) @ self.weights

    def predict_std(self, phi: np.ndarray) -> np.ndarray:
        """Posterior predictive standard deviation (weights plus observation noise)."""
        c = np.atleast_2d(np.asarray(phi, dtype=np.float64)) - self.x_mean
        var = np.einsum("ij,jk,ik->i", c, self.covariance, c) + self.sigma2
        return np.sqrt(np.clip(var, 0.0, None))

    # checkpoint -----------------------------------------------------------

    def save(self, path) -> None:
        manifest = {
            "kind": "rank-predictor",
            "task": self.task,
            "alpha2": self.alpha2,
            "sigma2": self.sigma2,
            "feature_hash": self.feature_hash,
            "y_mean": self.y_mean,
            "n_train": self.n_train,
            "pinv_fallback": self.pinv_fallback,
            "train_encodings": list(self.train_encodings),
        }
        arrays = {"weights": self.weights, "covariance": self.covariance, "x_mean": self.x_mean}
        ag.save_bundle(path, manifest, arrays)

    @classmethod
    def load(cls, path) -> RankPredictor:
        m, arrays = ag.load_bundle(path)
        if m.get("kind") != "rank-predictor":
            raise ag.FormatError(f"{path}: not a predictor checkpoint")
        return cls(
            task=int(m["task"]),
            alpha2=float(m["alpha2"]),
            sigma2=float(m["sigma2"]),
            weights=arrays["weights"],
            covariance=arrays["covariance"],
            x_mean=arrays["x_mean"],
            y_mean=float(m["y_mean"]),
            feature_hash=m["feature_hash"],
            n_train=int(m["n_train"]),
            pinv_fallback=bool(m["pinv_fallback"]),
            train_encodings=list(m.get("train_encodings", [])),
        )


def fit_features(
    phi: np.ndarray,
    y: np.ndarray,
    task: int = 0,
    alpha2: float = DEFAULT_ALPHA2,
    sigma2: float = DEFAULT_SIGMA2,
) -> RankPredictor:
    """Posterior of a linear model with centered features and targets."""
    phi = np.asarray(phi, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if phi.ndim != 2 or len(phi) != len(y):
        raise ValueError("features must be (n, k) with one target per row")
    if len(np.unique(phi, axis=0)) < 2:
        raise ValueError("need at least 2 distinct architectures to fit")
    if alpha2 <= 0 or sigma2 < 0:
        raise ValueError("alpha2 must be > 0 and sigma2 >= 0")
    x_mean = phi.mean(axis=0)
    y_mean = float(y.mean())
    c = phi - x_mean
    k = c.shape[1]
    lam = sigma2 / alpha2
    u, s, vt = np.linalg.svd(c, full_matrices=True)
    eps = np.finfo(np.float64).eps
    # singular values below the usual rank tolerance are treated as exact zeros
    sv = np.zeros(k)
    sv[: len(s)] = np.where(s > max(c.shape) * eps * s.max(), s, 0.0)
    rank_deficient = bool((sv == 0).any())
    # without effective regularization the normal matrix is singular: use the pseudo-inverse
    fallback = rank_deficient and bool(lam <= k * eps * sv.max() ** 2)
    if fallback:
        inv = np.where(sv > 0, 1.0 / np.where(sv > 0, sv, 1.0) ** 2, 0.0)
    else:
        inv = 1.0 / (sv**2 + lam)
    proj = u[:, : len(s)].T @ (y - y_mean)
    w = vt[: len(s)].T @ (sv[: len(s)] * inv[: len(s)] * proj)
    cov = sigma2 * (vt.T * inv) @ vt
    return RankPredictor(task, alpha2, sigma2, w, cov, x_mean, y_mean, n_train=len(y), pinv_fallback=fallback)


def fit(
    archs: Sequence[Architecture],
    scores: Sequence[float],
    task: int,
    space: SearchSpace,
    alpha2: float = DEFAULT_ALPHA2,
    sigma2: float = DEFAULT_SIGMA2,
) -> RankPredictor:
    pred = fit_features(feature_matrix(archs, task, space), scores, task, alpha2, sigma2)
    pred.feature_hash = feature_spec_hash(space)
    pred.train_encodings = [a.encode() for a in archs]
    return pred


def predict(pred: RankPredictor, arch: Architecture, space: SearchSpace) -> float:
    return float(predict_many(pred, [arch], space)[0])


def predict_many(pred: RankPredictor, archs: Sequence[Architecture], space: SearchSpace) -> np.ndarray:
    if pred.feature_hash and pred.feature_hash != feature_spec_hash(space):
        raise ValueError("predictor was fitted on a different search space")
    return pred.predict_features(feature_matrix(archs, pred.task, space))


def predict_ranks(pred: RankPredictor, archs: Sequence[Architecture], space: SearchSpace) -> np.ndarray:
    """1-based ranks of predicted scores (best = 1, ties averaged)."""
    return average_ranks(predict_many(pred, archs, space))


@dataclass(frozen=True)
class Readiness:
    kd: float
    ready: bool


def readiness_from_scores(predicted: Sequence[float], measured: Sequence[float], threshold: float) -> Readiness:
    """Kendall tau between predicted and measured scores; undefined tau is never ready."""
    try:
        kd = kendall_tau(predicted, measured)
    except (UndefinedCorrelation, ValueError):
        return Readiness(float("nan"), False)
    return Readiness(kd, kd >= threshold)


def readiness(
    pred: RankPredictor,
    archs: Sequence[Architecture],
    scores: Sequence[float],
    threshold: float,
    space: SearchSpace,
) -> Readiness:
    train = set(pred.train_encodings)
    if any(a.encode() in train for a in archs):
        raise ValueError("holdout overlaps the predictor's training set")
    return readiness_from_scores(predict_many(pred, archs, space), scores, threshold)


def is_holdout(encoding: str, fraction: float = 0.2) -> bool:
    """Deterministic split: the top 64 bits of sha256(encoding) fall in the lowest ``fraction``."""
    h = int.from_bytes(hashlib.sha256(encoding.encode()).digest()[:8], "big")
    return h < fraction * 2**64


def split_holdout(encodings: Sequence[str], fraction: float = 0.2) -> tuple[list[int], list[int]]:
    train, hold = [], []
    for i, e in enumerate(encodings):
        (hold if is_holdout(e, fraction) else train).append(i)
    return train, hold
