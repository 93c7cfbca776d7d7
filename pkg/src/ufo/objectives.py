"""Losses, retrieval metrics and rank statistics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

COSFACE = "cosface"
COSFACE_TRIPLET = "cosface+triplet"
CROSS_ENTROPY = "ce"
RECIPES = (COSFACE, COSFACE_TRIPLET, CROSS_ENTROPY)


@dataclass(frozen=True)
class LossConfig:
    scale: float = 16.0
    margin: float = 0.2
    triplet_margin: float = 0.3
    recipes: tuple[str, ...] = ()
    cosface_weight: float = 1.0
    triplet_weight: float = 1.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError("cosface scale must be > 0")
        if not 0 <= self.margin < 1:
            raise ValueError("cosface margin must lie in [0, 1)")
        if self.triplet_margin < 0:
            raise ValueError("triplet margin must be >= 0")
        for r in self.recipes:
            if r not in RECIPES:
                raise ValueError(f"unknown loss recipe {r!r}")

    def recipe(self, task: int) -> str:
        return self.recipes[task] if task < len(self.recipes) else COSFACE_TRIPLET

    @classmethod
    def from_dict(cls, d: dict) -> LossConfig:
        d = dict(d)
        if "recipes" in d:
            d["recipes"] = tuple(d["recipes"])
        return cls(**d)


def cosface_logits(embeddings: Tensor, weights: Tensor) -> Tensor:
    """Cosine similarity between l2-normalized embedding and class-weight rows."""
    e = ag.l2_normalize(embeddings)
    w = ag.l2_normalize(weights)
    return ag.matmul(e, ag.transpose(w, (1, 0)))


def cosface_loss(embeddings: Tensor, weights: Tensor, labels, scale: float, margin: float) -> Tensor:
    """Large-margin cosine loss, averaged over the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    cos = cosface_logits(ag.as_tensor(embeddings), ag.as_tensor(weights))
    onehot = np.zeros(cos.shape, dtype=ag.current_dtype())
    onehot[np.arange(len(labels)), labels] = margin
    logits = ag.scale(ag.add(cos, -onehot), scale)
    logp = ag.log_softmax(logits)
    picked = logp[np.arange(len(labels)), labels]
    return ag.neg(ag.mean(picked))


def cross_entropy(logits: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.int64)
    logp = ag.log_softmax(ag.as_tensor(logits))
    return ag.neg(ag.mean(logp[np.arange(len(labels)), labels]))


class TripletPrecondition(ValueError):
    pass


def _hard_pairs(x: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Indices of hardest positive / negative per anchor (self counts as a positive)."""
    sq = (x * x).sum(axis=1)
    dist = sq[:, None] + sq[None, :] - 2.0 * (x @ x.T)
    same = labels[:, None] == labels[None, :]
    pos = np.where(same, dist, -np.inf).argmax(axis=1)
    neg = np.where(~same, dist, np.inf).argmin(axis=1)
    return pos, neg


def triplet_batch_hard(embeddings: Tensor, labels, margin: float) -> Tensor:
    """Batch-hard triplet loss on l2-normalized embeddings (Euclidean).

    Raises TripletPrecondition unless the batch has >= 2 classes and some class
    with >= 2 samples.
    """
    labels = np.asarray(labels)
    _, counts = np.unique(labels, return_counts=True)
    if len(counts) < 2 or counts.max() < 2:
        raise TripletPrecondition("batch-hard triplet needs >= 2 classes and a class with >= 2 samples")
    e = ag.l2_normalize(ag.as_tensor(embeddings))
    pos, neg = _hard_pairs(e.data.astype(np.float64), labels)

    def dist(idx):
        diff = ag.add(e, ag.neg(e[idx]))
        return ag.sqrt(ag.add(ag.tsum(ag.mul(diff, diff), axis=1), 1e-12))

    hinge = ag.relu(ag.add(ag.add(dist(pos), ag.neg(dist(neg))), margin))
    return ag.mean(hinge)


# ---------------------------------------------------------------------------
# retrieval


def average_precision(relevant_sorted: np.ndarray) -> float:
    """AP of a ranked 0/1 relevance vector."""
    hits = np.flatnonzero(relevant_sorted)
    if len(hits) == 0:
        return 0.0
    return float(np.mean((np.arange(len(hits)) + 1) / (hits + 1)))


def retrieval_metrics(query, gallery, query_ids, gallery_ids) -> dict[str, float]:
    """Cosine-similarity retrieval: rank-1 accuracy and mAP.

    Ties in similarity are broken by gallery index (stable sort).
    """
    q = np.asarray(query, dtype=np.float64)
    g = np.asarray(gallery, dtype=np.float64)
    qid = np.asarray(query_ids)
    gid = np.asarray(gallery_ids)
    missing = set(qid.tolist()) - set(gid.tolist())
    if missing:
        raise ValueError(f"query ids absent from gallery: {sorted(missing)[:5]}")
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    g = g / np.linalg.norm(g, axis=1, keepdims=True)
    sim = q @ g.T
    order = np.argsort(-sim, axis=1, kind="stable")
    rel = gid[order] == qid[:, None]
    rank1 = float(rel[:, 0].mean())
    mAP = float(np.mean([average_precision(r) for r in rel]))
    return {"rank1": rank1, "mAP": mAP}


# ---------------------------------------------------------------------------
# rank statistics


class UndefinedCorrelation(ValueError):
    pass


def _merge_count(x: np.ndarray) -> int:
    """Number of inversions (strictly decreasing pairs) in ``x`` via merge sort."""
    x = list(x)
    n = len(x)
    swaps = 0
    width = 1
    buf = x[:]
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if x[j] < x[i]:
                    buf[k] = x[j]
                    swaps += mid - i
                    j += 1
                else:
                    buf[k] = x[i]
                    i += 1
                k += 1
            buf[k:hi] = x[i:mid] if i < mid else x[j:hi]
        x, buf = buf, x
        width *= 2
    return swaps


def _tied_pairs(sorted_vals: np.ndarray) -> int:
    _, counts = np.unique(sorted_vals, return_counts=True)
    return int((counts * (counts - 1) // 2).sum())


def kendall_tau(a, b) -> float:
    """Kendall tau-b in O(n log n) (Knight's algorithm).

    Raises UndefinedCorrelation when either input is constant.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"kendall_tau needs equal-length vectors, got {a.shape} and {b.shape}")
    n = len(a)
    if n < 2:
        raise ValueError("kendall_tau needs at least 2 observations")
    order = np.lexsort((b, a))
    a, b = a[order], b[order]
    n0 = n * (n - 1) // 2
    ties_a = _tied_pairs(a)
    # pairs tied in both a and b
    joint = 0
    start = 0
    for i in range(1, n + 1):
        if i == n or a[i] != a[start] or b[i] != b[start]:
            k = i - start
            joint += k * (k - 1) // 2
            start = i
    swaps = _merge_count(b)
    ties_b = _tied_pairs(b)
    if ties_a == n0 or ties_b == n0:
        raise UndefinedCorrelation("kendall tau undefined: one input is constant")
    # concordant - discordant = n0 - n1 - n2 + n3 - 2 * swaps
    s = n0 - ties_a - ties_b + joint - 2 * swaps
    return float(s / np.sqrt((n0 - ties_a) * (n0 - ties_b)))


def average_ranks(scores, higher_is_better: bool = True) -> np.ndarray:
    """1-based ranks; the best score gets rank 1, ties share the average rank."""
    x = np.asarray(scores, dtype=np.float64)
    key = -x if higher_is_better else x
    order = np.argsort(key, kind="stable")
    sorted_key = key[order]
    ranks = np.empty(len(x), dtype=np.float64)
    i = 0
    n = len(x)
    while i < n:
        j = i
        while j + 1 < n and sorted_key[j + 1] == sorted_key[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks
