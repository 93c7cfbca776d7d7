"""End-to-end multi-task supernet training.

One step draws a heterogeneous batch (every task represented, the rest
apportioned by dataset size), samples one elastic configuration shared by all
tasks, runs one forward per task slice with gumbel-sampled gates, sums the task
losses and does a single backward and SGD update.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .arch_space import Architecture, Gate, LayerChoice, sample_uniform
from .objectives import COSFACE, COSFACE_TRIPLET, LossConfig, TripletPrecondition, cosface_loss, cross_entropy, retrieval_metrics, triplet_batch_hard
from .supernet import GateState, SupernetConfig, SupernetParams, embed_numpy, forward
from .task_gen import TaskData, TaskDatasets

SAMPLING_POLICIES = ("uniform", "max-every-k")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    iterations: int = 2000
    lr: float = 0.05
    warmup: int = 100
    momentum: float = 0.9
    weight_decay: float = 1e-4
    tau_start: float = 5.0
    tau_end: float = 0.5
    sampling: str = "max-every-k"
    max_every: int = 10
    gate_lr_scale: float = 50.0
    grad_clip: float | None = 2.0
    instances_per_id: int = 2
    flip: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 <= self.warmup < self.iterations:
            raise ValueError("warmup must satisfy 0 <= warmup < iterations")
        if self.lr <= 0:
            raise ValueError("init LR must be > 0")
        if self.sampling not in SAMPLING_POLICIES:
            raise ValueError(f"sampling must be one of {SAMPLING_POLICIES}")
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ValueError("gumbel temperatures must be > 0")
        if self.max_every < 1 or self.instances_per_id < 1:
            raise ValueError("max_every and instances_per_id must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


def compose_hetero_batch(sizes: Sequence[int], batch: int) -> list[int]:
    """Per-task sample counts summing to ``batch``, each at least 1.

    Counts follow the largest-remainder apportionment of the quotas
    ``batch * |D_t| / sum |D|``; tasks whose quota floors to zero are lifted to
    one and the surplus is taken back from the most over-served tasks.
    """
    sizes = [int(s) for s in sizes]
    t = len(sizes)
    if t == 0 or min(sizes) < 1:
        raise ValueError("every task needs a positive dataset size")
    if batch < t:
        raise ValueError(f"batch size {batch} is smaller than the number of tasks {t}")
    total = sum(sizes)
    quotas = [batch * s / total for s in sizes]
    counts = [max(1, math.floor(q)) for q in quotas]
    diff = batch - sum(counts)
    if diff > 0:
        order = sorted(range(t), key=lambda i: (-(quotas[i] - math.floor(quotas[i])), i))
        for i in order[:diff]:
            counts[i] += 1
    while diff < 0:
        i = max((i for i in range(t) if counts[i] > 1), key=lambda i: (counts[i] - quotas[i], -i))
        counts[i] -= 1
        diff += 1
    return counts


def lr_at(step: int, cfg: TrainConfig) -> float:
    if not 0 <= step < cfg.iterations:
        raise ValueError(f"step {step} outside [0, {cfg.iterations})")
    if step < cfg.warmup:
        return cfg.lr * step / cfg.warmup
    progress = (step - cfg.warmup) / (cfg.iterations - cfg.warmup)
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def tau_at(step: int, cfg: TrainConfig) -> float:
    if cfg.iterations == 1:
        return cfg.tau_start
    frac = step / (cfg.iterations - 1)
    return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * frac


class NumericalError(FloatingPointError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


@dataclass
class TaskBatch:
    task: int
    images: np.ndarray
    labels: np.ndarray


def sample_task_batch(data: TaskData, count: int, k: int, rng: np.random.Generator, flip: bool) -> tuple[np.ndarray, np.ndarray]:
    """``count`` training samples drawn as ``ceil(count / k)`` identities with ``k`` instances each."""
    labels = data.train_labels
    ids = np.unique(labels)
    n_ids = min(len(ids), -(-count // k))
    chosen = rng.choice(ids, size=n_ids, replace=False)
    idx = []
    for c in chosen:
        pool = np.flatnonzero(labels == c)
        idx.extend(rng.choice(pool, size=k, replace=len(pool) < k).tolist())
    idx = np.asarray(idx[:count])
    if len(idx) < count:
        idx = np.concatenate([idx, rng.choice(len(labels), size=count - len(idx))])
    images = data.train_images[idx]
    if flip:
        mask = rng.random(len(idx)) < 0.5
        images = images.copy()
        images[mask] = images[mask][..., ::-1]
    return images, labels[idx]


def compose_batch(data: TaskDatasets, cfg: TrainConfig, rng: np.random.Generator) -> list[TaskBatch]:
    counts = compose_hetero_batch(data.sizes(), cfg.batch_size)
    out = []
    for t, (task, c) in enumerate(zip(data.tasks, counts)):
        imgs, labels = sample_task_batch(task, c, cfg.instances_per_id, rng, cfg.flip)
        out.append(TaskBatch(t, imgs, labels))
    return out


def sample_train_arch(params: SupernetParams, step: int, cfg: TrainConfig, rng: np.random.Generator) -> Architecture:
    """Elastic configuration for one step; gates are placeholders (the learned gates route)."""
    sp = params.config.space
    if cfg.sampling == "max-every-k" and step % cfg.max_every == 0:
        return sp.max_arch(Gate.BOTH)
    arch = sample_uniform(sp, rng)
    both = tuple(Gate.BOTH for _ in range(sp.num_tasks))
    return Architecture(tuple(LayerChoice(l.heads, l.mlp_ratio, both, l.keep) for l in arch.layers))


def task_loss(params: SupernetParams, emb: ag.Tensor, labels: np.ndarray, task: int, loss_cfg: LossConfig) -> ag.Tensor:
    recipe = loss_cfg.recipe(task)
    weights = params[f"classifier.t{task}"]
    if recipe == "ce":
        return cross_entropy(ag.matmul(emb, ag.transpose(weights, (1, 0))), labels)
    loss = ag.scale(cosface_loss(emb, weights, labels, loss_cfg.scale, loss_cfg.margin), loss_cfg.cosface_weight)
    if recipe == COSFACE_TRIPLET:
        try:
            trip = triplet_batch_hard(emb, labels, loss_cfg.triplet_margin)
        except TripletPrecondition:
            return loss
        loss = ag.add(loss, ag.scale(trip, loss_cfg.triplet_weight))
    assert recipe in (COSFACE, COSFACE_TRIPLET)
    return loss


@dataclass
class SGD:
    """SGD with momentum and decoupled-from-gates weight decay on matrices."""

    momentum: float
    weight_decay: float
    buffers: dict[str, np.ndarray] = field(default_factory=dict)

    def step(
        self,
        named: dict[str, ag.Tensor],
        lr: float,
        lr_scale: dict[str, float] | None = None,
        clip: float | None = None,
    ) -> float:
        """Apply one update; returns the global gradient norm before clipping."""
        sq = sum(float(np.sum(np.square(p.grad, dtype=np.float64))) for p in named.values() if p.grad is not None)
        norm = math.sqrt(sq)
        factor = clip / norm if clip is not None and norm > clip else 1.0
        for name, p in named.items():
            if p.grad is None:
                continue
            g = p.grad * factor if factor != 1.0 else p.grad
            if self.weight_decay and p.data.ndim >= 2 and not name.startswith("gates"):
                g = g + self.weight_decay * p.data
            buf = self.buffers.get(name)
            buf = g.copy() if buf is None else self.momentum * buf + g
            self.buffers[name] = buf
            rate = lr * (lr_scale or {}).get(name, 1.0)
            p.data = (p.data - rate * buf).astype(p.data.dtype)
        return norm


def _named(params: SupernetParams, gates: GateState | None) -> dict[str, ag.Tensor]:
    named = dict(params.tensors)
    if gates is not None and not params.config.all_shared:
        named["gates"] = gates.logits
    return named


def zero_grads(params: SupernetParams, gates: GateState | None) -> None:
    for t in _named(params, gates).values():
        t.grad = None


def train_step(
    params: SupernetParams,
    gates: GateState,
    batch: Sequence[TaskBatch],
    arch: Architecture,
    lr: float,
    opt: SGD,
    loss_cfg: LossConfig,
    rng: np.random.Generator,
    step: int = 0,
    gate_lr_scale: float = 50.0,
    grad_clip: float | None = 2.0,
) -> dict:
    """Forward every task slice, sum the losses, one backward, one update."""
    zero_grads(params, gates)
    losses = {}
    total = None
    for tb in batch:
        if len(tb.labels) == 0:
            continue
        emb = forward(params, tb.images, arch, tb.task, gates, mode="sample", rng=rng)
        loss = task_loss(params, emb, tb.labels, tb.task, loss_cfg)
        value = float(loss.data)
        if not np.isfinite(value):
            raise NumericalError(step, f"task {tb.task} loss is {value}")
        losses[tb.task] = value
        total = loss if total is None else ag.add(total, loss)
    if total is None:
        raise ValueError("empty batch")
    total.backward()
    norm = opt.step(_named(params, gates), lr, {"gates": gate_lr_scale}, grad_clip)
    if not np.isfinite(norm):
        raise NumericalError(step, "gradient norm is not finite")
    return {"losses": losses, "total": float(total.data), "grad_norm": norm}


@dataclass
class TrainResult:
    params: SupernetParams
    gates: GateState
    log: list[dict]


def init_supernet(config: SupernetConfig, seed: int) -> tuple[SupernetParams, GateState]:
    rng = np.random.default_rng([seed, 1])
    params = SupernetParams.init(config, rng)
    return params, GateState.init(config.space.num_layers, config.space.num_tasks)


def train(
    params: SupernetParams,
    gates: GateState,
    data: TaskDatasets,
    cfg: TrainConfig,
    loss_cfg: LossConfig | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train in place; deterministic given ``cfg.seed`` and the initial parameters."""
    if len(data) != params.config.space.num_tasks:
        raise ValueError(f"supernet has {params.config.space.num_tasks} tasks, data has {len(data)}")
    if min(data.sizes()) < 1:
        raise ValueError("every task needs training data")
    loss_cfg = loss_cfg or LossConfig()
    rng = np.random.default_rng([cfg.seed, 2])
    opt = SGD(cfg.momentum, cfg.weight_decay)
    names = [t.name for t in data.tasks]
    log = []
    for step in range(cfg.iterations):
        lr = lr_at(step, cfg)
        gates.tau = tau_at(step, cfg)
        arch = sample_train_arch(params, step, cfg, rng)
        batch = compose_batch(data, cfg, rng)
        out = train_step(params, gates, batch, arch, lr, opt, loss_cfg, rng, step, cfg.gate_lr_scale, cfg.grad_clip)
        rec = {
            "step": step,
            "lr": lr,
            "tau": gates.tau,
            "arch": arch.encode(),
            "losses": {names[t]: v for t, v in out["losses"].items()},
            "total": out["total"],
            "grad_norm": out["grad_norm"],
        }
        log.append(rec)
        if on_step is not None:
            on_step(rec)
    zero_grads(params, gates)
    return TrainResult(params, gates, log)


def write_log(log: Sequence[dict], path) -> None:
    with open(path, "w") as fh:
        for rec in log:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def evaluate(
    params: SupernetParams,
    gates: GateState | None,
    arch: Architecture,
    task: int,
    data: TaskData,
    mode: str = "arch",
) -> dict[str, float]:
    """Retrieval metrics on the task's query/gallery split; ``score`` is mAP in points."""
    q = embed_numpy(params, data.query_images, arch, task, gates, mode)
    g = embed_numpy(params, data.gallery_images, arch, task, gates, mode)
    m = retrieval_metrics(q, g, data.query_labels, data.gallery_labels)
    m["score"] = 100.0 * m["mAP"]
    return m


def score_embeddings(query: np.ndarray, gallery: np.ndarray, data: TaskData) -> dict[str, float]:
    m = retrieval_metrics(query, gallery, data.query_labels, data.gallery_labels)
    m["score"] = 100.0 * m["mAP"]
    return m
