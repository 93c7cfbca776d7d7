"""Elastic multi-task vision-transformer supernet.

Each block computes::

    x_hat = d * MHSA(LN(x), h) + x
    out   = d * (p[0] * FFN_shared(LN(x_hat), m) + p[1] * FFN_task(LN(x_hat), m)) + x_hat

with ``p`` the task's two-way gate distribution. Elastic widths use contiguous
prefix slices of max-size weights (weight entanglement): the first ``h`` heads
of the q/k/v/proj matrices and the first ``round(m * D)`` FFN hidden channels.
LayerNorm parameters are full width and shared by every configuration.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .arch_space import Architecture, CostReport, Gate, LayerChoice, SearchSpace, cost, validate
from .autograd import Tensor

DEFAULT_BOTH_DELTA = 0.2
GATE_MODES = ("sample", "expectation", "hard", "arch")


@dataclass(frozen=True)
class SupernetConfig:
    space: SearchSpace
    image_size: int
    patch_size: int
    channels: int = 1
    feature_dim: int = 32
    num_classes: tuple[int, ...] = ()
    all_shared: bool = False

    def __post_init__(self):
        object.__setattr__(self, "num_classes", tuple(int(c) for c in self.num_classes))
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.space.tokens != self.num_patches + 1:
            raise ValueError(f"space.tokens={self.space.tokens} but the patch grid gives {self.num_patches + 1}")
        if self.space.patch_dim not in (0, self.patch_dim):
            raise ValueError(f"space.patch_dim={self.space.patch_dim} but patches have {self.patch_dim} values")
        if len(self.num_classes) != self.space.num_tasks:
            raise ValueError("num_classes needs one entry per task")

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    def to_dict(self) -> dict:
        return {
            "space": self.space.to_dict(),
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "channels": self.channels,
            "feature_dim": self.feature_dim,
            "num_classes": list(self.num_classes),
            "all_shared": self.all_shared,
        }

    @classmethod
    def from_dict(cls, d: dict) -> SupernetConfig:
        d = dict(d)
        d["space"] = SearchSpace.from_dict(d["space"])
        d["num_classes"] = tuple(d["num_classes"])
        return cls(**d)


def _linear_init(rng, fan_in, fan_out):
    return rng.normal(0.0, fan_in**-0.5, size=(fan_in, fan_out))


class SupernetParams:
    """Named parameter tensors sized for the maximum configuration."""

    def __init__(self, config: SupernetConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @classmethod
    def init(cls, config: SupernetConfig, rng: np.random.Generator) -> SupernetParams:
        sp = config.space
        d, width, hidden, f = sp.embed_dim, sp.max_heads * sp.head_dim, sp.max_hidden, config.feature_dim
        arrays: dict[str, np.ndarray] = {
            "patch.w": _linear_init(rng, config.patch_dim, d),
            "patch.b": np.zeros(d),
            "cls_token": rng.normal(0.0, 0.02, size=d),
            "pos": rng.normal(0.0, 0.02, size=(sp.tokens, d)),
            "norm.g": np.ones(d),
            "norm.b": np.zeros(d),
        }
        for i in range(sp.num_layers):
            p = f"L{i}."
            for nm in ("q", "k", "v"):
                arrays[p + nm + ".w"] = _linear_init(rng, d, width)
            # no key bias: it shifts every score of a query equally and cancels in the softmax
            arrays[p + "q.b"] = np.zeros(width)
            arrays[p + "v.b"] = np.zeros(width)
            arrays[p + "proj.w"] = _linear_init(rng, width, d)
            arrays[p + "proj.b"] = np.zeros(d)
            for ln in ("ln1", "ln2"):
                arrays[p + ln + ".g"] = np.ones(d)
                arrays[p + ln + ".b"] = np.zeros(d)
            for path in ffn_path_names(sp.num_tasks, config.all_shared):
                q = f"{p}ffn.{path}."
                arrays[q + "w1"] = _linear_init(rng, d, hidden)
                arrays[q + "b1"] = np.zeros(hidden)
                arrays[q + "w2"] = _linear_init(rng, hidden, d)
                arrays[q + "b2"] = np.zeros(d)
        for t, n_cls in enumerate(config.num_classes):
            arrays[f"head.t{t}.w"] = _linear_init(rng, d, f)
            arrays[f"head.t{t}.b"] = np.zeros(f)
            arrays[f"classifier.t{t}"] = rng.normal(0.0, 1.0, size=(n_cls, f))
        return cls(config, {k: ag.parameter(v) for k, v in arrays.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    def num_params(self, include_classifiers: bool = False) -> int:
        return sum(
            t.data.size for k, t in self.tensors.items() if include_classifiers or not k.startswith("classifier.")
        )

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.tensors):
            h.update(k.encode())
            h.update(np.ascontiguousarray(self.tensors[k].data).tobytes())
        return h.hexdigest()

    def copy(self) -> SupernetParams:
        return SupernetParams(self.config, {k: ag.parameter(t.data.copy()) for k, t in self.tensors.items()})


def ffn_path_names(num_tasks: int, all_shared: bool = False) -> list[str]:
    return ["shared"] if all_shared else ["shared"] + [f"t{t}" for t in range(num_tasks)]


@dataclass
class GateState:
    """Per-layer, per-task logits over {shared, private}, plus temperature."""

    logits: Tensor
    tau: float = 5.0

    @classmethod
    def init(cls, num_layers: int, num_tasks: int, tau: float = 5.0) -> GateState:
        return cls(ag.parameter(np.zeros((num_layers, num_tasks, 2))), tau)

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("gate temperature must be > 0")

    def probs(self) -> np.ndarray:
        return ag.k_softmax(self.logits.data.astype(np.float64))

    def decisions(self, delta: float = DEFAULT_BOTH_DELTA) -> list[tuple[Gate, ...]]:
        return gate_decisions(self.logits.data, delta)


def gate_decision(logits, delta: float = DEFAULT_BOTH_DELTA) -> Gate:
    """Argmax of softmax(logits) unless the probability gap is below ``delta``."""
    p = ag.k_softmax(np.asarray(logits, dtype=np.float64))
    if abs(p[0] - p[1]) < delta:
        return Gate.BOTH
    return Gate.SHARED if p[0] >= p[1] else Gate.PRIVATE


def gate_decisions(logits: np.ndarray, delta: float = DEFAULT_BOTH_DELTA) -> list[tuple[Gate, ...]]:
    return [tuple(gate_decision(lt, delta) for lt in layer) for layer in np.asarray(logits)]


def gumbel_gate_probs(logits, tau: float, rng: np.random.Generator | None = None, mode: str = "sample") -> Tensor:
    """Two-way gate distribution.

    ``sample``: softmax((logits + Gumbel noise) / tau), differentiable in logits.
    ``expectation``: softmax(logits). ``hard``: one-hot at the argmax.
    """
    if tau <= 0:
        raise ValueError("tau must be > 0")
    logits = ag.as_tensor(logits)
    if mode == "sample":
        noise = rng.gumbel(size=logits.shape)
        return ag.softmax(ag.scale(ag.add(logits, noise), 1.0 / tau))
    if mode == "expectation":
        return ag.softmax(logits)
    if mode == "hard":
        out = np.zeros(logits.shape)
        out[int(np.argmax(logits.data))] = 1.0
        return ag.Tensor(out)
    raise ValueError(f"unknown gate mode {mode!r}")


def routing_weights(gate: Gate, logits) -> tuple[float, float]:
    """Constant mixing weights for a discrete routing choice."""
    if gate is Gate.SHARED:
        return (1.0, 0.0)
    if gate is Gate.PRIVATE:
        return (0.0, 1.0)
    p = ag.k_softmax(np.asarray(logits, dtype=np.float64))
    return (float(p[0]), float(p[1]))


# ---------------------------------------------------------------------------
# forward


def images_to_patches(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) uint8/float images -> (B, P, C*p*p) floats in [-0.5, 0.5]."""
    x = np.asarray(images)
    if x.ndim == 3:
        x = x[:, None]
    if x.dtype == np.uint8:
        x = x.astype(np.float64) / 255.0 - 0.5
    b, c, h, w = x.shape
    p = patch_size
    x = x.reshape(b, c, h // p, p, w // p, p).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(b, (h // p) * (w // p), c * p * p).astype(ag.current_dtype())


def embed_patches(params: SupernetParams, images: np.ndarray) -> Tensor:
    cfg = params.config
    x = ag.Tensor(images_to_patches(images, cfg.patch_size))
    b = x.shape[0]
    tok = ag.add(ag.matmul(x, params["patch.w"]), params["patch.b"])
    cls = ag.add(ag.Tensor(np.zeros((b, 1, cfg.space.embed_dim))), params["cls_token"])
    return ag.add(ag.concat([cls, tok], axis=1), params["pos"])


def attention(params: SupernetParams, layer: int, x: Tensor, heads: int) -> Tensor:
    """Multi-head self-attention over the first ``heads`` head slices."""
    sp = params.config.space
    dh = sp.head_dim
    w = heads * dh
    p = f"L{layer}."
    b, n, _ = x.shape

    def proj(name):
        y = ag.matmul(x, params[p + name + ".w"][:, :w])
        if name != "k":
            y = ag.add(y, params[p + name + ".b"][:w])
        return ag.transpose(ag.reshape(y, (b, n, heads, dh)), (0, 2, 1, 3))

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = ag.scale(ag.matmul(q, ag.transpose(k, (0, 1, 3, 2))), dh**-0.5)
    ctx = ag.matmul(ag.softmax(scores), v)
    ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (b, n, w))
    return ag.add(ag.matmul(ctx, params[p + "proj.w"][:w, :]), params[p + "proj.b"])


def ffn(params: SupernetParams, layer: int, path: str, x: Tensor, hidden: int) -> Tensor:
    p = f"L{layer}.ffn.{path}."
    h = ag.gelu(ag.add(ag.matmul(x, params[p + "w1"][:, :hidden]), params[p + "b1"][:hidden]))
    return ag.add(ag.matmul(h, params[p + "w2"][:hidden, :]), params[p + "b2"])


def block_forward(
    params: SupernetParams,
    layer: int,
    x: Tensor,
    heads: int,
    mlp_ratio: float,
    keep: int,
    task: int,
    p: Tensor | Sequence[float],
) -> Tensor:
    """One elastic block. ``p`` is a gate 2-vector (Tensor for learned mixtures,
    floats for fixed routing; zero-weight paths are skipped)."""
    sp = params.config.space
    if x.shape[-1] != sp.embed_dim:
        raise ag.ShapeError(f"block input width {x.shape[-1]} != embed_dim {sp.embed_dim}")
    if heads not in sp.heads or mlp_ratio not in sp.mlp_ratios or keep not in (0, 1):
        raise ValueError(f"invalid layer config h={heads} m={mlp_ratio} d={keep}")
    if not keep:
        return x
    pre = f"L{layer}."
    x_hat = ag.add(attention(params, layer, ag.layernorm(x, params[pre + "ln1.g"], params[pre + "ln1.b"]), heads), x)
    y = ag.layernorm(x_hat, params[pre + "ln2.g"], params[pre + "ln2.b"])
    hidden = sp.hidden_dim(mlp_ratio)
    if params.config.all_shared:
        return ag.add(ffn(params, layer, "shared", y, hidden), x_hat)
    if isinstance(p, Tensor):
        mix = ag.add(
            ag.mul(ffn(params, layer, "shared", y, hidden), p[0]),
            ag.mul(ffn(params, layer, f"t{task}", y, hidden), p[1]),
        )
        return ag.add(mix, x_hat)
    w_shared, w_private = float(p[0]), float(p[1])
    if w_private == 0.0:
        return ag.add(ffn(params, layer, "shared", y, hidden), x_hat)
    if w_shared == 0.0:
        return ag.add(ffn(params, layer, f"t{task}", y, hidden), x_hat)
    mix = ag.add(
        ag.scale(ffn(params, layer, "shared", y, hidden), w_shared),
        ag.scale(ffn(params, layer, f"t{task}", y, hidden), w_private),
    )
    return ag.add(mix, x_hat)


def layer_gates(
    params: SupernetParams,
    gates: GateState | None,
    arch: Architecture,
    task: int,
    mode: str,
    rng: np.random.Generator | None = None,
    delta: float = DEFAULT_BOTH_DELTA,
) -> list:
    """Per-layer gate vectors for ``task`` under a gate mode."""
    out = []
    for i, layer in enumerate(arch.layers):
        if params.config.all_shared:
            out.append((1.0, 0.0))
            continue
        if mode == "arch":
            logits = gates.logits.data[i, task] if gates is not None else np.zeros(2)
            out.append(routing_weights(layer.gates[task], logits))
        elif mode == "hard":
            logits = gates.logits.data[i, task]
            out.append(routing_weights(gate_decision(logits, delta), logits))
        elif mode in ("sample", "expectation"):
            out.append(gumbel_gate_probs(gates.logits[i, task], gates.tau, rng, mode))
        else:
            raise ValueError(f"unknown gate mode {mode!r}")
    return out


def backbone(
    params: SupernetParams,
    images: np.ndarray,
    arch: Architecture,
    task: int,
    gate_vectors: Sequence,
) -> Tensor:
    """Pooled (class-token) features after the final norm."""
    x = embed_patches(params, images)
    for i, layer in enumerate(arch.layers):
        x = block_forward(params, i, x, layer.heads, layer.mlp_ratio, layer.keep, task, gate_vectors[i])
    x = ag.layernorm(x, params["norm.g"], params["norm.b"])
    return x[:, 0, :]


def forward(
    params: SupernetParams,
    images: np.ndarray,
    arch: Architecture,
    task: int,
    gates: GateState | None = None,
    mode: str = "hard",
    rng: np.random.Generator | None = None,
    delta: float = DEFAULT_BOTH_DELTA,
) -> Tensor:
    """Task embeddings (B, feature_dim) for ``images`` under ``arch``."""
    violations = validate(arch, params.config.space)
    if violations:
        raise ValueError(f"invalid architecture: {violations}")
    vecs = layer_gates(params, gates, arch, task, mode, rng, delta)
    pooled = backbone(params, images, arch, task, vecs)
    return ag.add(ag.matmul(pooled, params[f"head.t{task}.w"]), params[f"head.t{task}.b"])


def embed_numpy(params, images, arch, task, gates=None, mode="hard", delta=DEFAULT_BOTH_DELTA, batch=256):
    """Gradient-free embeddings as a float array, computed in chunks."""
    out = []
    with ag.no_grad():
        for lo in range(0, len(images), batch):
            out.append(forward(params, images[lo:lo + batch], arch, task, gates, mode, delta=delta).data)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# extraction


@dataclass
class TrimmedModel:
    """Standalone sub-network for a task subset; plain numpy forward."""

    arch: Architecture
    tasks: tuple[int, ...]
    space: SearchSpace
    patch_size: int
    arrays: dict[str, np.ndarray]
    routing: dict[int, list[tuple[float, float]]]
    cost_report: CostReport
    decisions: list[tuple[Gate, ...]] = field(default_factory=list)

    def num_params(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def forward(self, images: np.ndarray, task: int) -> np.ndarray:
        if task not in self.tasks:
            raise ValueError(f"task {task} not in trimmed task set {self.tasks}")
        a = self.arrays
        sp = self.space
        x = images_to_patches(images, self.patch_size)
        b = x.shape[0]
        tok = ag.k_matmul(x, a["patch.w"]) + a["patch.b"]
        cls = np.zeros((b, 1, sp.embed_dim), dtype=tok.dtype) + a["cls_token"]
        x = np.concatenate([cls, tok], axis=1) + a["pos"]
        for i, layer in enumerate(self.arch.layers):
            if not layer.keep:
                continue
            p = f"L{i}."
            y = ag.k_layernorm(x, a[p + "ln1.g"], a[p + "ln1.b"])
            x = _np_attention(a, p, y, layer.heads, sp.head_dim) + x
            y = ag.k_layernorm(x, a[p + "ln2.g"], a[p + "ln2.b"])
            ws, wp = self.routing[task][i]
            if wp == 0.0:
                mix = _np_ffn(a, f"{p}ffn.shared.", y)
            elif ws == 0.0:
                mix = _np_ffn(a, f"{p}ffn.t{task}.", y)
            else:
                mix = _np_ffn(a, f"{p}ffn.shared.", y) * float(ws) + _np_ffn(a, f"{p}ffn.t{task}.", y) * float(wp)
            x = mix + x
        x = ag.k_layernorm(x, a["norm.g"], a["norm.b"])[:, 0, :]
        return ag.k_matmul(x, a[f"head.t{task}.w"]) + a[f"head.t{task}.b"]

    def manifest(self) -> dict:
        return {
            "arch": self.arch.encode(),
            "tasks": list(self.tasks),
            "space": self.space.to_dict(),
            "patch_size": self.patch_size,
            "gate_decisions": ["".join(g.value for g in layer) for layer in self.decisions],
            "routing": {str(t): [list(w) for w in r] for t, r in self.routing.items()},
            "cost": self.cost_report.to_dict(),
            "num_params": self.num_params(),
        }

    def save(self, path) -> None:
        ag.save_bundle(path, {"kind": "trimmed-model", **self.manifest()}, self.arrays)

    @classmethod
    def load(cls, path) -> TrimmedModel:
        from .arch_space import decode

        man, arrays = ag.load_bundle(path)
        if man.get("kind") != "trimmed-model":
            raise ag.FormatError(f"{path}: not a trimmed model")
        space = SearchSpace.from_dict(man["space"])
        arch = decode(man["arch"], space)
        tasks = tuple(man["tasks"])
        return cls(
            arch=arch,
            tasks=tasks,
            space=space,
            patch_size=man["patch_size"],
            arrays=arrays,
            routing={int(t): [tuple(w) for w in r] for t, r in man["routing"].items()},
            cost_report=cost(arch, space, tasks),
            decisions=[tuple(Gate(c) for c in s) for s in man["gate_decisions"]],
        )


def _np_attention(a, p, x, heads, dh):
    b, n, _ = x.shape
    w = heads * dh

    def proj(name):
        y = ag.k_matmul(x, a[p + name + ".w"])
        if name != "k":
            y = y + a[p + name + ".b"]
        return y.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = proj("q"), proj("k"), proj("v")
    scores = (ag.k_matmul(q, k.transpose(0, 1, 3, 2)) * np.float32(dh**-0.5)).astype(x.dtype)
    ctx = ag.k_matmul(ag.k_softmax(scores), v).transpose(0, 2, 1, 3).reshape(b, n, w)
    return ag.k_matmul(ctx, a[p + "proj.w"]) + a[p + "proj.b"]


def _np_ffn(a, p, x):
    h = ag.k_gelu(ag.k_matmul(x, a[p + "w1"]) + a[p + "b1"])
    return ag.k_matmul(h, a[p + "w2"]) + a[p + "b2"]


def extract_subnet(
    params: SupernetParams,
    arch: Architecture,
    tasks: Sequence[int],
    gates: GateState | None = None,
    delta: float = DEFAULT_BOTH_DELTA,
    use_arch_gates: bool = False,
) -> TrimmedModel:
    """Copy the prefix slices needed by ``arch`` for ``tasks``.

    Routing per (layer, task) comes from the learned gates (argmax, or both
    paths when the probability gap is below ``delta``); with
    ``use_arch_gates`` the architecture's own gate symbols are used instead.
    """
    sp = params.config.space
    violations = validate(arch, sp)
    if violations:
        raise ValueError(f"invalid architecture: {violations}")
    tasks = tuple(sorted(set(int(t) for t in tasks)))
    if not tasks:
        raise ValueError("task set must be non-empty")
    if min(tasks) < 0 or max(tasks) >= sp.num_tasks:
        raise ValueError(f"task set {tasks} out of range")
    logits = gates.logits.data if gates is not None else np.zeros((sp.num_layers, sp.num_tasks, 2))
    if params.config.all_shared:
        decisions = [(Gate.SHARED,) * sp.num_tasks for _ in arch.layers]
    elif use_arch_gates or gates is None:
        decisions = [layer.gates for layer in arch.layers]
    else:
        decisions = gate_decisions(logits, delta)
    arch = arch.with_gates(decisions)

    src = params.arrays()
    out: dict[str, np.ndarray] = {k: src[k].copy() for k in ("patch.w", "patch.b", "cls_token", "pos", "norm.g", "norm.b")}
    routing: dict[int, list[tuple[float, float]]] = {t: [] for t in tasks}
    for i, layer in enumerate(arch.layers):
        for t in tasks:
            routing[t].append(routing_weights(layer.gates[t], logits[i, t]))
        if not layer.keep:
            continue
        p = f"L{i}."
        w = layer.heads * sp.head_dim
        hidden = sp.hidden_dim(layer.mlp_ratio)
        for nm in ("q", "k", "v"):
            out[p + nm + ".w"] = src[p + nm + ".w"][:, :w].copy()
        for nm in ("q", "v"):
            out[p + nm + ".b"] = src[p + nm + ".b"][:w].copy()
        out[p + "proj.w"] = src[p + "proj.w"][:w, :].copy()
        out[p + "proj.b"] = src[p + "proj.b"].copy()
        for ln in ("ln1", "ln2"):
            out[p + ln + ".g"] = src[p + ln + ".g"].copy()
            out[p + ln + ".b"] = src[p + ln + ".b"].copy()
        paths = []
        if any(layer.gates[t].paths[0] for t in tasks):
            paths.append("shared")
        paths += [f"t{t}" for t in tasks if layer.gates[t].paths[1]]
        for path in paths:
            q = f"{p}ffn.{path}."
            out[q + "w1"] = src[q + "w1"][:, :hidden].copy()
            out[q + "b1"] = src[q + "b1"][:hidden].copy()
            out[q + "w2"] = src[q + "w2"][:hidden, :].copy()
            out[q + "b2"] = src[q + "b2"].copy()
    for t in tasks:
        out[f"head.t{t}.w"] = src[f"head.t{t}.w"].copy()
        out[f"head.t{t}.b"] = src[f"head.t{t}.b"].copy()
    return TrimmedModel(
        arch=arch,
        tasks=tasks,
        space=sp,
        patch_size=params.config.patch_size,
        arrays=out,
        routing=routing,
        cost_report=cost(arch, sp, tasks),
        decisions=list(decisions),
    )


def supernet_cost(params: SupernetParams, arch: Architecture | None = None) -> CostReport:
    """Supernet-view cost (every FFN path present) of ``arch`` (default: max config)."""
    sp = params.config.space
    return cost(arch or sp.max_arch(), sp, None)


def hard_arch(arch: Architecture, gates: GateState, delta: float = DEFAULT_BOTH_DELTA) -> Architecture:
    """``arch`` with gate symbols replaced by the learned routing decisions."""
    return arch.with_gates(gates.decisions(delta))


__all__ = [
    "SupernetConfig",
    "SupernetParams",
    "GateState",
    "TrimmedModel",
    "LayerChoice",
    "gumbel_gate_probs",
    "gate_decision",
    "gate_decisions",
    "block_forward",
    "forward",
    "embed_numpy",
    "extract_subnet",
]
