"""Architecture search space: encoding, validation, sampling and cost accounting.

An architecture is a per-layer sequence of ``(heads, mlp_ratio, gates, keep)``
where ``gates`` holds one routing symbol per task:

* ``S`` - shared FFN only
* ``P`` - the task's private FFN only
* ``B`` - both paths

FLOPs count 2 per multiply-accumulate over matmuls only; softmax, LayerNorm,
GELU and bias adds are not counted.
"""

from __future__ import annotations

import enum
import itertools
import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

DEFAULT_ENUM_CAP = 10**6


class Gate(str, enum.Enum):
    SHARED = "S"
    PRIVATE = "P"
    BOTH = "B"

    @property
    def paths(self) -> tuple[bool, bool]:
        """(uses shared FFN, uses private FFN)."""
        return (self is not Gate.PRIVATE, self is not Gate.SHARED)


GATES = (Gate.BOTH, Gate.PRIVATE, Gate.SHARED)  # sorted by symbol


def fmt_ratio(m: float) -> str:
    return f"{m:g}"


@dataclass(frozen=True)
class SearchSpace:
    heads: tuple[int, ...]
    mlp_ratios: tuple[float, ...]
    num_layers: int
    num_tasks: int
    embed_dim: int
    head_dim: int
    tokens: int
    forced_keep_layers: frozenset[int] = frozenset()
    patch_dim: int = 0

    def __post_init__(self):
        object.__setattr__(self, "heads", tuple(sorted(int(h) for h in self.heads)))
        object.__setattr__(self, "mlp_ratios", tuple(sorted(float(m) for m in self.mlp_ratios)))
        object.__setattr__(self, "forced_keep_layers", frozenset(int(i) for i in self.forced_keep_layers))
        problems = []
        if self.num_layers < 1:
            problems.append("num_layers must be >= 1")
        if self.num_tasks < 1:
            problems.append("num_tasks must be >= 1")
        if not self.heads or min(self.heads) < 1:
            problems.append("heads must be non-empty positive integers")
        elif max(self.heads) * self.head_dim != self.embed_dim:
            problems.append(f"max(heads) * head_dim = {max(self.heads) * self.head_dim} != embed_dim {self.embed_dim}")
        if not self.mlp_ratios or min(self.mlp_ratios) <= 0:
            problems.append("mlp_ratios must be non-empty and positive")
        if self.tokens < 1:
            problems.append("tokens must be >= 1")
        bad = [i for i in self.forced_keep_layers if not 0 <= i < self.num_layers]
        if bad:
            problems.append(f"forced_keep_layers out of range: {sorted(bad)}")
        if problems:
            raise ValueError("invalid search space: " + "; ".join(problems))

    @property
    def max_heads(self) -> int:
        return max(self.heads)

    @property
    def max_ratio(self) -> float:
        return max(self.mlp_ratios)

    def hidden_dim(self, m: float) -> int:
        """FFN hidden width for ratio ``m``; rounds half up."""
        return int(math.floor(m * self.embed_dim + 0.5))

    @property
    def max_hidden(self) -> int:
        return self.hidden_dim(self.max_ratio)

    def drop_choices(self, layer: int) -> tuple[int, ...]:
        return (1,) if layer in self.forced_keep_layers else (0, 1)

    def layer_count(self, layer: int) -> int:
        return len(self.heads) * len(self.mlp_ratios) * 3**self.num_tasks * len(self.drop_choices(layer))

    def size(self) -> int:
        """Number of valid architectures (exact integer)."""
        return math.prod(self.layer_count(i) for i in range(self.num_layers))

    def max_arch(self, gate: Gate = Gate.BOTH) -> Architecture:
        layer = LayerChoice(self.max_heads, self.max_ratio, (gate,) * self.num_tasks, 1)
        return Architecture((layer,) * self.num_layers)

    @classmethod
    def from_dict(cls, d: dict) -> SearchSpace:
        keep = d.get("forced_keep_layers", [])
        if isinstance(keep, int):
            keep = range(keep)
        return cls(
            heads=tuple(d["heads"]),
            mlp_ratios=tuple(d["mlp_ratios"]),
            num_layers=int(d["num_layers"]),
            num_tasks=int(d["num_tasks"]),
            embed_dim=int(d["embed_dim"]),
            head_dim=int(d["head_dim"]),
            tokens=int(d["tokens"]),
            forced_keep_layers=frozenset(keep),
            patch_dim=int(d.get("patch_dim", 0)),
        )

    def to_dict(self) -> dict:
        return {
            "heads": list(self.heads),
            "mlp_ratios": list(self.mlp_ratios),
            "num_layers": self.num_layers,
            "num_tasks": self.num_tasks,
            "embed_dim": self.embed_dim,
            "head_dim": self.head_dim,
            "tokens": self.tokens,
            "forced_keep_layers": sorted(self.forced_keep_layers),
            "patch_dim": self.patch_dim,
        }

    @classmethod
    def load(cls, path: str | Path) -> SearchSpace:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class LayerChoice:
    heads: int
    mlp_ratio: float
    gates: tuple[Gate, ...]
    keep: int = 1

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(Gate(g) for g in self.gates))

    def encode(self) -> str:
        return f"h{self.heads}m{fmt_ratio(self.mlp_ratio)}d{self.keep}g{''.join(g.value for g in self.gates)}"


@dataclass(frozen=True)
class Architecture:
    layers: tuple[LayerChoice, ...]

    def encode(self) -> str:
        return "|".join(layer.encode() for layer in self.layers)

    def __str__(self) -> str:
        return self.encode()

    def with_gates(self, gates: Sequence[Sequence[Gate]]) -> Architecture:
        """Copy with per-layer gate tuples replaced."""
        return Architecture(tuple(
            LayerChoice(l.heads, l.mlp_ratio, tuple(g), l.keep) for l, g in zip(self.layers, gates)
        ))


def encode(arch: Architecture) -> str:
    return arch.encode()


class DecodeError(ValueError):
    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


_TOKEN = re.compile(r"h(?P<h>\d+)m(?P<m>\d+(?:\.\d+)?)d(?P<d>[01])g(?P<g>[SPB]+)")


def decode(text: str, space: SearchSpace) -> Architecture:
    """Parse an encoding; raises DecodeError naming the first bad position/field."""
    layers = []
    pos = 0
    tokens = text.split("|")
    if len(tokens) != space.num_layers:
        raise DecodeError(f"expected {space.num_layers} layers, got {len(tokens)}", 0)
    for i, tok in enumerate(tokens):
        mt = _TOKEN.fullmatch(tok)
        if mt is None:
            # locate the first character where the token stops matching the grammar
            j = 0
            for prefix_len in range(len(tok), -1, -1):
                if re.match(r"h\d*(m\d*(\.\d*)?(d[01]?(g[SPB]*)?)?)?$", tok[:prefix_len]):
                    j = prefix_len
                    break
            raise DecodeError(f"malformed layer token {tok!r}", pos + j)
        h, m, d = int(mt["h"]), float(mt["m"]), int(mt["d"])
        gates = tuple(Gate(c) for c in mt["g"])
        if h not in space.heads:
            raise DecodeError(f"layer {i}: h={h} not in {list(space.heads)}", pos + mt.start("h"))
        if m not in space.mlp_ratios:
            raise DecodeError(f"layer {i}: m={mt['m']} not in {list(space.mlp_ratios)}", pos + mt.start("m"))
        if d not in space.drop_choices(i):
            raise DecodeError(f"layer {i}: d={d} not allowed (forced keep)", pos + mt.start("d"))
        if len(gates) != space.num_tasks:
            raise DecodeError(f"layer {i}: g has {len(gates)} symbols, expected {space.num_tasks}", pos + mt.start("g"))
        layers.append(LayerChoice(h, m, gates, d))
        pos += len(tok) + 1
    return Architecture(tuple(layers))


def validate(arch: Architecture, space: SearchSpace) -> list[tuple[int, str]]:
    """Violations as ``(layer, field)`` pairs; empty list means valid."""
    out: list[tuple[int, str]] = []
    if len(arch.layers) != space.num_layers:
        out.append((-1, "num_layers"))
    for i, layer in enumerate(arch.layers[: space.num_layers]):
        if layer.heads not in space.heads:
            out.append((i, "h"))
        if layer.mlp_ratio not in space.mlp_ratios:
            out.append((i, "m"))
        if len(layer.gates) != space.num_tasks:
            out.append((i, "g"))
        if layer.keep not in space.drop_choices(i):
            out.append((i, "d"))
    return out


def is_valid(arch: Architecture, space: SearchSpace) -> bool:
    return not validate(arch, space)


class GateCountOverflow(ArithmeticError):
    pass


def count_gate_configs(num_layers: int, num_tasks: int, constrained: bool = True, limit: int | None = None) -> int:
    """Number of FFN-path configurations.

    Constrained: ``|T| * 3**l``. Unconstrained: ``|T| * (2**|G| - 1)**l`` with
    ``|G| = |T| + 1`` gate choices (shared plus one per task). Raises
    GateCountOverflow if the result exceeds ``limit`` (default: 2**63 - 1).
    """
    limit = 2**63 - 1 if limit is None else limit
    per_layer = 3 if constrained else 2 ** (num_tasks + 1) - 1
    # bound the exponent before computing the power
    if num_layers * math.log2(per_layer) + math.log2(max(num_tasks, 1)) > math.log2(limit) + 1:
        raise GateCountOverflow(f"gate count for l={num_layers}, |T|={num_tasks} exceeds {limit}")
    n = num_tasks * per_layer**num_layers
    if n > limit:
        raise GateCountOverflow(f"gate count {n} exceeds {limit}")
    return n


# ---------------------------------------------------------------------------
# cost accounting


@dataclass(frozen=True)
class LayerCost:
    attn_flops: int
    ffn_flops: int
    attn_params: int
    ffn_params: int
    norm_params: int
    ffn_paths: int

    @property
    def flops(self) -> int:
        return self.attn_flops + self.ffn_flops

    @property
    def params(self) -> int:
        return self.attn_params + self.ffn_params + self.norm_params


@dataclass(frozen=True)
class CostReport:
    flops: int
    params: int
    stem_flops: int
    stem_params: int
    per_layer: tuple[LayerCost, ...] = field(default_factory=tuple)

    def to_dict(self) -> dict:
        return {
            "flops": self.flops,
            "params": self.params,
            "stem_flops": self.stem_flops,
            "stem_params": self.stem_params,
            "per_layer": [
                {"flops": c.flops, "params": c.params, "ffn_paths": c.ffn_paths} for c in self.per_layer
            ],
        }


def attention_flops(n: int, d: int, width: int) -> int:
    # qkv + scores + weighted sum + output projection
    return 2 * n * d * 3 * width + 4 * n * n * width + 2 * n * width * d


def ffn_flops(n: int, d: int, hidden: int) -> int:
    return 4 * n * d * hidden


def stem_cost(space: SearchSpace) -> tuple[int, int]:
    """(flops, params) of patch embedding, class token, positions and final norm."""
    d = space.embed_dim
    patches = space.tokens - 1
    flops = 2 * patches * space.patch_dim * d
    params = space.patch_dim * d + d + d + space.tokens * d + 2 * d
    return flops, params


def ffn_path_count(gates: Sequence[Gate], tasks: Sequence[int] | None) -> int:
    """Distinct FFN modules reachable by ``tasks`` (None: every path in the supernet)."""
    if tasks is None:
        return 1 + len(gates)
    shared = any(gates[t].paths[0] for t in tasks)
    private = sum(1 for t in tasks if gates[t].paths[1])
    return int(shared) + private


def cost(arch: Architecture, space: SearchSpace, tasks: Sequence[int] | None = None) -> CostReport:
    """Analytic FLOPs/params of ``arch``.

    ``tasks=None`` is the supernet view: the shared FFN and every task's private
    FFN are present in each kept layer, regardless of gates. Otherwise the
    trimmed view for the task subset: the shared FFN is counted at most once and
    private FFNs only for tasks in the subset that route to them. Task heads
    are excluded.
    """
    violations = validate(arch, space)
    if violations:
        raise ValueError(f"invalid architecture: {violations}")
    if tasks is not None:
        tasks = sorted(set(tasks))
        if not tasks or min(tasks) < 0 or max(tasks) >= space.num_tasks:
            raise ValueError(f"task subset {tasks} invalid for {space.num_tasks} tasks")
    n, d, dh = space.tokens, space.embed_dim, space.head_dim
    per_layer = []
    for layer in arch.layers:
        if not layer.keep:
            per_layer.append(LayerCost(0, 0, 0, 0, 0, 0))
            continue
        width = layer.heads * dh
        hidden = space.hidden_dim(layer.mlp_ratio)
        paths = ffn_path_count(layer.gates, tasks)
        per_layer.append(LayerCost(
            attn_flops=attention_flops(n, d, width),
            ffn_flops=paths * ffn_flops(n, d, hidden),
            attn_params=d * 3 * width + 2 * width + width * d + d,
            ffn_params=paths * (d * hidden + hidden + hidden * d + d),
            norm_params=4 * d,
            ffn_paths=paths,
        ))
    sf, sp = stem_cost(space)
    return CostReport(
        flops=sf + sum(c.flops for c in per_layer),
        params=sp + sum(c.params for c in per_layer),
        stem_flops=sf,
        stem_params=sp,
        per_layer=tuple(per_layer),
    )


# ---------------------------------------------------------------------------
# sampling and enumeration


def sample_uniform(space: SearchSpace, rng: np.random.Generator) -> Architecture:
    """Uniform over valid architectures (fields are independent per layer)."""
    layers = []
    for i in range(space.num_layers):
        h = space.heads[rng.integers(len(space.heads))]
        m = space.mlp_ratios[rng.integers(len(space.mlp_ratios))]
        gates = tuple(GATES[k] for k in rng.integers(3, size=space.num_tasks))
        drops = space.drop_choices(i)
        d = drops[rng.integers(len(drops))]
        layers.append(LayerChoice(int(h), float(m), gates, int(d)))
    return Architecture(tuple(layers))


def sample_distinct(space: SearchSpace, count: int, rng: np.random.Generator) -> list[Architecture]:
    """Up to ``count`` distinct uniform samples (fewer only if the space is smaller)."""
    count = min(count, space.size())
    seen: dict[str, Architecture] = {}
    while len(seen) < count:
        a = sample_uniform(space, rng)
        seen.setdefault(a.encode(), a)
    return list(seen.values())


class SpaceTooLarge(ValueError):
    pass


def _layer_options(space: SearchSpace, i: int) -> list[LayerChoice]:
    opts = [
        LayerChoice(h, m, gates, d)
        for h in space.heads
        for m in space.mlp_ratios
        for d in space.drop_choices(i)
        for gates in itertools.product(GATES, repeat=space.num_tasks)
    ]
    return sorted(opts, key=LayerChoice.encode)


def enumerate_archs(space: SearchSpace, cap: int = DEFAULT_ENUM_CAP) -> Iterator[Architecture]:
    """Every valid architecture once, in lexicographic encoding order.

    Layer tokens are prefix-free, so ordering per-layer tokens lexicographically
    and taking their product yields the joined strings in lexicographic order.
    """
    total = space.size()
    if total > cap:
        raise SpaceTooLarge(f"search space has {total} architectures, above the enumeration cap {cap}")
    per_layer = [_layer_options(space, i) for i in range(space.num_layers)]
    for combo in itertools.product(*per_layer):
        yield Architecture(tuple(combo))
