"""Minimal dense-tensor engine with reverse-mode differentiation.

Values are stored as float32 by default. Matmuls and reductions accumulate in
float64 and round back to the storage dtype. The storage dtype can be switched
(e.g. to float64 for finite-difference checks) with :func:`precision`.

Every primitive records its parents and a backward closure. ``backward`` walks
the recorded graph in reverse creation order, so each record is visited once
and gradients accumulate additively.
"""

from __future__ import annotations

import contextlib
import itertools
import json
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

LN_EPS = 1e-5
_GELU_C = float(np.sqrt(2.0 / np.pi))

_dtype = np.dtype(np.float32)
_grad_enabled = True
_counter = itertools.count()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Temporarily change the dtype used for new tensors and op outputs."""
    global _dtype
    prev, _dtype = _dtype, np.dtype(dtype)
    try:
        yield
    finally:
        _dtype = prev


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def current_dtype() -> np.dtype:
    return _dtype


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_seq")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=_dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._seq = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accum(self, g: np.ndarray) -> None:
        g = np.asarray(g, dtype=self.data.dtype)
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward needs an explicit grad for shape {self.shape}")
            grad = np.ones_like(self.data)
        nodes: dict[int, Tensor] = {}
        stack = [self]
        while stack:
            node = stack.pop()
            if node._seq in nodes:
                continue
            nodes[node._seq] = node
            stack.extend(node._parents)
        # creation order is a valid topological order
        order = sorted(nodes.values(), key=lambda t: t._seq, reverse=True)
        grads: dict[int, np.ndarray] = {self._seq: np.asarray(grad, dtype=self.data.dtype)}
        for node in order:
            g = grads.pop(node._seq, None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node._accum(g)
                continue
            for parent, pg in node._backward(g):
                if pg is None or not (parent.requires_grad or parent._backward is not None):
                    continue
                if parent._seq in grads:
                    grads[parent._seq] = grads[parent._seq] + pg
                else:
                    grads[parent._seq] = pg

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data) -> Tensor:
    return Tensor(data, requires_grad=True)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad or p._backward is not None for p in parents):
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _f64_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.matmul(a.astype(np.float64), b.astype(np.float64)).astype(_dtype)


# ---------------------------------------------------------------------------
# plain-array kernels, shared with the standalone trimmed-model forward


def k_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _f64_matmul(a, b)


def k_layernorm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = LN_EPS) -> np.ndarray:
    x64 = x.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    var = ((x64 - mu) ** 2).mean(axis=-1, keepdims=True)
    xhat = (x64 - mu) / np.sqrt(var + eps)
    return (xhat * gamma.astype(np.float64) + beta.astype(np.float64)).astype(_dtype)


def k_softmax(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    e = np.exp(x64 - x64.max(axis=-1, keepdims=True))
    return (e / e.sum(axis=-1, keepdims=True)).astype(_dtype)


def k_gelu(x: np.ndarray) -> np.ndarray:
    x64 = x.astype(np.float64)
    return (0.5 * x64 * (1.0 + np.tanh(_GELU_C * (x64 + 0.044715 * x64 * x64 * x64)))).astype(_dtype)


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = np.add(a.data, b.data, dtype=_dtype)
    except ValueError as exc:
        raise ShapeError(f"add: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return ((a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape)))

    return _make(out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: ((a, -g),))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python scalar."""
    return _make((a.data * c).astype(_dtype), (a,), lambda g: ((a, g * c),))


def mul(a, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = np.multiply(a.data, b.data, dtype=_dtype)
    except ValueError as exc:
        raise ShapeError(f"mul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        return ((a, _unbroadcast(g * b.data, a.shape)), (b, _unbroadcast(g * a.data, b.shape)))

    return _make(out, (a, b), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matmul over leading dimensions (numpy broadcasting rules)."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # activations times a weight matrix: one flat GEMM
        a2 = a.data.reshape(-1, a.shape[-1])
        out = _f64_matmul(a2, b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = _f64_matmul(g2, b.data.T).reshape(a.shape)
            gb = _f64_matmul(a2.T, g2)
            return ((a, ga), (b, gb))

        return _make(out, (a, b), backward)
    try:
        out = _f64_matmul(a.data, b.data)
    except ValueError as exc:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}") from exc

    def backward(g):
        ga = _f64_matmul(g, np.swapaxes(b.data, -1, -2))
        gb = _f64_matmul(np.swapaxes(a.data, -1, -2), g)
        return ((a, _unbroadcast(ga, a.shape)), (b, _unbroadcast(gb, b.shape)))

    return _make(out, (a, b), backward)


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: ((a, np.transpose(g, inv)),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {a.shape} as {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: ((a, g.reshape(a.shape)),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer)) or i is None or i is Ellipsis for i in items)


def take(a: Tensor, idx) -> Tensor:
    """Basic or fancy indexing; backward scatters with accumulation."""
    out = a.data[idx]
    basic = _is_basic_index(idx)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return ((a, full),)

    return _make(np.array(out, dtype=_dtype), (a,), backward)


def embed(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]``."""
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"embed: table must be 2-D, got {table.shape}")
    return take(table, ids)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        shapes = ", ".join(str(t.shape) for t in tensors)
        raise ShapeError(f"concat: incompatible shapes {shapes} on axis {axis}") from exc
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        parts = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            parts.append((t, g[tuple(sl)]))
        return parts

    return _make(out, tensors, backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64).astype(_dtype)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return ((a, np.broadcast_to(g, a.shape).astype(_dtype)),)

    return _make(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data.astype(np.float64)).astype(_dtype)
    return _make(out, (a,), lambda g: ((a, g * out),))


def log(a: Tensor) -> Tensor:
    out = np.log(a.data.astype(np.float64)).astype(_dtype)
    return _make(out, (a,), lambda g: ((a, g / a.data),))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data.astype(np.float64)).astype(_dtype)
    return _make(out, (a,), lambda g: ((a, g * 0.5 / out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0).astype(_dtype), (a,), lambda g: ((a, g * mask),))


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh form."""
    x64 = a.data.astype(np.float64)
    inner = _GELU_C * (x64 + 0.044715 * x64 * x64 * x64)
    th = np.tanh(inner)
    out = (0.5 * x64 * (1.0 + th)).astype(_dtype)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x64 * x64)
        d = 0.5 * (1.0 + th) + 0.5 * x64 * (1.0 - th * th) * dinner
        return ((a, (g * d).astype(_dtype)),)

    return _make(out, (a,), backward)


def softmax(a: Tensor) -> Tensor:
    """Softmax over the last axis."""
    out = k_softmax(a.data)

    def backward(g):
        y = out.astype(np.float64)
        g64 = g.astype(np.float64)
        dot = (g64 * y).sum(axis=-1, keepdims=True)
        return ((a, (y * (g64 - dot)).astype(_dtype)),)

    return _make(out, (a,), backward)


def log_softmax(a: Tensor) -> Tensor:
    x64 = a.data.astype(np.float64)
    shifted = x64 - x64.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out64 = shifted - lse

    def backward(g):
        g64 = g.astype(np.float64)
        sm = np.exp(out64)
        return ((a, (g64 - sm * g64.sum(axis=-1, keepdims=True)).astype(_dtype)),)

    return _make(out64.astype(_dtype), (a,), backward)


def layernorm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """LayerNorm over the last axis with affine parameters."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: x {x.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    x64 = x.data.astype(np.float64)
    mu = x64.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(((x64 - mu) ** 2).mean(axis=-1, keepdims=True) + eps)
    xhat = (x64 - mu) * inv
    out = k_layernorm(x.data, gamma.data, beta.data, eps)

    def backward(g):
        g64 = g.astype(np.float64)
        gxhat = g64 * gamma.data.astype(np.float64)
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(g.ndim - 1))
        ggamma = (g64 * xhat).sum(axis=red)
        gbeta = g64.sum(axis=red)
        return ((x, gx.astype(_dtype)), (gamma, ggamma.astype(_dtype)), (beta, gbeta.astype(_dtype)))

    return _make(out, (x, gamma, beta), backward)


def l2_normalize(a: Tensor, eps: float = 0.0) -> Tensor:
    """Row-normalize over the last axis. Zero rows are rejected."""
    x64 = a.data.astype(np.float64)
    norm = np.sqrt((x64 * x64).sum(axis=-1, keepdims=True))
    if np.any(norm <= eps):
        raise ValueError("l2_normalize: zero-norm row")
    y = x64 / norm

    def backward(g):
        g64 = g.astype(np.float64)
        gx = (g64 - y * (g64 * y).sum(axis=-1, keepdims=True)) / norm
        return ((a, gx.astype(_dtype)),)

    return _make(y.astype(_dtype), (a,), backward)


# ---------------------------------------------------------------------------
# finite-difference check


class NonFiniteError(FloatingPointError):
    pass


def grad_check(
    f: Callable[[], Tensor],
    params: Tensor | Iterable[Tensor],
    eps: float = 1e-3,
    max_coords: int | None = 64,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between backprop and central differences.

    ``f`` rebuilds the scalar graph from the current values of ``params``;
    coordinates are perturbed in place. For at most ``max_coords`` sampled
    coordinates per tensor, returns
    ``max |a - n| / max(1e-8, |a| + |n|)``.
    """
    if not 1e-4 <= eps <= 1e-2:
        raise ValueError(f"eps must lie in [1e-4, 1e-2], got {eps}")
    params = [params] if isinstance(params, Tensor) else list(params)
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.grad = None
    loss = f()
    loss.backward()
    worst = 0.0
    for pi, p in enumerate(params):
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.astype(np.float64)
        flat = p.data.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        for c in coords:
            old = flat[c]
            flat[c] = old + eps
            fp = float(f().data)
            flat[c] = old - eps
            fm = float(f().data)
            flat[c] = old
            num = (fp - fm) / (2 * eps)
            ana = float(analytic.reshape(-1)[c])
            if not (np.isfinite(num) and np.isfinite(ana)):
                raise NonFiniteError(f"non-finite gradient at param {pi}, coordinate {tuple(int(i) for i in np.unravel_index(c, p.shape))}")
            err = abs(ana - num) / max(1e-8, abs(ana) + abs(num))
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# serialization: b"UFOT" + JSON header line + raw row-major payload

UFOT_MAGIC = b"UFOT"
_DTYPES = {"f32": "<f4", "f64": "<f8", "i64": "<i8", "u8": "u1"}
_DTYPE_NAMES = {np.dtype(v): k for k, v in _DTYPES.items()}


class FormatError(ValueError):
    pass


def encode_array(arr: np.ndarray, name: str | None = None) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype.newbyteorder("<") not in _DTYPE_NAMES:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    kind = _DTYPE_NAMES[arr.dtype.newbyteorder("<")]
    header = {"dims": list(arr.shape), "dtype": kind, "byte-order": "LE"}
    if name is not None:
        header["name"] = name
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes()
    return UFOT_MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload


def decode_array(buf: bytes, offset: int = 0) -> tuple[np.ndarray, dict, int]:
    """Decode one record at ``offset``; returns (array, header, next offset)."""
    if buf[offset:offset + 4] != UFOT_MAGIC:
        raise FormatError(f"bad tensor magic at byte {offset}")
    nl = buf.find(b"\n", offset + 4)
    if nl < 0:
        raise FormatError("truncated tensor header")
    try:
        header = json.loads(buf[offset + 4:nl])
        kind = _DTYPES[header["dtype"]]
        dims = [int(d) for d in header["dims"]]
    except (ValueError, KeyError) as exc:
        raise FormatError(f"malformed tensor header at byte {offset}") from exc
    if header.get("byte-order", "LE") != "LE":
        raise FormatError("only little-endian payloads are supported")
    nbytes = int(np.prod(dims, dtype=np.int64)) * np.dtype(kind).itemsize
    start = nl + 1
    if len(buf) < start + nbytes:
        raise FormatError(f"truncated payload: need {nbytes} bytes, have {len(buf) - start}")
    arr = np.frombuffer(buf, dtype=kind, count=nbytes // np.dtype(kind).itemsize, offset=start)
    return arr.reshape(dims).copy(), header, start + nbytes


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_array(arr))


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    arr, _, end = decode_array(buf)
    if end != len(buf):
        raise FormatError("trailing bytes after tensor payload")
    return arr


BUNDLE_MAGIC = b"UFOB"


def save_bundle(path, manifest: dict, arrays: dict[str, np.ndarray]) -> None:
    """Write a JSON manifest line followed by named UFOT records (in key order)."""
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC + json.dumps(manifest, sort_keys=True).encode() + b"\n")
        for name in sorted(arrays):
            fh.write(encode_array(arrays[name], name=name))


def load_bundle(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != BUNDLE_MAGIC:
        raise FormatError(f"{path}: not a UFOB bundle")
    nl = buf.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(buf[4:nl])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed manifest") from exc
    arrays: dict[str, np.ndarray] = {}
    offset = nl + 1
    while offset < len(buf):
        arr, header, offset = decode_array(buf, offset)
        arrays[header["name"]] = arr
    return manifest, arrays
