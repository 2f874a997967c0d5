"""Minimal dense-tensor math with reverse-mode differentiation.

A small tape built on numpy arrays, covering exactly the primitives the
network needs: matmul, elementwise arithmetic, sigmoid, tanh-approximated
GELU, last-axis softmax and layer norm, embedding gather, dropout, shape
moves, masked fill, and a fused masked binary-cross-entropy-from-logits sum.

Gradients accumulate (+=) so one parameter may feed several graph sites.
Default precision is float64; pass ``dtype=np.float32`` to ``ParamStore``
for the fast path.
"""

from __future__ import annotations

import json
import math
import struct

import numpy as np

# When enabled, every op asserts its output is finite (slow; used in tests).
CHECK_FINITE = False

_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


class ShapeError(ValueError):
    pass


def _check(arr: np.ndarray, op: str) -> np.ndarray:
    if CHECK_FINITE and not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values produced by {op}")
    return arr


class Tensor:
    """A node of the tape: an ndarray plus the closure that propagates its gradient."""

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            # copy: g may alias another node's buffer and later += would corrupt it
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse sweep from a scalar output; gradients land in .grad fields."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar output, got shape {self.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, grad={'set' if self.grad is not None else 'none'})"

    # operator sugar used throughout the model code
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    return Tensor(arr)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the operand's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _needs(t: Tensor) -> bool:
    return t.requires_grad or t._backward is not None or bool(t._parents)


def add(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(_check(a.data + b.data, "add"), _parents=(a, b))

    def bw(g):
        if _needs(a):
            a._accumulate(_unbroadcast(g, a.data.shape))
        if _needs(b):
            b._accumulate(_unbroadcast(g, b.data.shape))

    out._backward = bw
    return out


def mul(a: Tensor, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(_check(a.data * b.data, "mul"), _parents=(a, b))

    def bw(g):
        if _needs(a):
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if _needs(b):
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    out._backward = bw
    return out


def scale(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = a.data.dtype.type(s)
    out = Tensor(a.data * s, _parents=(a,))

    def bw(g):
        if _needs(a):
            a._accumulate(g * s)

    out._backward = bw
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} @ {b.data.shape}")
    out = Tensor(_check(a.data @ b.data, "matmul"), _parents=(a, b))

    def bw(g):
        if _needs(a):
            a._accumulate(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.data.shape))
        if _needs(b):
            b._accumulate(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.data.shape))

    out._backward = bw
    return out


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = _stable_sigmoid(a.data)
    out = Tensor(_check(y, "sigmoid"), _parents=(a,))

    def bw(g):
        if _needs(a):
            a._accumulate(g * y * (1.0 - y))

    out._backward = bw
    return out


def gelu(a: Tensor) -> Tensor:
    """GELU in the tanh approximation."""
    a = as_tensor(a)
    x = a.data
    x2 = x * x
    u = x2 * _GELU_A
    u += 1.0
    u *= x
    u *= _GELU_C
    t = np.tanh(u)
    half_one_plus_t = 0.5 * (1.0 + t)
    out = Tensor(_check(x * half_one_plus_t, "gelu"), _parents=(a,))

    def bw(g):
        if _needs(a):
            du = x2 * (3.0 * _GELU_A)
            du += 1.0
            du *= _GELU_C
            sech2 = 1.0 - t * t
            sech2 *= du
            sech2 *= 0.5 * x
            sech2 += half_one_plus_t
            sech2 *= g
            a._accumulate(sech2)

    out._backward = bw
    return out


def softmax_last(a: Tensor) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(_check(y, "softmax"), _parents=(a,))

    def bw(g):
        if _needs(a):
            dot = (g * y).sum(axis=-1, keepdims=True)
            a._accumulate(y * (g - dot))

    out._backward = bw
    return out


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply the learnable affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.data.dtype.type(eps))
    xhat = xc * inv
    out = Tensor(_check(xhat * gain.data + bias.data, "layer_norm"), _parents=(x, gain, bias))

    def bw(g):
        if _needs(gain):
            gain._accumulate((g * xhat).reshape(-1, d).sum(axis=0))
        if _needs(bias):
            bias._accumulate(g.reshape(-1, d).sum(axis=0))
        if _needs(x):
            gx = g * gain.data
            s1 = gx.sum(axis=-1, keepdims=True)
            s2 = (gx * xhat).sum(axis=-1, keepdims=True)
            x._accumulate(inv * (gx - (s1 + xhat * s2) / d))

    out._backward = bw
    return out


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise IndexError(
            f"embedding ids out of range [0, {table.data.shape[0]}): "
            f"[{ids.min()}, {ids.max()}]"
        )
    out = Tensor(table.data[ids], _parents=(table,))

    def bw(g):
        if _needs(table):
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))

    out._backward = bw
    return out


def dropout(a: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at p == 0."""
    a = as_tensor(a)
    if not training or p == 0.0:
        return a
    if rng is None:
        raise ValueError("training-mode dropout needs a random generator")
    dtype = a.data.dtype
    uniform_dtype = dtype if dtype in (np.dtype(np.float32), np.dtype(np.float64)) else np.float64
    keep = (rng.random(a.data.shape, dtype=uniform_dtype) >= p).astype(dtype)
    keep /= dtype.type(1.0 - p)
    out = Tensor(a.data * keep, _parents=(a,))

    def bw(g):
        if _needs(a):
            a._accumulate(g * keep)

    out._backward = bw
    return out


def permute(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.ascontiguousarray(a.data.transpose(axes)), _parents=(a,))
    inverse = np.argsort(axes)

    def bw(g):
        if _needs(a):
            a._accumulate(g.transpose(inverse))

    out._backward = bw
    return out


def transpose_last2(a: Tensor) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.data.ndim - 2)) + (a.data.ndim - 1, a.data.ndim - 2)
    return permute(a, axes)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    a = as_tensor(a)
    out = Tensor(a.data.reshape(shape), _parents=(a,))

    def bw(g):
        if _needs(a):
            a._accumulate(g.reshape(a.data.shape))

    out._backward = bw
    return out


def narrow_last(a: Tensor, start: int, size: int) -> Tensor:
    """Slice [start, start+size) along the last axis."""
    a = as_tensor(a)
    if start < 0 or start + size > a.data.shape[-1]:
        raise ShapeError(f"narrow [{start}:{start + size}] exceeds last axis {a.data.shape[-1]}")
    out = Tensor(np.ascontiguousarray(a.data[..., start : start + size]), _parents=(a,))

    def bw(g):
        if _needs(a):
            full = np.zeros_like(a.data)
            full[..., start : start + size] = g
            a._accumulate(full)

    out._backward = bw
    return out


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is True by ``value`` (constant)."""
    a = as_tensor(a)
    data = np.where(mask, a.data.dtype.type(value), a.data)
    out = Tensor(data, _parents=(a,))

    def bw(g):
        if _needs(a):
            a._accumulate(_unbroadcast(np.where(mask, 0.0, g).astype(a.data.dtype), a.data.shape))

    out._backward = bw
    return out


def sum_all(a: Tensor) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.asarray(a.data.sum()), _parents=(a,))

    def bw(g):
        if _needs(a):
            a._accumulate(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    out._backward = bw
    return out


def bce_with_logits_sum(logits: Tensor, targets: np.ndarray, weights: np.ndarray) -> Tensor:
    """Sum of weighted elementwise binary cross-entropy in the stable logit form.

    loss = sum_w( max(x, 0) - x*y + log(1 + exp(-|x|)) ); padded or masked
    entries carry weight 0 and therefore contribute exactly zero loss and
    exactly zero gradient.
    """
    logits = as_tensor(logits)
    x = logits.data
    y = np.asarray(targets, dtype=x.dtype)
    w = np.asarray(weights, dtype=x.dtype)
    if y.shape != x.shape:
        raise ShapeError(f"bce targets shape {y.shape} != logits shape {x.shape}")
    e = np.exp(-np.abs(x))
    per_entry = np.maximum(x, 0.0) - x * y + np.log1p(e)
    out = Tensor(np.asarray((per_entry * w).sum()), _parents=(logits,))

    def bw(g):
        if _needs(logits):
            p = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
            p -= y
            p *= w
            p *= g
            logits._accumulate(p)

    out._backward = bw
    return out


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = matmul(x, weight)
    if bias is not None:
        out = add(out, bias)
    return out


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------


class ParamStore:
    """Named map from parameter path to a trainable Tensor."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, array: np.ndarray) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name: {name}")
        t = Tensor(np.ascontiguousarray(array, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params.items())

    def names(self) -> list[str]:
        return list(self._params)

    def zero_grad(self) -> None:
        for t in self._params.values():
            if t.grad is not None:
                t.grad.fill(0.0)

    def num_params(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self._params.items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint missing parameters: {sorted(missing)[:5]}...")
        for name, t in self._params.items():
            src = arrays[name]
            if tuple(src.shape) != tuple(t.data.shape):
                raise ShapeError(f"parameter {name}: checkpoint shape {src.shape} != {t.data.shape}")
            t.data[...] = src.astype(self.dtype, copy=False)


def numerical_gradient_check(
    build_loss,
    params: ParamStore,
    epsilon: float = 1e-5,
    samples_per_param: int = 4,
    rng: np.random.Generator | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``build_loss`` must rebuild the graph and return the scalar loss Tensor.
    A handful of entries per parameter is probed; the relative error uses
    max(|analytic|, |numeric|, 1e-8) as denominator so unused parameters
    report zero.
    """
    rng = rng or np.random.default_rng(0)
    params.zero_grad()
    loss = build_loss()
    loss.backward()
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in params}

    worst = 0.0
    for name, t in params:
        flat = t.data.reshape(-1)
        n = flat.size
        k = min(samples_per_param, n)
        idx = rng.choice(n, size=k, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + epsilon
            f_plus = float(build_loss().data)
            flat[i] = orig - epsilon
            f_minus = float(build_loss().data)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Checkpoint file format
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT_VERSION = 1
_LEN_STRUCT = struct.Struct("<Q")


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Little-endian f64 payload behind a JSON header of (name, shape, byte offset)."""
    entries = []
    offset = 0
    ordered = sorted(arrays.items())
    for name, arr in ordered:
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "meta": meta or {},
        "tensors": entries,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_LEN_STRUCT.pack(len(blob)))
        f.write(blob)
        for _, arr in ordered:
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        (hlen,) = _LEN_STRUCT.unpack(f.read(_LEN_STRUCT.size))
        header = json.loads(f.read(hlen).decode("utf-8"))
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format version {header.get('format_version')!r}"
            )
        payload = f.read()
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).copy()
    return arrays, header["meta"]
