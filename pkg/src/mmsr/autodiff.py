"""Minimal dense-tensor reverse-mode autodiff on float64 numpy arrays.

Tensors form a DAG through parent references; ``backward`` walks the graph in
reverse topological order, accumulating gradients additively.  Every forward
op validates finiteness immediately (no silent NaN), all math is double
precision, and single-threaded runs are bit-reproducible.  Also home to the
Adam optimizer and the deterministic named-tensor checkpoint format.
"""

from __future__ import annotations

import json
import math
import struct
from contextlib import contextmanager

import numpy as np

from .errors import CheckpointError, NonFiniteValue, NotScalar, ShapeMismatch

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation/inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(data: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(data).all():
        raise NonFiniteValue(f"non-finite values produced by {op}")
    return data


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the parent's shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tensor:
    """A float64 array plus the backward closure that built it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_grad_owned")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, _op="leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents if _GRAD_ENABLED else ()
        self._backward = _backward if _GRAD_ENABLED else None
        self._op = _op
        self._grad_owned = False

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        """A view of the same values cut loose from the graph (no gradient flow)."""
        return Tensor(self.data, requires_grad=False)

    # --- graph construction -------------------------------------------------

    @staticmethod
    def _make(data: np.ndarray, parents: tuple, backward, op: str) -> "Tensor":
        req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out = Tensor(_check_finite(data, op), requires_grad=req,
                     _parents=parents if req else (), _backward=backward if req else None,
                     _op=op)
        return out

    def _accum(self, g: np.ndarray) -> None:
        # Borrow the first contribution without copying: reverse-topological
        # order guarantees an upstream grad array is final once its node's
        # backward has run, so aliasing it is safe.  In-place updates happen
        # only on buffers allocated here (second contribution onward).
        if self.grad is None:
            self.grad = g
            self._grad_owned = False
        elif self._grad_owned:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._grad_owned = True

    def backward(self) -> None:
        """Reverse sweep from a scalar; populates .grad on requires_grad tensors."""
        if self.data.shape != ():
            raise NotScalar(f"backward needs a scalar loss, got shape {self.shape}")
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
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        self._grad_owned = True
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # --- elementwise / arithmetic -------------------------------------------

    def __add__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            other = Tensor(other)
        a, b = self, other
        out_data = a.data + b.data

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g, b.shape))

        return Tensor._make(out_data, (a, b), bw, "add")

    def __sub__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            other = Tensor(other)
        a, b = self, other
        out_data = a.data - b.data

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g, b.shape))

        return Tensor._make(out_data, (a, b), bw, "sub")

    def __mul__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            return self.scale(float(other))
        a, b = self, other
        out_data = a.data * b.data

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g * b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(g * a.data, b.shape))

        return Tensor._make(out_data, (a, b), bw, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if not isinstance(other, Tensor):
            return self.scale(1.0 / float(other))
        a, b = self, other
        out_data = a.data / b.data

        def bw(g):
            if a.requires_grad:
                a._accum(_unbroadcast(g / b.data, a.shape))
            if b.requires_grad:
                b._accum(_unbroadcast(-g * out_data / b.data, b.shape))

        return Tensor._make(out_data, (a, b), bw, "div")

    def __neg__(self) -> "Tensor":
        return self.scale(-1.0)

    def scale(self, c: float) -> "Tensor":
        a = self
        out_data = a.data * c

        def bw(g):
            a._accum(g * c)

        return Tensor._make(out_data, (a,), bw, "scale")

    # --- linear algebra -------------------------------------------------------

    def matmul(self, other: "Tensor") -> "Tensor":
        a, b = self, other
        out_data = np.matmul(a.data, b.data)

        def bw(g):
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                a._accum(_unbroadcast(ga, a.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                b._accum(_unbroadcast(gb, b.shape))

        return Tensor._make(out_data, (a, b), bw, "matmul")

    __matmul__ = matmul

    def transpose(self, axes=None) -> "Tensor":
        a = self
        axes = tuple(axes) if axes is not None else tuple(range(a.ndim))[::-1]
        inv = tuple(np.argsort(axes))
        out_data = np.transpose(a.data, axes)

        def bw(g):
            a._accum(np.transpose(g, inv))

        return Tensor._make(out_data, (a,), bw, "transpose")

    def reshape(self, *shape) -> "Tensor":
        a = self
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = a.data.reshape(shape)

        def bw(g):
            a._accum(g.reshape(a.shape))

        return Tensor._make(out_data, (a,), bw, "reshape")

    def __getitem__(self, key) -> "Tensor":
        a = self
        out_data = a.data[key]

        def bw(g):
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a._accum(full)

        return Tensor._make(np.array(out_data, copy=True), (a,), bw, "slice")

    # --- reductions -----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def bw(g):
            if axis is None:
                a._accum(np.broadcast_to(g, a.shape).copy() if np.ndim(g) else np.full(a.shape, g))
                return
            gg = g if keepdims else np.expand_dims(g, axis)
            a._accum(np.broadcast_to(gg, a.shape).copy())

        return Tensor._make(out_data, (a,), bw, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else np.prod(
            [self.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
        )
        return self.sum(axis=axis, keepdims=keepdims).scale(1.0 / float(count))


def parameter(data, requires_grad: bool = True) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64, copy=True), requires_grad=requires_grad)


# --- neural-net ops ------------------------------------------------------------


def softmax(t: Tensor, axis: int = -1) -> Tensor:
    x = t.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        inner = (g * s).sum(axis=axis, keepdims=True)
        t._accum(s * (g - inner))

    return Tensor._make(s, (t,), bw, "softmax")


def log_softmax(t: Tensor, axis: int = -1) -> Tensor:
    x = t.data
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    sm = np.exp(out)

    def bw(g):
        t._accum(g - sm * g.sum(axis=axis, keepdims=True))

    return Tensor._make(out, (t,), bw, "log_softmax")


def layer_norm(t: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance (no affine)."""
    x = t.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    r = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * r

    def bw(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        t._accum(r * (g - gm - xhat * gx))

    return Tensor._make(xhat, (t,), bw, "layer_norm")


_GELU_K = np.sqrt(2.0 / np.pi)
_GELU_C = 0.044715


def gelu(t: Tensor) -> Tensor:
    """Gaussian error linear unit (tanh form): 0.5x(1 + tanh(k(x + cx^3)))."""
    x = t.data
    x2 = x * x
    th = np.tanh(_GELU_K * x * (1.0 + _GELU_C * x2))
    out = 0.5 * x * (1.0 + th)

    def bw(g):
        du = _GELU_K * (1.0 + 3.0 * _GELU_C * x2)
        t._accum(g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du))

    return Tensor._make(out, (t,), bw, "gelu")


def embed(table: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup: out[..., :] = table[ids[...], :]."""
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise ShapeMismatch("embedding ids must be integers")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeMismatch("embedding id out of range")
    out_data = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        table._accum(full)

    return Tensor._make(out_data, (table,), bw, "embed")


def dropout(t: Tensor, p: float, train: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout: identity when train is off, scales kept units by 1/(1-p)."""
    if not train or p == 0.0:
        return t
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout probability must lie in [0, 1)")
    if rng is None:
        raise ValueError("training-mode dropout needs an explicit rng")
    mask = (rng.random(t.shape) >= p) / (1.0 - p)

    def bw(g):
        t._accum(g * mask)

    return Tensor._make(t.data * mask, (t,), bw, "dropout")


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(tensors)
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                p._accum(g[tuple(idx)])

    return Tensor._make(out_data, parts, bw, "concat")


def l2_normalize(t: Tensor, axis: int = -1, eps: float = 1e-20) -> Tensor:
    x = t.data
    s = (x * x).sum(axis=axis, keepdims=True)
    r = 1.0 / np.sqrt(s + eps)
    out = x * r

    def bw(g):
        dot = (g * x).sum(axis=axis, keepdims=True)
        t._accum(r * g - (r ** 3) * x * dot)

    return Tensor._make(out, (t,), bw, "l2_normalize")


def backward(loss: Tensor, params: list[Tensor] | None = None) -> list[Tensor]:
    """Run the reverse sweep; returns params left unreachable (grad zero-filled)."""
    loss.backward()
    unreachable: list[Tensor] = []
    for p in params or ():
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
            unreachable.append(p)
    return unreachable


def zero_grads(params) -> None:
    for p in params:
        p.grad = None


def clip_grad_norm(params: dict, max_norm: float, skip: set | None = None) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm.

    Returns the pre-clip norm.  Parameters named in skip (and those with no
    gradient) are ignored entirely — they neither contribute to the norm nor
    get scaled.
    """
    if max_norm <= 0:
        raise ValueError("max_norm must be > 0")
    sq = 0.0
    grads = []
    for k, p in params.items():
        if (skip and k in skip) or p.grad is None:
            continue
        grads.append(p.grad)
        sq += float(np.sum(p.grad * p.grad))
    norm = math.sqrt(sq)
    if norm > max_norm:
        scale = max_norm / norm
        for g in grads:
            g *= scale
    return norm


# --- optimizer -------------------------------------------------------------


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              t: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, in place on (param, m, v).  t is 1-based."""
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise ShapeMismatch("adam_step operands must share one shape")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    param -= lr * mhat / (np.sqrt(vhat) + eps)


class Adam:
    """Adam over a named parameter dict; the caller drives the lr schedule."""

    def __init__(self, params: dict[str, Tensor], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float | None = None, skip: set[str] | None = None) -> None:
        self.t += 1
        lr = self.lr if lr is None else lr
        for k, p in self.params.items():
            if skip and k in skip:
                continue
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            adam_step(p.data, grad, self.m[k], self.v[k], self.t, lr,
                      self.beta1, self.beta2, self.eps)

    def zero_grad(self) -> None:
        zero_grads(self.params.values())


# --- checkpoint format -------------------------------------------------------

_CKPT_MAGIC = b"MMCK1"


def save_checkpoint(path: str, tensors: dict[str, np.ndarray], step: int,
                    extra: dict | None = None) -> None:
    """Write a named-tensor archive: magic, JSON manifest, then f64 payloads.

    Payloads follow manifest order (sorted by name) so identical contents
    give identical bytes.
    """
    names = sorted(tensors)
    manifest = {
        "step": int(step),
        "extra": extra or {},
        "tensors": [[name, list(np.asarray(tensors[name]).shape)] for name in names],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in names:
            arr = np.ascontiguousarray(tensors[name], dtype="<f8")
            fh.write(arr.tobytes())


def load_checkpoint(path: str) -> tuple[dict, dict[str, np.ndarray]]:
    """Read a checkpoint archive; returns (manifest, name -> array)."""
    with open(path, "rb") as fh:
        if fh.read(len(_CKPT_MAGIC)) != _CKPT_MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        raw = fh.read(4)
        if len(raw) < 4:
            raise CheckpointError("truncated manifest length")
        (mlen,) = struct.unpack("<I", raw)
        try:
            manifest = json.loads(fh.read(mlen).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"unreadable manifest: {exc}") from exc
        tensors: dict[str, np.ndarray] = {}
        for name, shape in manifest["tensors"]:
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise CheckpointError(f"truncated payload for tensor {name!r}")
            tensors[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
        if fh.read(1):
            raise CheckpointError("trailing bytes after final tensor")
    return manifest, tensors
