"""
Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable function builds a node that remembers its parents and a
closure mapping the output gradient to parent gradients. ``backward`` walks the
graph in reverse topological order, accumulates ``grad`` on every reachable
tensor that requires it, then drops the graph so intermediate buffers can be
freed.

Storage is a NumPy array; NumPy is used purely as a dense kernel library and
all derivative rules live here.
"""

from __future__ import annotations

import contextlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, FormatError, TargetIndexError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data).copy() if not isinstance(data, np.ndarray) else data.astype(np.float64, copy=False)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_lift(other)))

    def __rsub__(self, other):
        return add(_lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _lift(other)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_lift(other), power(self, -1.0))

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int):
        axes = list(range(self.ndim))
        axes[a], axes[b] = axes[b], axes[a]
        return transpose(self, tuple(axes))

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return texp(self)

    def log(self):
        return tlog(self)

    def tanh(self):
        return ttanh(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _node(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    parents = tuple(parents)
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after NumPy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data + b.data

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    out = a.data * b.data

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent

    def bw(g):
        return (g * exponent * a.data ** (exponent - 1.0),)

    return _node(out, (a,), bw)


def texp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def tlog(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def ttanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x * x * x)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _node(out, (a,), bw)


# -- reductions and shape ---------------------------------------------------

def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), bw)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[ax] for ax in axes]))
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return _node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else tuple(np.argsort(axes))

    def bw(g):
        return (np.transpose(g, inv),)

    return _node(out, (a,), bw)


def _is_basic_index(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(isinstance(p, (slice, int, np.integer)) or p is Ellipsis or p is None for p in parts)


def take(a: Tensor, index) -> Tensor:
    out = a.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g  # basic indexing never repeats an element
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(out), (a,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_lift(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tensors, bw)


# -- linear algebra -----------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product with NumPy batching semantics over leading axes."""
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), bw)


def patch_project(img: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Non-overlapping p x p patch tiling followed by a shared linear map.

    ``img`` is [C, H, W] (or [B, C, H, W]); ``weight`` is [D, C, p, p].
    Tokens come out in raster order of patches: [(H/p)*(W/p), D].
    """
    img = _lift(img)
    batched = img.ndim == 4
    x = img.data if batched else img.data[None]
    B, C, H, W = x.shape
    D, Cw, p, p2 = weight.shape
    if p != p2 or Cw != C:
        raise DimensionError(f"patch weight {weight.shape} incompatible with image {img.shape}")
    if H % p or W % p:
        from .errors import ConfigurationError

        raise ConfigurationError(f"image {H}x{W} not divisible by patch size {p}")
    gh, gw = H // p, W // p
    patches = x.reshape(B, C, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5).reshape(B, gh * gw, C * p * p)
    wflat = weight.data.reshape(D, C * p * p)
    out = patches @ wflat.T + bias.data
    if not batched:
        out = out[0]

    def bw(g):
        g3 = g if batched else g[None]
        gw_ = np.einsum("btd,btk->dk", g3, patches).reshape(weight.shape)
        gb = g3.sum(axis=(0, 1))
        gp = g3 @ wflat
        gx = gp.reshape(B, gh, gw, C, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(B, C, H, W)
        if not batched:
            gx = gx[0]
        return gx, gw_, gb

    return _node(out, (img, weight, bias), bw)


def embedding(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _node(out, (table,), bw)


# -- normalisation and probabilities --------------------------------------

def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def bw(g):
        dxhat = g * gamma.data
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, _unbroadcast(g * xhat, gamma.shape), _unbroadcast(g, beta.shape)

    return _node(out, (x, gamma, beta), bw)


def _softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    y = _softmax_np(x.data, axis)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _node(y, (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    y = np.exp(out)

    def bw(g):
        return (g - y * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), bw)


def softmax_cross_entropy(logits: Tensor, targets, weights=None) -> Tensor:
    """Mean of -log softmax(logits)[i, targets[i]] over rows.

    With ``weights`` the mean is weighted: sum(w * nll) / sum(w). Rows with zero
    weight still need an in-range target.
    """
    if logits.ndim != 2:
        raise DimensionError(f"logits must be [N, K], got {logits.shape}")
    N, K = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != N:
        raise DimensionError(f"{N} logit rows but {targets.shape[0]} targets")
    bad = (targets < 0) | (targets >= K)
    if bad.any():
        raise TargetIndexError(f"target {int(targets[bad][0])} outside [0, {K})")
    w = np.ones(N) if weights is None else np.asarray(weights, dtype=np.float64).reshape(-1)
    wsum = w.sum()
    if wsum <= 0:
        raise ContractError("cross-entropy needs at least one weighted row")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    nll = lse - z[np.arange(N), targets]
    loss = float((w * nll).sum() / wsum)
    probs = np.exp(z - lse[:, None])

    def bw(g):
        d = probs.copy()
        d[np.arange(N), targets] -= 1.0
        return (d * (w / wsum)[:, None] * g,)

    return _node(np.asarray(loss), (logits,), bw)


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = (tsum(x * x, axis=axis, keepdims=True) + eps * eps) ** 0.5
    return x / norm


# -- backward -----------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every reachable tensor."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in order:
        node._parents = ()
        node._backward = None


# -- parameters, optimisation, checkpoints -----------------------------------

def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones_param(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


@dataclass
class ParamGroup:
    name: str
    tensors: list[Tensor] = field(default_factory=list)
    frozen: bool = False

    def numel(self) -> int:
        return sum(t.size for t in self.tensors)

    def tobytes(self) -> bytes:
        return b"".join(t.data.tobytes() for t in self.tensors)


def sgd_step(groups: Sequence[ParamGroup], lr: float) -> None:
    """theta <- theta - lr * grad on unfrozen groups; then clear every grad."""
    for group in groups:
        for t in group.tensors:
            if not group.frozen and t.grad is not None:
                t.data -= lr * t.grad
            t.grad = None


def clip_grad_norm(groups: Sequence[ParamGroup], max_norm: float) -> float:
    total = 0.0
    for group in groups:
        if group.frozen:
            continue
        for t in group.tensors:
            if t.grad is not None:
                total += float((t.grad * t.grad).sum())
    norm = float(np.sqrt(total))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for group in groups:
            for t in group.tensors:
                if t.grad is not None:
                    t.grad = t.grad * scale
    return norm


MAGIC = b"DSCK"
CHECKPOINT_VERSION = 1


def encode_checkpoint(groups: Sequence[ParamGroup]) -> bytes:
    parts = [MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for group in groups:
        name = group.name.encode("utf-8")
        parts.append(struct.pack("<I", len(name)))
        parts.append(name)
        parts.append(struct.pack("<BI", 1 if group.frozen else 0, len(group.tensors)))
        for t in group.tensors:
            parts.append(struct.pack("<I", t.ndim))
            parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
            parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes, path: str | Path = "<bytes>") -> list[ParamGroup]:
    pos = 0

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(buf):
            raise FormatError(path, pos, "truncated checkpoint")
        vals = struct.unpack_from(fmt, buf, pos)
        pos += size
        return vals

    if buf[:4] != MAGIC:
        raise FormatError(path, 0, "bad magic, expected DSCK")
    pos = 4
    (version,) = read("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(path, 4, f"unsupported checkpoint version {version}")
    groups: list[ParamGroup] = []
    while pos < len(buf):
        (nlen,) = read("<I")
        if pos + nlen > len(buf):
            raise FormatError(path, pos, "truncated group name")
        try:
            name = buf[pos:pos + nlen].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(path, pos, "group name is not UTF-8") from exc
        pos += nlen
        frozen, count = read("<BI")
        tensors = []
        for _ in range(count):
            (rank,) = read("<I")
            shape = read(f"<{rank}Q") if rank else ()
            n = int(np.prod(shape)) if rank else 1
            nbytes = 8 * n
            if pos + nbytes > len(buf):
                raise FormatError(path, pos, "truncated tensor data")
            data = np.frombuffer(buf, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
            pos += nbytes
            tensors.append(Tensor(data, requires_grad=True))
        groups.append(ParamGroup(name, tensors, bool(frozen)))
    return groups


def save_checkpoint(path: str | Path, groups: Sequence[ParamGroup]) -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(path, encode_checkpoint(groups))


def load_checkpoint(path: str | Path) -> list[ParamGroup]:
    return decode_checkpoint(Path(path).read_bytes(), path)


# -- gradient checking ----------------------------------------------------------

def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-6, indices=None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    idx = range(flat.size) if indices is None else indices
    for i in idx:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitude."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)
