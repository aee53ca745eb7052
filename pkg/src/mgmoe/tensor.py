"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable op records a :class:`Node` holding its parents and a
closure that maps the output gradient to parent gradients. Node indices come
from a per-thread counter, so sorting reachable nodes by index gives a valid
reverse topological order without an explicit graph pass.

Binary elementwise ops require identical shapes. Use :func:`expand` when a
broadcast is really intended.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

_DTYPE = np.float64
_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""


class ContractError(RuntimeError):
    """An op was called outside its documented preconditions."""


def set_default_dtype(dtype) -> None:
    global _DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}")
    _DTYPE = dtype.type


def default_dtype():
    return _DTYPE


@contextlib.contextmanager
def dtype_scope(dtype):
    """Temporarily switch the default dtype."""
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


def _counter():
    c = getattr(_local, "counter", None)
    if c is None:
        c = _local.counter = itertools.count()
    return c


def grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class Node:
    __slots__ = ("index", "op", "parents", "backward_fn", "consumed")

    def __init__(self, op: str, parents: tuple, backward_fn: Callable):
        self.index = next(_counter())
        self.op = op
        self.parents = parents
        self.backward_fn = backward_fn
        self.consumed = False

    def __repr__(self):
        return f"Node({self.index}, {self.op})"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != _DTYPE:
            arr = arr.astype(_DTYPE)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.node = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor) -> bool:
    return t.requires_grad or t.node is not None


def make_op(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Wrap ``data`` as the output of ``op``.

    ``backward_fn(grad)`` must return one gradient (or None) per parent.
    Nothing is recorded when grad mode is off or no parent is tracked.
    """
    out = Tensor.__new__(Tensor)
    out.data = data if data.dtype == _DTYPE else data.astype(_DTYPE)
    out.grad = None
    out.name = None
    out.node = None
    out.requires_grad = False
    if grad_enabled() and any(_tracked(p) for p in parents):
        out.node = Node(op, tuple(parents), backward_fn)
        out.requires_grad = True
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ (no implicit broadcasting)")


# ---------------------------------------------------------------------------
# Linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product.

    Supports ``[..., m, k] @ [k, n]`` (a shared right operand applied along the
    trailing axis) and ``[..., m, k] @ [..., k, n]`` with identical leading
    extents.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions disagree for {a.shape} and {b.shape}")
    if b.ndim == 2:
        k = a.shape[-1]
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[1],))

        def backward(g):
            g2 = g.reshape(-1, b.shape[1])
            ga = (g2 @ b.data.T).reshape(a.shape) if _tracked(a) else None
            gb = a2.T @ g2 if _tracked(b) else None
            return ga, gb

        return make_op("matmul", out, (a, b), backward)
    if a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions disagree for {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if _tracked(a) else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if _tracked(b) else None
        return ga, gb

    return make_op("bmm", out, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` along the trailing axis; ``weight`` is [out, in]."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    n_out = weight.shape[0]
    if bias is not None and bias.shape != (n_out,):
        raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
    x2 = x.data.reshape(-1, weight.shape[1])
    out = x2 @ weight.data.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(x.shape[:-1] + (n_out,))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = g.reshape(-1, n_out)
        gx = (g2 @ weight.data).reshape(x.shape) if _tracked(x) else None
        gw = g2.T @ x2 if _tracked(weight) else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return make_op("linear", out, parents, backward)


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return make_op("add", a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return make_op("sub", a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    return make_op("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(x: Tensor, c: float) -> Tensor:
    return make_op("scale", x.data * c, (x,), lambda g: (g * c,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return make_op("exp", y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return make_op("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return make_op("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return make_op("relu", np.where(m, x.data, 0.0), (x,), lambda g: (g * m,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return make_op("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    z = x.data
    inner = _GELU_C * (z + 0.044715 * z * z * z)
    t = np.tanh(inner)
    y = 0.5 * z * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * z * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * z * z)
        return (g * d,)

    return make_op("gelu", y, (x,), backward)


_UNARY = {"gelu": gelu, "sigmoid": sigmoid, "relu": relu, "tanh": tanh, "exp": exp, "log": log}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(x: Tensor, fn: str, other: Tensor | float | None = None) -> Tensor:
    """Dispatch a pointwise op by name (gelu, sigmoid, relu, add, mul, scale, ...)."""
    if fn in _UNARY:
        return _UNARY[fn](x)
    if fn in _BINARY:
        if not isinstance(other, Tensor):
            raise ContractError(f"{fn} needs a tensor operand")
        return _BINARY[fn](x, other)
    if fn == "scale":
        return scale(x, float(other))
    raise ValueError(f"unknown elementwise op {fn!r}")


# ---------------------------------------------------------------------------
# Reductions and normalizers
# ---------------------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return None
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ContractError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    y = np.sum(x.data, axis=axes, keepdims=keepdims)

    def backward(g):
        if axes is not None and not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op("sum", np.asarray(y), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = x.size if axes is None else int(np.prod([x.shape[a] for a in axes]))
    return scale(tsum(x, axis, keepdims), 1.0 / n)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=ax, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=ax, keepdims=True)),)

    return make_op("softmax", y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    (ax,) = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=ax, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=ax, keepdims=True))
    y = z - lse

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=ax, keepdims=True),)

    return make_op("log_softmax", y, (x,), backward)


def layer_norm(x: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the trailing axis to zero mean and unit variance, then scale and shift."""
    c = x.shape[-1]
    if gain.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/shift {shift.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + shift.data

    def backward(g):
        gx = None
        if _tracked(x):
            gh = g * gain.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        red = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=red), g.sum(axis=red)

    return make_op("layer_norm", y, (x, gain, shift), backward)


# ---------------------------------------------------------------------------
# Shape manipulation and indexing
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    y = x.data.reshape(shape)
    return make_op("reshape", y, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    y = np.ascontiguousarray(np.transpose(x.data, axes))
    return make_op("transpose", y, (x,), lambda g: (np.transpose(g, inv),))


def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast to ``shape``; the gradient is summed back."""
    shape = tuple(shape)
    try:
        y = np.ascontiguousarray(np.broadcast_to(x.data, shape))
    except ValueError:
        raise ShapeError(f"expand: cannot broadcast {x.shape} to {shape}") from None
    lead = len(shape) - x.ndim

    def backward(g):
        g = g.sum(axis=tuple(range(lead))) if lead else g
        keep = tuple(i for i, n in enumerate(x.shape) if n == 1 and g.shape[i] != 1)
        if keep:
            g = g.sum(axis=keep, keepdims=True)
        return (g,)

    return make_op("expand", y, (x,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ContractError("concat of an empty sequence")
    ax = axis % tensors[0].ndim
    y = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def backward(g):
        sl = [slice(None)] * g.ndim
        out = []
        for i in range(len(tensors)):
            sl[ax] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(sl)])
        return tuple(out)

    return make_op("concat", y, tuple(tensors), backward)


def take_rows(x: Tensor, index) -> Tensor:
    """Gather ``x[index]`` along axis 0; repeated indices accumulate in backward."""
    idx = np.asarray(index, dtype=np.int64)
    y = x.data[idx]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return make_op("take_rows", y, (x,), backward)


def scatter_rows(src: Tensor, index, n_rows: int) -> Tensor:
    """Inverse of :func:`take_rows`: a zero tensor of ``n_rows`` rows with ``src`` added at ``index``."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.shape[0] != src.shape[0]:
        raise ShapeError(f"scatter_rows: {idx.shape[0]} indices for {src.shape[0]} rows")
    y = np.zeros((n_rows,) + src.shape[1:], dtype=src.data.dtype)
    np.add.at(y, idx, src.data)
    return make_op("scatter_rows", y, (src,), lambda g: (g[idx],))


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is Ellipsis for k in parts)


def getitem(x: Tensor, key) -> Tensor:
    y = x.data[key]
    basic = _is_basic(key)

    def backward(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[key] = g
        else:
            np.add.at(gx, key, g)
        return (gx,)

    return make_op("getitem", np.array(y), (x,), backward)


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------

class Tape:
    """Ordered record of the nodes a scalar depends on.

    Built on demand from a loss tensor: nodes are sorted by creation index,
    which is a topological order because a node is always created after its
    inputs.
    """

    def __init__(self, root: Tensor):
        if root.node is None:
            raise ContractError("loss is not on a tape (no recorded ops)")
        seen = {}
        stack = [root.node]
        while stack:
            node = stack.pop()
            if node.index in seen:
                continue
            seen[node.index] = node
            for p in node.parents:
                if p.node is not None and p.node.index not in seen:
                    stack.append(p.node)
        self.nodes = [seen[i] for i in sorted(seen)]
        self.root = root

    def __len__(self):
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        out, ids = [], set()
        for node in self.nodes:
            for p in node.parents:
                if p.node is None and p.requires_grad and id(p) not in ids:
                    ids.add(id(p))
                    out.append(p)
        return out


def backward(loss: Tensor, leaves: Iterable[Tensor] | None = None) -> dict:
    """Propagate d(loss) to every tracked leaf; return ``{leaf: grad}``.

    Gradients are accumulated into ``leaf.grad``. Leaves passed in ``leaves``
    that the loss does not depend on get a zero gradient. The tape is consumed:
    a second call on the same graph raises :class:`ContractError`.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = Tape(loss)
    if tape.root.node.consumed:
        raise ContractError("tape already consumed; run a fresh forward pass")
    acc = {loss.node.index: np.ones_like(loss.data)}
    leaf_acc: dict[int, np.ndarray] = {}
    leaf_obj: dict[int, Tensor] = {}
    for node in reversed(tape.nodes):
        g = acc.pop(node.index, None)
        if g is None:
            continue
        grads = node.backward_fn(g)
        for p, gp in zip(node.parents, grads):
            if gp is None or not _tracked(p):
                continue
            if p.node is not None:
                key = p.node.index
                acc[key] = acc[key] + gp if key in acc else gp
            else:
                k = id(p)
                leaf_obj[k] = p
                leaf_acc[k] = leaf_acc[k] + gp if k in leaf_acc else gp
    for node in tape.nodes:
        node.consumed = True
        node.backward_fn = _consumed
    result = {}
    for k, g in leaf_acc.items():
        leaf = leaf_obj[k]
        g = np.asarray(g, dtype=leaf.data.dtype).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        result[leaf] = g
    for leaf in leaves or ():
        if leaf.requires_grad and id(leaf) not in leaf_acc:
            if leaf.grad is None:
                leaf.grad = np.zeros_like(leaf.data)
            result[leaf] = np.zeros_like(leaf.data)
    return result


def _consumed(g):
    raise ContractError("tape already consumed; run a fresh forward pass")


# ---------------------------------------------------------------------------
# Finite-difference checking
# ---------------------------------------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-6, coords=None) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. entries of ``x`` (in place perturbation).

    Only ``coords`` (flat indices) are evaluated when given; other entries are NaN.
    """
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    idx = range(flat.size) if coords is None else coords
    with no_grad():
        for i in idx:
            old = flat[i]
            flat[i] = old + eps
            fp = fn().item()
            flat[i] = old - eps
            fm = fn().item()
            flat[i] = old
            out[i] = (fp - fm) / (2 * eps)
    return out.reshape(x.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation over checked entries, scaled by the gradient's max magnitude.

    Unchecked entries of ``numeric`` are NaN and ignored.
    """
    m = ~np.isnan(numeric)
    if not m.any():
        return 0.0
    a, n = analytic[m], numeric[m]
    denom = max(np.abs(analytic).max(), np.abs(n).max(), 1e-12)
    return float(np.abs(a - n).max() / denom)


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor], eps: float = 1e-6,
              max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Compare autodiff and central-difference gradients; return the worst relative error.

    With ``max_coords`` set, each input is spot-checked at that many random entries.
    """
    for t in inputs:
        t.grad = None
    backward(fn(), leaves=inputs)
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t in inputs:
        coords = None
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)
        num = numerical_grad(fn, t, eps, coords)
        worst = max(worst, relative_error(t.grad, num))
    return worst
