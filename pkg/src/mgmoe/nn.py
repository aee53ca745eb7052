"""Layers for the toy transformer backbone: linear, norm, embedding, attention, FFN."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_STD = 0.02
EMBED_STD = 0.5


def normal_param(rng: np.random.Generator, shape, std: float = INIT_STD) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def zeros_param(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Minimal parameter container.

    Parameters are the Tensor attributes of a module; child modules and lists of
    modules are walked recursively in attribute order, which keeps parameter
    names (and therefore checkpoints) stable.
    """

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, val in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(val, Tensor):
                yield full, val
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        own = dict(self.named_parameters())
        if strict and set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, v in state.items():
            if k not in own:
                continue
            if own[k].shape != tuple(v.shape):
                raise T.ShapeError(f"{k}: checkpoint shape {v.shape} vs model {own[k].shape}")
            own[k].data = np.array(v, dtype=T.default_dtype())

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = normal_param(rng, (n_out, n_in), 1.0 / np.sqrt(n_in))
        self.bias = zeros_param((n_out,)) if bias else None

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


def linear_forward(layer: Linear, x: Tensor) -> Tensor:
    return layer(x)


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.shift = zeros_param((dim,))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.shift, self.eps)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator):
        self.weight = normal_param(rng, (n, dim), EMBED_STD)

    def __call__(self, ids) -> Tensor:
        return T.take_rows(self.weight, np.asarray(ids, dtype=np.int64))


class LoRAAdapter(Module):
    """Low-rank update ``(alpha / r) * x @ A @ B`` with ``A`` [in, r] and ``B`` [r, out].

    ``B`` starts at zero, so an adapted layer initially reproduces its base.
    """

    def __init__(self, n_in: int, n_out: int, r: int, alpha: float, rng: np.random.Generator):
        if not 1 <= r <= min(n_in, n_out):
            raise ValueError(f"LoRA rank {r} outside [1, {min(n_in, n_out)}]")
        self.A = Tensor(rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, r)), requires_grad=True)
        self.B = zeros_param((r, n_out))
        self.r = r
        self.alpha = float(alpha)

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def __call__(self, x: Tensor) -> Tensor:
        return T.scale(T.matmul(T.matmul(x, self.A), self.B), self.scaling)

    def dense_delta(self) -> np.ndarray:
        """The update as an [out, in] matrix."""
        return self.scaling * (self.A.data @ self.B.data).T


class LoRALinear(Module):
    def __init__(self, base: Linear, r: int, alpha: float, rng: np.random.Generator):
        self.base = base
        self.lora = LoRAAdapter(base.n_in, base.n_out, r, alpha, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add(self.base(x), self.lora(x))

    def dense_weight(self) -> np.ndarray:
        return self.base.weight.data + self.lora.dense_delta()


class PlainFFN(Module):
    """Up-projection, GELU, down-projection: C -> hidden -> C."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int | None = None):
        hidden = hidden or 4 * dim
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, x: Tensor, **_) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


def plain_ffn_forward(ffn: PlainFFN, x: Tensor) -> Tensor:
    return ffn(x)


class MLP2(Module):
    """Two linear layers with GELU in between (used for every projector)."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator):
        self.fc1 = Linear(n_in, n_hidden, rng)
        self.fc2 = Linear(n_hidden, n_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


_MASKS: dict[int, np.ndarray] = {}


def causal_mask(n: int) -> np.ndarray:
    m = _MASKS.get(n)
    if m is None:
        m = np.triu(np.full((n, n), -1e9), k=1)
        _MASKS[n] = m
    return m


class MultiHeadAttention(Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"width {dim} not divisible by {heads} heads")
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def __call__(self, x: Tensor, causal: bool = True) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        b, n, c = x.shape
        h, d = self.heads, c // self.heads
        qkv = T.reshape(self.qkv(x), (b, n, 3, h, d))
        qkv = T.transpose(qkv, (2, 0, 3, 1, 4))  # 3, b, h, n, d
        q = T.reshape(T.getitem(qkv, 0), (b * h, n, d))
        k = T.reshape(T.getitem(qkv, 1), (b * h, n, d))
        v = T.reshape(T.getitem(qkv, 2), (b * h, n, d))
        scores = T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(d))
        if causal:
            mask = np.broadcast_to(causal_mask(n), scores.shape)
            scores = T.add(scores, Tensor(mask))
        att = T.softmax(scores, axis=-1)
        out = T.matmul(att, v)  # b*h, n, d
        out = T.reshape(T.transpose(T.reshape(out, (b, h, n, d)), (0, 2, 1, 3)), (b, n, c))
        out = self.proj(out)
        if squeeze:
            out = T.reshape(out, (n, c))
        return out


def attention_forward(block: "TransformerBlock", x: Tensor, causal: bool = True) -> Tensor:
    return block.attn(x, causal=causal)


class TransformerBlock(Module):
    """Pre-norm block: ``x + attn(ln1(x))`` then ``x + ffn_slot(ln2(x))``.

    ``ffn_slot`` is a :class:`PlainFFN` or an MoE layer; MoE slots receive the
    per-sample routing context through keyword arguments.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, ffn: Module | None = None):
        self.ln1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.ln2 = LayerNorm(dim)
        self.ffn = ffn if ffn is not None else PlainFFN(dim, rng)

    def __call__(self, x: Tensor, causal: bool = True, **route_ctx) -> Tensor:
        x = T.add(x, self.attn(self.ln1(x), causal=causal))
        return T.add(x, self.ffn(self.ln2(x), **route_ctx))
