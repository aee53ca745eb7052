"""Two-expert MoE feed-forward slot with LoRA-adapted experts.

Each token gets softmax gate probabilities over the experts, picks its top-k
experts (ties go to the lower index) and is admitted to an expert's buffer in
sequence order until that expert's capacity ``ceil(cf * L / n_experts)`` is
full. The slot output for a token is the gate-weighted sum of the expert
outputs it was admitted to, using the raw (not renormalized) probabilities.
A token whose every assignment overflowed is passed through unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .nn import LoRAAdapter, Module, PlainFFN, normal_param
from .tensor import Tensor

IMAGE, TEXT, PAD = 0, 1, 2


@dataclass
class RouterConfig:
    top_k: int = 1
    capacity_factor: float = 1.5
    num_experts: int = 2

    def __post_init__(self):
        if self.num_experts != 2:
            raise ValueError("this build supports exactly two experts")
        if not 1 <= self.top_k <= self.num_experts:
            raise ValueError(f"top_k={self.top_k} outside [1, {self.num_experts}]")
        if not self.capacity_factor > 0:
            raise ValueError(f"capacity factor must be positive, got {self.capacity_factor}")

    def capacity(self, n_tokens: int) -> int:
        return math.ceil(self.capacity_factor * n_tokens / self.num_experts)


@dataclass
class DispatchPlan:
    """Routing decisions for one sequence.

    Attributes:
        gates: [L, E] softmax probabilities.
        selected: [L, k] chosen experts per token, most probable first.
        kept: per expert, ascending token indices admitted to it.
        dropped: per expert, ascending token indices that chose it but overflowed.
        capacity: per-expert token budget.
        origins: optional [L] labels (IMAGE or TEXT) used for load statistics.
    """

    gates: np.ndarray
    selected: np.ndarray
    kept: list
    dropped: list
    capacity: int
    origins: np.ndarray | None = None

    @property
    def n_tokens(self) -> int:
        return self.gates.shape[0]

    @property
    def dropped_tokens(self) -> np.ndarray:
        """Tokens with no kept assignment; they bypass the experts."""
        served = np.zeros(self.n_tokens, dtype=bool)
        for idx in self.kept:
            served[idx] = True
        return np.flatnonzero(~served)


def dispatch(gates: np.ndarray, cfg: RouterConfig, origins=None) -> DispatchPlan:
    """Build a :class:`DispatchPlan` from a [L, E] gate matrix."""
    n, e = gates.shape
    # stable sort on -p keeps the lower expert index first on ties
    order = np.argsort(-gates, axis=1, kind="stable")[:, : cfg.top_k]
    cap = cfg.capacity(n)
    kept, dropped = [], []
    for ex in range(e):
        chose = np.flatnonzero((order == ex).any(axis=1))
        kept.append(chose[:cap])
        dropped.append(chose[cap:])
    return DispatchPlan(gates, order, kept, dropped, cap,
                        None if origins is None else np.asarray(origins))


def route(x: Tensor, router_weight: Tensor, cfg: RouterConfig, origins=None) -> DispatchPlan:
    """Gate a [L, C] sequence with ``softmax(x @ W_g.T)`` and dispatch it."""
    if x.ndim != 2 or x.shape[0] < 1:
        raise T.ShapeError(f"route expects [L, C] with L >= 1, got {x.shape}")
    logits = x.data @ router_weight.data.T
    z = logits - logits.max(axis=1, keepdims=True)
    g = np.exp(z)
    g /= g.sum(axis=1, keepdims=True)
    return dispatch(g, cfg, origins)


class Expert(Module):
    """Frozen-able base FFN with a LoRA adapter on each projection."""

    def __init__(self, base: PlainFFN, r: int, alpha: float, rng: np.random.Generator):
        self.base = base
        dim, hidden = base.fc1.n_in, base.fc1.n_out
        self.lora1 = LoRAAdapter(dim, hidden, r, alpha, rng)
        self.lora2 = LoRAAdapter(hidden, dim, r, alpha, rng)

    def __call__(self, x: Tensor, **_) -> Tensor:
        h = T.gelu(T.add(self.base.fc1(x), self.lora1(x)))
        return T.add(self.base.fc2(h), self.lora2(h))


def expert_forward(expert: Expert, x: Tensor) -> Tensor:
    return expert(x)


class Router(Module):
    def __init__(self, dim: int, n_experts: int, rng: np.random.Generator | None = None):
        if rng is None:
            self.weight = Tensor(np.zeros((n_experts, dim)), requires_grad=True)
        else:
            self.weight = normal_param(rng, (n_experts, dim))


class MoELayer(Module):
    """Drop-in replacement for a transformer FFN slot.

    Call with ``x`` of shape [L, C] or [B, L, C]. For batches, ``lengths`` gives
    each sample's valid prefix; positions past it are padding, skip routing and
    pass through. ``origins`` ([B, L] or [L]) labels tokens for statistics.
    The plans of the most recent call are kept in ``last_plans``.
    """

    def __init__(self, experts: list, dim: int, cfg: RouterConfig,
                 rng: np.random.Generator | None = None):
        if len(experts) != cfg.num_experts:
            raise ValueError(f"{len(experts)} experts for a {cfg.num_experts}-expert router")
        self.router = Router(dim, cfg.num_experts, rng)
        self.experts = list(experts)
        self.cfg = cfg
        self.gate_override: np.ndarray | None = None
        self.last_plans: list[DispatchPlan] = []

    def __call__(self, x: Tensor, lengths=None, origins=None, **_) -> Tensor:
        squeeze = x.ndim == 2
        if squeeze:
            x = T.reshape(x, (1,) + x.shape)
        b, n, c = x.shape
        lengths = [n] * b if lengths is None else list(lengths)
        if origins is not None:
            origins = np.asarray(origins).reshape(b, n)
        flat = T.reshape(x, (b * n, c))
        if self.gate_override is None:
            gates = T.softmax(T.matmul(flat, T.transpose(self.router.weight, (1, 0))), axis=-1)
        else:
            g = np.broadcast_to(np.asarray(self.gate_override, dtype=float), (b * n, self.cfg.num_experts))
            gates = Tensor(np.array(g))

        plans = []
        kept = [[] for _ in self.experts]
        bypass = []
        for i in range(b):
            lo, ln = i * n, lengths[i]
            plan = dispatch(gates.data[lo:lo + ln], self.cfg,
                            None if origins is None else origins[i, :ln])
            plans.append(plan)
            for e, idx in enumerate(plan.kept):
                kept[e].append(idx + lo)
            bypass.append(plan.dropped_tokens + lo)
            bypass.append(np.arange(lo + ln, lo + n))
        self.last_plans = plans

        parts = []
        for e, expert in enumerate(self.experts):
            idx = np.concatenate(kept[e]) if kept[e] else np.zeros(0, dtype=np.int64)
            if idx.size == 0:
                continue
            ye = expert(T.take_rows(flat, idx))
            ge = T.reshape(T.getitem(gates, (idx, np.full(idx.size, e))), (idx.size, 1))
            parts.append(T.scatter_rows(T.mul(ye, T.expand(ge, ye.shape)), idx, b * n))
        idx = np.concatenate(bypass)
        if idx.size:
            parts.append(T.scatter_rows(T.take_rows(flat, idx), idx, b * n))
        out = parts[0]
        for p in parts[1:]:
            out = T.add(out, p)
        return T.reshape(out, (n, c) if squeeze else (b, n, c))

    @property
    def router_weight(self) -> Tensor:
        return self.router.weight


def moe_forward(layer: MoELayer, x: Tensor) -> Tensor:
    return layer(x)


def dense_moe_reference(layer: MoELayer, x: np.ndarray) -> np.ndarray:
    """Literal gate-weighted two-expert sum, evaluated densely (no dispatch)."""
    with T.no_grad():
        g = x @ layer.router.weight.data.T
        g = np.exp(g - g.max(axis=-1, keepdims=True))
        g /= g.sum(axis=-1, keepdims=True)
        out = np.zeros_like(x)
        for e, expert in enumerate(layer.experts):
            out += g[..., e:e + 1] * expert(Tensor(x)).data
    return out


@dataclass
class LoadStats:
    """Per-expert token counts aggregated over plans.

    ``*_fraction`` arrays are normalized over experts (each sums to 1 when the
    corresponding count total is non-zero).
    """

    kept: np.ndarray
    dropped: np.ndarray
    image: np.ndarray
    text: np.ndarray
    fraction: np.ndarray = field(init=False)
    image_fraction: np.ndarray = field(init=False)
    text_fraction: np.ndarray = field(init=False)

    def __post_init__(self):
        self.fraction = _normalize(self.kept)
        self.image_fraction = _normalize(self.image)
        self.text_fraction = _normalize(self.text)


def _normalize(v: np.ndarray) -> np.ndarray:
    s = v.sum()
    return v / s if s > 0 else np.zeros(v.shape)


def expert_load_stats(plans: list) -> LoadStats:
    if not plans:
        raise ValueError("expert_load_stats needs at least one plan")
    e = plans[0].gates.shape[1]
    kept = np.zeros(e, dtype=np.int64)
    dropped = np.zeros(e, dtype=np.int64)
    image = np.zeros(e, dtype=np.int64)
    text = np.zeros(e, dtype=np.int64)
    for plan in plans:
        for ex in range(e):
            idx = plan.kept[ex]
            kept[ex] += idx.size
            dropped[ex] += plan.dropped[ex].size
            if plan.origins is not None:
                image[ex] += int(np.sum(plan.origins[idx] == IMAGE))
                text[ex] += int(np.sum(plan.origins[idx] == TEXT))
    return LoadStats(kept, dropped, image, text)
