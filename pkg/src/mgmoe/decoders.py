"""Text head and the grounding path: <seg> hidden state -> T-projector -> mask decoder."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vocab
from .nn import MLP2, LayerNorm, Linear, Module, zeros_param
from .tensor import Tensor


class GroundingError(ValueError):
    """The sequence does not contain exactly one <seg> token."""


def text_logits(head: Linear, hidden: Tensor) -> Tensor:
    return head(hidden)


def seg_position(ids) -> int:
    pos = [i for i, t in enumerate(ids) if t == vocab.SEG]
    if len(pos) != 1:
        raise GroundingError(f"expected exactly one <seg> token, found {len(pos)}")
    return pos[0]


def extract_seg_embedding(hidden_last: Tensor, ids) -> Tensor:
    """Row [C] of ``hidden_last`` ([L, C]) at the single <seg> position.

    ``ids`` is aligned with the rows of ``hidden_last``; non-text rows may
    carry any non-<seg> placeholder.
    """
    if len(ids) != hidden_last.shape[0]:
        raise T.ShapeError(f"{len(ids)} ids for {hidden_last.shape[0]} hidden rows")
    return T.getitem(hidden_last, seg_position(ids))


def t_project(projector: MLP2, h: Tensor) -> Tensor:
    return projector(h)


def bilinear_matrix(n_out: int, n_in: int) -> np.ndarray:
    """[n_out, n_in] 1-D interpolation weights with half-pixel centers and clamped edges."""
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w = src - i0
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), i0] += 1 - w
    m[np.arange(n_out), i1] += w
    return m


@dataclass
class MaskPrediction:
    logits: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.logits > 0


class MaskDecoder(Module):
    """One cross-attention block over pixel features, then mask logits.

    The query (projected <seg> state) attends over the ``N_v`` pixel-feature
    tokens and is refined by a small MLP. Patch-level logits are the affinity
    of each pixel token with the raw query plus with the refined query; they
    are bilinearly upsampled to the image grid. A second, pixel-resolution term
    comes from a per-patch sub-pixel expansion of the pixel features, optionally
    plus an embedding of each raw pixel colour, dotted with a query-conditioned
    vector (hypernetwork-style); it recovers detail inside patches.
    """

    def __init__(self, dim: int, grid: tuple, patch: int, rng: np.random.Generator,
                 fine_dim: int = 8):
        self.grid = tuple(grid)
        self.patch = patch
        self.fine_dim = fine_dim
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.o = Linear(dim, dim, rng)
        self.norm = LayerNorm(dim)
        self.mlp = MLP2(dim, 2 * dim, dim, rng)
        self.affinity = Linear(dim, dim, rng)
        self.logit_bias = zeros_param((1,))
        self.upscale = Linear(dim, patch * patch * fine_dim, rng)
        self.pixel_mlp = MLP2(3, 2 * fine_dim, fine_dim, rng)
        self.hyper = Linear(dim, fine_dim, rng)
        gh, gw = self.grid
        self._up = np.kron(bilinear_matrix(gh * patch, gh), bilinear_matrix(gw * patch, gw)).T

    @property
    def image_shape(self) -> tuple:
        return self.grid[0] * self.patch, self.grid[1] * self.patch

    def _query(self, h: Tensor, vp: Tensor) -> Tensor:
        b, n, c = vp.shape
        q = T.reshape(self.q(h), (b, 1, c))
        k = self.k(vp)
        v = self.v(vp)
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / np.sqrt(c)), axis=-1)
        t = T.add(h, T.reshape(self.o(T.matmul(att, v)), (b, c)))
        return T.add(t, self.mlp(self.norm(t)))

    def patch_logits(self, h: Tensor, vp: Tensor) -> tuple[Tensor, Tensor]:
        """[B, N_v] patch logits and the refined query [B, C]; batched inputs only."""
        b, n, c = vp.shape
        t = self._query(h, vp)
        a = T.add(h, self.affinity(t))
        s = T.matmul(vp, T.reshape(a, (b, c, 1)))
        s = T.scale(T.reshape(s, (b, n)), 1.0 / np.sqrt(c))
        return T.add(s, T.expand(self.logit_bias, (b, n))), t

    def __call__(self, h: Tensor, vp: Tensor, pixels: np.ndarray | None = None) -> Tensor:
        """Mask logits [B, H, W] from queries [B, C] and pixel features [B, N_v, C].

        ``pixels`` ([B, H, W, 3]) adds a per-pixel colour embedding to the
        sub-pixel features.
        """
        if vp.ndim != 3 or h.shape != (vp.shape[0], vp.shape[2]):
            raise T.ShapeError(f"decode_mask: query {h.shape} vs pixel features {vp.shape}")
        gh, gw = self.grid
        if vp.shape[1] != gh * gw:
            raise T.ShapeError(f"decode_mask: {vp.shape[1]} pixel tokens for a {gh}x{gw} grid")
        b, n, c = vp.shape
        p, f = self.patch, self.fine_dim
        coarse, t = self.patch_logits(h, vp)
        up = T.matmul(coarse, Tensor(self._up))  # b, H*W
        sub = T.reshape(self.upscale(vp), (b, gh, gw, p, p, f))
        sub = T.reshape(T.transpose(sub, (0, 1, 3, 2, 4, 5)), (b, gh * p * gw * p, f))
        if pixels is not None:
            rgb = Tensor(np.asarray(pixels).reshape(b, gh * p * gw * p, 3))
            sub = T.add(sub, self.pixel_mlp(rgb))
        fine = T.matmul(sub, T.reshape(self.hyper(t), (b, f, 1)))
        logits = T.add(up, T.reshape(fine, (b, gh * p * gw * p)))
        return T.reshape(logits, (b, gh * p, gw * p))


def decode_mask(decoder: MaskDecoder, h_ground: Tensor, vp: Tensor,
                pixels: np.ndarray | None = None) -> MaskPrediction:
    """Single-sample convenience wrapper: ``h_ground`` [C_p], ``vp`` [N_v, C_p], ``pixels`` [H, W, 3]."""
    logits = decoder(T.reshape(h_ground, (1, -1)), T.reshape(vp, (1,) + vp.shape),
                     None if pixels is None else np.asarray(pixels)[None])
    return MaskPrediction(logits.data[0])
