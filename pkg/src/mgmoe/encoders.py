"""Image, region-prompt and text encoders feeding the unified token sequence.

Layout of the assembled sequence: ``N_v`` projected image tokens (row-major
patch order) followed by the text embeddings, with the single visual-prompt
token spliced in directly after ``<region>`` when a region prompt is present.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from . import vocab
from .moe import IMAGE, TEXT
from .nn import EMBED_STD, MLP2, Embedding, LayerNorm, Linear, Module, TransformerBlock, normal_param
from .tensor import Tensor


class InputError(ValueError):
    """Malformed image, region prompt or token sequence."""


def check_image(pixels: np.ndarray, patch: int) -> None:
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise InputError(f"image must be H x W x 3, got {pixels.shape}")
    h, w, _ = pixels.shape
    if h <= 0 or w <= 0 or h % patch or w % patch:
        raise InputError(f"image {h}x{w} not divisible by patch size {patch}")


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """[H, W, 3] (or [B, H, W, 3]) -> [N_v, P*P*3] rows in row-major patch order."""
    batched = pixels.ndim == 4
    imgs = pixels if batched else pixels[None]
    for img in imgs[:1]:
        check_image(img, patch)
    b, h, w, c = imgs.shape
    gh, gw = h // patch, w // patch
    x = imgs.reshape(b, gh, patch, gw, patch, c).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, gh * gw, patch * patch * c)
    return x if batched else x[0]


def n_vision_tokens(h: int, w: int, patch: int) -> int:
    return (h // patch) * (w // patch)


class VisionTower(Module):
    """Patchify + linear embedding; the toy stand-in for a pretrained visual encoder."""

    def __init__(self, patch: int, dim: int, rng: np.random.Generator):
        self.patch = patch
        self.patch_embed = Linear(3 * patch * patch, dim, rng)

    def __call__(self, pixels: np.ndarray) -> Tensor:
        return self.patch_embed(Tensor(patchify(pixels, self.patch)))


def patch_embed(tower: VisionTower, pixels: np.ndarray) -> Tensor:
    return tower(pixels)


def vision_project(projector: MLP2, v: Tensor) -> Tensor:
    return projector(v)


class PixelEncoder(Module):
    """Patchify, embed, add learned positions, one bidirectional transformer block."""

    def __init__(self, patch: int, n_tokens: int, dim: int, heads: int, rng: np.random.Generator):
        self.patch = patch
        self.embed = Linear(3 * patch * patch, dim, rng)
        self.pos = normal_param(rng, (n_tokens, dim), EMBED_STD)
        self.block = TransformerBlock(dim, heads, rng)
        self.norm = LayerNorm(dim)

    def __call__(self, pixels: np.ndarray) -> Tensor:
        x = self.embed(Tensor(patchify(pixels, self.patch)))
        x = T.add(x, T.expand(self.pos, x.shape))
        return self.norm(self.block(x, causal=False))


def pixel_encode(encoder: PixelEncoder, pixels: np.ndarray) -> Tensor:
    return encoder(pixels)


# ---------------------------------------------------------------------------
# Region prompts
# ---------------------------------------------------------------------------

@dataclass
class RegionPrompt:
    """A point, box or free-form region, canonicalized to a binary mask."""

    kind: str
    mask: np.ndarray

    def __post_init__(self):
        if self.kind not in ("point", "box", "mask"):
            raise InputError(f"unknown region kind {self.kind!r}")
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise InputError("region mask is empty")

    @classmethod
    def point(cls, y: int, x: int, shape: tuple, patch: int) -> "RegionPrompt":
        """A point selects the whole patch that contains it."""
        h, w = shape
        if not (0 <= y < h and 0 <= x < w):
            raise InputError(f"point ({y}, {x}) outside {h}x{w} image")
        m = np.zeros((h, w), dtype=bool)
        py, px = (y // patch) * patch, (x // patch) * patch
        m[py:py + patch, px:px + patch] = True
        return cls("point", m)

    @classmethod
    def box(cls, y0: int, x0: int, y1: int, x1: int, shape: tuple) -> "RegionPrompt":
        """Inclusive-exclusive box ``[y0, y1) x [x0, x1)``, clamped to the image."""
        h, w = shape
        y0, y1 = max(0, y0), min(h, y1)
        x0, x1 = max(0, x0), min(w, x1)
        m = np.zeros((h, w), dtype=bool)
        m[y0:y1, x0:x1] = True
        return cls("box", m)

    @classmethod
    def free_form(cls, mask: np.ndarray) -> "RegionPrompt":
        return cls("mask", mask)


def region_tokens(region: RegionPrompt, patch: int) -> np.ndarray:
    """Indices of patches whose center pixel lies inside the region."""
    h, w = region.mask.shape
    c = patch // 2
    centers = region.mask[c::patch, c::patch][: h // patch, : w // patch]
    return np.flatnonzero(centers.reshape(-1))


def sample_region_indices(region: RegionPrompt, m: int, seed: int, patch: int) -> np.ndarray:
    """Uniform sampling with replacement of ``m`` in-region token indices."""
    tokens = region_tokens(region, patch)
    if tokens.size == 0:
        raise InputError("region prompt covers no patch center")
    if m < 1:
        raise InputError("sample count m must be >= 1")
    rng = np.random.default_rng(seed)
    return tokens[rng.integers(0, tokens.size, size=m)]


def sample_region(v: Tensor, region: RegionPrompt, m: int, seed: int, patch: int) -> Tensor:
    """Rows of the raw vision features ``v`` ([N_v, C_v]) drawn from the region: [m, C_v]."""
    return T.take_rows(v, sample_region_indices(region, m, seed, patch))


def encode_visual_prompt(projector: MLP2, sampled: Tensor) -> Tensor:
    """Mean-pool the sampled rows and project to one [1, C_llm] prompt token."""
    if sampled.ndim != 2 or sampled.shape[0] < 1:
        raise InputError(f"expected [m, C_v] samples with m >= 1, got {sampled.shape}")
    return projector(T.mean(sampled, axis=0, keepdims=True))


# ---------------------------------------------------------------------------
# Text
# ---------------------------------------------------------------------------

def prompt_slot(ids) -> int | None:
    """Position (in the embedded sequence) where the visual-prompt token goes.

    Returns ``None`` when the text has no region pair. Raises on unmatched or
    repeated pairs.
    """
    ids = list(ids)
    opens = [i for i, t in enumerate(ids) if t == vocab.REGION_OPEN]
    closes = [i for i, t in enumerate(ids) if t == vocab.REGION_CLOSE]
    if len(opens) != len(closes):
        raise InputError("unmatched <region> / </region> tokens")
    if not opens:
        return None
    if len(opens) > 1:
        raise InputError("at most one region pair per query")
    if closes[0] != opens[0] + 1:
        raise InputError("</region> must directly follow <region>")
    return opens[0] + 1


def embed_text_with_prompts(embedding: Embedding, ids, v_vp: Tensor | None = None) -> Tensor:
    """Token embeddings [N_t, C] with ``v_vp`` spliced in after ``<region>``: [N_t (+1), C]."""
    slot = prompt_slot(ids)
    if (slot is None) != (v_vp is None):
        raise InputError("a visual prompt requires exactly one region pair, and vice versa")
    t = embedding(ids)
    if slot is None:
        return t
    return T.concat([T.getitem(t, slice(0, slot)), v_vp, T.getitem(t, slice(slot, None))], axis=0)


def assemble_input(v_hat: Tensor, t_hat: Tensor) -> tuple[Tensor, np.ndarray]:
    """Concatenate image then text tokens; also return per-token origin labels."""
    if v_hat.shape[-1] != t_hat.shape[-1]:
        raise T.ShapeError(f"width mismatch: image {v_hat.shape} vs text {t_hat.shape}")
    x = T.concat([v_hat, t_hat], axis=0)
    origins = np.array([IMAGE] * v_hat.shape[0] + [TEXT] * t_hat.shape[0])
    return x, origins
