"""The full multimodal model and batched forward/loss computation."""

from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from . import vocab
from .decoders import MaskDecoder, seg_position
from .encoders import (MLP2, PixelEncoder, VisionTower, n_vision_tokens, prompt_slot,
                       sample_region_indices)
from .losses import LossWeights, bce_loss, combined_loss, cross_entropy_loss, dice_loss
from .moe import IMAGE, PAD, TEXT, Expert, MoELayer, RouterConfig
from .nn import EMBED_STD, Embedding, LayerNorm, Linear, Module, TransformerBlock, normal_param
from .tensor import Tensor


@dataclass
class ModelConfig:
    image_size: int = 28
    patch: int = 4
    vision_dim: int = 64
    llm_dim: int = 64
    heads: int = 2
    layers: int = 2
    vocab_size: int = vocab.VOCAB_SIZE
    pixel_dim: int = 32
    pixel_heads: int = 2
    max_len: int = 96
    prompt_samples: int = 16
    fine_dim: int = 8
    lora_r: int = 8
    lora_alpha: float = 16.0

    @property
    def n_vision(self) -> int:
        return n_vision_tokens(self.image_size, self.image_size, self.patch)

    @property
    def grid(self) -> tuple:
        g = self.image_size // self.patch
        return g, g


class MultimodalModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, moe: RouterConfig | None = None):
        rng = np.random.default_rng(seed)
        c = cfg.llm_dim
        self.cfg = cfg
        self.vision_tower = VisionTower(cfg.patch, cfg.vision_dim, rng)
        self.vision_projector = MLP2(cfg.vision_dim, c, c, rng)
        self.prompt_encoder = MLP2(cfg.vision_dim, c, c, rng)
        self.text_embed = Embedding(cfg.vocab_size, c, rng)
        self.pos_embed = normal_param(rng, (cfg.max_len, c), EMBED_STD)
        self.blocks = [TransformerBlock(c, cfg.heads, rng) for _ in range(cfg.layers)]
        self.final_norm = LayerNorm(c)
        self.lm_head = Linear(c, cfg.vocab_size, rng)
        self.pixel_encoder = PixelEncoder(cfg.patch, cfg.n_vision, cfg.pixel_dim, cfg.pixel_heads, rng)
        self.t_projector = MLP2(c, c, cfg.pixel_dim, rng)
        self.mask_decoder = MaskDecoder(cfg.pixel_dim, cfg.grid, cfg.patch, rng, cfg.fine_dim)
        self.moe_cfg: RouterConfig | None = None
        self.provenance: list[str] = []
        self.steps: dict = {}
        if moe is not None:
            convert_to_moe(self, moe, rng)

    @property
    def is_moe(self) -> bool:
        return self.moe_cfg is not None

    def moe_layers(self) -> list:
        return [b.ffn for b in self.blocks if isinstance(b.ffn, MoELayer)]

    def clone(self) -> "MultimodalModel":
        return copy.deepcopy(self)

    # -- forward -----------------------------------------------------------

    def encode(self, batch: "Batch") -> Tensor:
        """Final-normed hidden states [B, L, C] for a batch."""
        cfg = self.cfg
        b, nv, c = batch.size, cfg.n_vision, cfg.llm_dim
        v = self.vision_tower(batch.images)  # b, nv, cv
        v_hat = self.vision_projector(v)
        parts = [T.reshape(v_hat, (b * nv, c)), self.text_embed(batch.text_ids)]
        if batch.region_rows.size:
            v_flat = T.reshape(v, (b * nv, cfg.vision_dim))
            m = cfg.prompt_samples
            sampled = T.take_rows(v_flat, batch.region_rows.reshape(-1))
            pooled = T.mean(T.reshape(sampled, (batch.region_rows.shape[0], m, cfg.vision_dim)), axis=1)
            parts.append(self.prompt_encoder(pooled))
        src = T.concat(parts, axis=0)
        n = batch.length
        x = T.reshape(T.take_rows(src, batch.gather.reshape(-1)), (b, n, c))
        pos = T.getitem(self.pos_embed, slice(0, n))
        x = T.add(x, T.expand(pos, (b, n, c)))
        for block in self.blocks:
            x = block(x, causal=True, lengths=batch.lengths, origins=batch.origins)
        return self.final_norm(x)

    def mask_logits(self, batch: "Batch", hidden: Tensor) -> Tensor:
        """Mask logits [G, H, W] for the grounding rows of the batch."""
        c = self.cfg.llm_dim
        flat = T.reshape(hidden, (batch.size * batch.length, c))
        h = self.t_projector(T.take_rows(flat, batch.seg_rows))
        images = batch.images[batch.grounding_index]
        return self.mask_decoder(h, self.pixel_encoder(images), images)

    def losses(self, batch: "Batch", weights: LossWeights) -> dict:
        hidden = self.encode(batch)
        flat = T.reshape(hidden, (batch.size * batch.length, self.cfg.llm_dim))
        out = {}
        if batch.target_rows.size:
            logits = self.lm_head(T.take_rows(flat, batch.target_rows))
            out["reg"] = cross_entropy_loss(logits, batch.target_ids)
        if batch.seg_rows.size:
            ml = self.mask_logits(batch, hidden)
            out["bce"] = bce_loss(ml, batch.gt_masks)
            out["dice"] = dice_loss(ml, batch.gt_masks)
        out["total"] = combined_loss(out.get("reg"), out.get("bce"), out.get("dice"), weights)
        return out


def convert_to_moe(model: MultimodalModel, cfg: RouterConfig, rng: np.random.Generator,
                   bases: list | None = None) -> MultimodalModel:
    """Swap every FFN slot for an MoE layer.

    ``bases`` gives, per block, the pair of base FFNs for the two experts; by
    default each block's current FFN is copied into both. Routers start at
    zero (uniform gates) and LoRA ``B`` factors at zero.
    """
    mc = model.cfg
    for i, block in enumerate(model.blocks):
        pair = bases[i] if bases is not None else (copy.deepcopy(block.ffn), copy.deepcopy(block.ffn))
        experts = [Expert(base, mc.lora_r, mc.lora_alpha, rng) for base in pair]
        block.ffn = MoELayer(experts, mc.llm_dim, cfg)
    model.moe_cfg = cfg
    return model


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Index plan that lays out several samples as one padded [B, L] sequence batch.

    ``gather`` indexes rows of the concatenation [projected image tokens
    (B*N_v), text embeddings (all ids + one pad), prompt tokens]. ``row_ids``
    holds the token id of each text row, -1 for image rows and -2 for the
    visual-prompt row.
    """

    images: np.ndarray
    text_ids: np.ndarray
    gather: np.ndarray
    lengths: np.ndarray
    origins: np.ndarray
    row_ids: np.ndarray
    region_rows: np.ndarray
    target_rows: np.ndarray
    target_ids: np.ndarray
    seg_rows: np.ndarray
    grounding_index: np.ndarray
    gt_masks: np.ndarray | None
    text_start: np.ndarray
    samples: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.images.shape[0]

    @property
    def length(self) -> int:
        return self.gather.shape[1]


def build_batch(samples, cfg: ModelConfig, sequences=None, with_targets: bool = True) -> Batch:
    """Lay out ``samples``; ``sequences`` optionally overrides each sample's token ids.

    Targets cover answer tokens and the closing <eos>: the row holding token
    ``t`` predicts token ``t + 1``. Grounding rows are collected for samples
    with a ground-truth mask whose sequence contains <seg>.
    """
    nv, m = cfg.n_vision, cfg.prompt_samples
    b = len(samples)
    seqs = [list(s.ids) if sequences is None else list(sequences[i]) for i, s in enumerate(samples)]
    slots = [prompt_slot(seq) for seq in seqs]
    for s, slot in zip(samples, slots):
        if (slot is None) != (s.region is None):
            raise ValueError("region prompt and <region> pair must come together")
    lengths = np.array([nv + len(seq) + (slot is not None) for seq, slot in zip(seqs, slots)])
    n = int(lengths.max())
    if n > cfg.max_len:
        raise ValueError(f"sequence of {n} rows exceeds max_len={cfg.max_len}")

    text_ids = np.concatenate([np.asarray(q, dtype=np.int64) for q in seqs] + [[vocab.PAD]])
    text_base = b * nv
    pad_row = text_base + text_ids.size - 1
    prompt_base = text_base + text_ids.size
    gather = np.full((b, n), pad_row, dtype=np.int64)
    origins = np.full((b, n), PAD, dtype=np.int64)
    row_ids = np.full((b, n), vocab.PAD, dtype=np.int64)
    region_rows, target_rows, target_ids, seg_rows, g_index, masks = [], [], [], [], [], []
    text_start = np.zeros(b, dtype=np.int64)
    offset, n_prompts = 0, 0
    for i, (sample, seq, slot) in enumerate(zip(samples, seqs, slots)):
        gather[i, :nv] = np.arange(nv) + i * nv
        origins[i, :nv] = IMAGE
        row_ids[i, :nv] = -1
        # row of each text token in the sequence
        pos = nv + np.arange(len(seq))
        if slot is not None:
            pos[slot:] += 1
            gather[i, nv + slot] = prompt_base + n_prompts
            origins[i, nv + slot] = TEXT
            row_ids[i, nv + slot] = -2
            seed = int(sample.meta.get("seed", 0))
            region_rows.append(sample_region_indices(sample.region, m, seed, cfg.patch) + i * nv)
            n_prompts += 1
        gather[i, pos] = text_base + offset + np.arange(len(seq))
        origins[i, pos] = TEXT
        row_ids[i, pos] = seq
        offset += len(seq)
        text_start[i] = nv
        if with_targets and sample.answer:
            a0 = 1 + len(sample.prompt)  # index of first answer token in seq
            for t in range(a0, min(len(seq), a0 + len(sample.answer) + 1)):
                target_rows.append(i * n + pos[t - 1])
                target_ids.append(seq[t])
        if sample.gt_mask is not None and vocab.SEG in seq:
            seg_rows.append(i * n + pos[seg_position(seq)])
            g_index.append(i)
            masks.append(sample.gt_mask.astype(float))
    return Batch(
        images=np.stack([s.image for s in samples]),
        text_ids=text_ids,
        gather=gather,
        lengths=lengths,
        origins=origins,
        row_ids=row_ids,
        region_rows=np.array(region_rows, dtype=np.int64).reshape(-1, m),
        target_rows=np.array(target_rows, dtype=np.int64),
        target_ids=np.array(target_ids, dtype=np.int64),
        seg_rows=np.array(seg_rows, dtype=np.int64),
        grounding_index=np.array(g_index, dtype=np.int64),
        gt_masks=np.stack(masks) if masks else None,
        text_start=text_start,
        samples=list(samples),
    )


def param_group(name: str) -> str:
    """Parameter-group label used by the per-stage freeze policy."""
    head = name.split(".")[0]
    direct = {
        "vision_tower": "vision_tower", "vision_projector": "vision_projector",
        "prompt_encoder": "prompt_encoder", "text_embed": "text_embedding",
        "lm_head": "lm_head", "pos_embed": "positional", "final_norm": "norm",
        "pixel_encoder": "pixel_encoder", "t_projector": "t_projector",
        "mask_decoder": "mask_decoder",
    }
    if head in direct:
        return direct[head]
    if head == "blocks":
        part = name.split(".")[2]
        if part in ("ln1", "ln2"):
            return "norm"
        if part == "attn":
            return "attention"
        if part == "ffn":
            if ".router." in name:
                return "router"
            if ".experts." in name:
                return "lora" if ".lora" in name else "expert_base"
            return "ffn"
    raise KeyError(f"no parameter group for {name!r}")


def model_config_dict(model: MultimodalModel) -> dict:
    d = {"model": asdict(model.cfg)}
    if model.moe_cfg is not None:
        d["moe"] = asdict(model.moe_cfg)
    return d
