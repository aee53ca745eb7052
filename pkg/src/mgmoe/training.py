"""Four-stage schedule: freeze masks, AdamW, the stage loop, MoE assembly and checkpoints."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import data as D
from . import tensor as T
from . import vocab
from .losses import LossWeights
from .model import (Batch, ModelConfig, MultimodalModel, build_batch, convert_to_moe,
                    model_config_dict, param_group)
from .moe import MoELayer, RouterConfig, expert_load_stats
from .serialize import FormatError, decode_tensors, encode_tensors

STAGES = ("I", "II", "III", "IV")

GROUPS = frozenset({
    "vision_tower", "vision_projector", "prompt_encoder", "text_embedding", "lm_head",
    "positional", "norm", "attention", "ffn", "router", "expert_base", "lora",
    "pixel_encoder", "t_projector", "mask_decoder",
})
_NON_FFN = GROUPS - {"ffn", "router", "expert_base", "lora"}

STAGE_GROUPS = {
    # lm_head is included: with a randomly initialized backbone the projector
    # alone cannot align image features to caption tokens.
    "I": frozenset({"vision_projector", "text_embedding", "lm_head"}),
    "II": GROUPS - {"vision_tower", "router", "expert_base", "lora"},
    "III": frozenset({"ffn", "pixel_encoder", "mask_decoder", "t_projector"}),
    "IV": (_NON_FFN | {"router", "lora"}),
}

# the tag a model must carry (last provenance entry) before running a stage
REQUIRED_PREDECESSOR = {"I": None, "II": "I", "III": "II", "IV": "MoE"}


class ConfigurationError(ValueError):
    """Stage, provenance or topology contract violated."""


class TrainingError(RuntimeError):
    """Numerical failure during optimization."""


@dataclass
class StageConfig:
    stage: str
    dataset_mix: dict
    steps: int
    lr: float
    seed: int = 0
    batch_size: int = 16
    warmup: int = 0
    weight_decay: float = 0.0
    loss_weights: LossWeights = field(default_factory=LossWeights)
    trainable_set: frozenset | None = None
    anonymize: float = 0.0  # class-word dropout rate on single-instance grounding scenes

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}")
        if self.trainable_set is None:
            self.trainable_set = STAGE_GROUPS[self.stage]
        self.trainable_set = frozenset(self.trainable_set)
        if self.trainable_set != STAGE_GROUPS[self.stage]:
            raise ConfigurationError(f"stage {self.stage} trainable set must be {sorted(STAGE_GROUPS[self.stage])}")
        if self.steps < 1:
            raise ConfigurationError("steps must be >= 1")
        if (self.lr <= 0 or self.batch_size < 1 or self.warmup < 0 or self.weight_decay < 0
                or not 0 <= self.anonymize <= 1):
            raise ConfigurationError(f"bad optimization settings in stage {self.stage}")
        unknown = set(self.dataset_mix) - set(D.TASKS)
        if unknown:
            raise ConfigurationError(f"unknown tasks in dataset mix: {sorted(unknown)}")
        if not self.dataset_mix or min(self.dataset_mix.values()) < 0 or sum(self.dataset_mix.values()) <= 0:
            raise ConfigurationError("dataset mix needs positive weights")


# ---------------------------------------------------------------------------
# Freezing
# ---------------------------------------------------------------------------

def apply_freeze_mask(model: MultimodalModel, stage: str) -> list:
    """Set ``requires_grad`` per the stage contract; return the trainable parameter names."""
    if stage not in STAGE_GROUPS:
        raise ConfigurationError(f"unknown stage {stage!r}")
    allowed = STAGE_GROUPS[stage]
    names = []
    for name, p in model.named_parameters():
        group = param_group(name)
        if group not in GROUPS:
            raise ConfigurationError(f"unknown parameter group {group!r}")
        p.requires_grad = group in allowed
        p.grad = None
        if p.requires_grad:
            names.append(name)
    return names


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def decays(name: str, p: T.Tensor) -> bool:
    """Weight decay applies to 2-D weight matrices other than embeddings."""
    return p.ndim == 2 and param_group(name) not in ("text_embedding", "positional")


class AdamW:
    def __init__(self, named_params: list, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0, decay_filter=None):
        self.params = list(named_params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.decay = {n: (decay_filter(n, p) if decay_filter else True) for n, p in self.params}
        self.state: dict = {}
        self.t = 0

    def step(self, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise TrainingError(f"non-finite gradient in parameter {name}")
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = (np.zeros_like(p.data), np.zeros_like(p.data))
            m, v = st
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            if self.weight_decay and self.decay[name]:
                p.data *= 1 - lr * self.weight_decay
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def optimizer_step(params: list, lr: float, opt: AdamW | None = None, **kw) -> AdamW:
    """One AdamW update of ``params`` ([(name, tensor)]) from their ``.grad``; returns the state."""
    if opt is None:
        opt = AdamW(params, lr, **kw)
    opt.step(lr)
    return opt


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

def mix_counts(mix: dict, batch_size: int) -> dict:
    """Largest-remainder apportionment of ``batch_size`` over the mix (ties by task order)."""
    tasks = [t for t in D.TASKS if mix.get(t, 0) > 0]
    w = np.array([mix[t] for t in tasks], dtype=float)
    exact = w / w.sum() * batch_size
    counts = np.floor(exact).astype(int)
    order = sorted(range(len(tasks)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: batch_size - counts.sum()]:
        counts[i] += 1
    return {t: int(c) for t, c in zip(tasks, counts)}


def stage_batch(cfg: StageConfig, step: int) -> list:
    """Training samples for ``step``: fresh train-split scenes, mixed and shuffled."""
    rng = np.random.default_rng([cfg.seed, STAGES.index(cfg.stage), step])
    samples = []
    for task, n in mix_counts(cfg.dataset_mix, cfg.batch_size).items():
        for idx in rng.integers(0, D.SPLIT_SIZE, size=n):
            s = D.make_sample(task, D.split_seed("train", int(idx)))
            # a draw is made for every sample so the stream does not depend on scene content
            drop, tok = rng.random(), int(rng.choice(vocab.UNUSED))
            if task == "grounding" and s.meta.get("n_instances") == 1 and drop < cfg.anonymize:
                s = D.anonymize_category(s, tok)
            samples.append(s)
    order = rng.permutation(len(samples))
    return [samples[i] for i in order]


# ---------------------------------------------------------------------------
# Stage loop
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    stage: str
    losses: dict
    loads: list  # per MoE layer, kept-token fraction per expert

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "stage": self.stage,
                           "losses": {k: round(v, 8) for k, v in self.losses.items()},
                           "loads": [[round(x, 6) for x in row] for row in self.loads]})


def check_provenance(model: MultimodalModel, stage: str) -> None:
    need = REQUIRED_PREDECESSOR[stage]
    last = model.provenance[-1] if model.provenance else None
    if last != need:
        raise ConfigurationError(f"stage {stage} needs a model from {need or 'initialization'}, got {last or 'initialization'}")
    if (stage == "IV") != model.is_moe:
        raise ConfigurationError(f"stage {stage} topology mismatch (moe={model.is_moe})")


def run_stage(cfg: StageConfig, model: MultimodalModel, batches=None, log=None,
              check: bool = True) -> tuple[MultimodalModel, list]:
    """Train ``model`` in place for ``cfg.steps`` steps; returns it with the per-step records.

    ``batches`` optionally replaces the default sample stream: a callable
    ``step -> list[Sample]``. ``log`` receives each :class:`StepRecord`.
    """
    if check:
        check_provenance(model, cfg.stage)
    names = set(apply_freeze_mask(model, cfg.stage))
    params = [(n, p) for n, p in model.named_parameters() if n in names]
    opt = AdamW(params, cfg.lr, weight_decay=cfg.weight_decay, decay_filter=decays)
    next_batch = batches or (lambda s: stage_batch(cfg, s))
    records = []
    for step in range(cfg.steps):
        batch = build_batch(next_batch(step), model.cfg)
        out = model.losses(batch, cfg.loss_weights)
        for _, p in params:
            p.grad = None
        T.backward(out["total"])
        lr = cfg.lr * min(1.0, (step + 1) / cfg.warmup) if cfg.warmup else cfg.lr
        opt.step(lr)
        loads = [expert_load_stats(m.last_plans).fraction.tolist() for m in model.moe_layers()]
        rec = StepRecord(step, cfg.stage, {k: float(v.data) for k, v in out.items()}, loads)
        records.append(rec)
        if log is not None:
            log(rec)
    for _, p in params:
        p.grad = None
    model.provenance.append(cfg.stage)
    model.steps[cfg.stage] = cfg.steps
    return model, records


# ---------------------------------------------------------------------------
# MoE assembly
# ---------------------------------------------------------------------------

def _non_ffn_state(model: MultimodalModel) -> dict:
    return {n: p.data for n, p in model.named_parameters()
            if param_group(n) not in ("ffn", "router", "expert_base", "lora")}


def build_moe_from_experts(m_vl: MultimodalModel, m_ground: MultimodalModel, cfg: RouterConfig,
                           seed: int = 0, non_ffn_from: MultimodalModel | None = None) -> MultimodalModel:
    """Stage-IV model: per block, experts built on the stage-II and stage-III FFNs.

    Non-FFN weights come from ``non_ffn_from`` (default: the stage-III model).
    """
    if not m_vl.provenance or m_vl.provenance[-1] != "II":
        raise ConfigurationError("first expert source must be a stage-II model")
    if not m_ground.provenance or m_ground.provenance[-1] != "III":
        raise ConfigurationError("second expert source must be a stage-III model")
    if m_vl.is_moe or m_ground.is_moe:
        raise ConfigurationError("expert sources must have plain FFN slots")
    if cfg.num_experts != 2:
        raise ConfigurationError("stage IV mixes exactly two experts")
    a, b = _non_ffn_state(m_vl), _non_ffn_state(m_ground)
    if m_vl.cfg != m_ground.cfg or {k: v.shape for k, v in a.items()} != {k: v.shape for k, v in b.items()}:
        raise ConfigurationError("expert sources differ in topology")
    src = m_ground if non_ffn_from is None else non_ffn_from
    out = copy.deepcopy(src)
    bases = [(copy.deepcopy(bv.ffn), copy.deepcopy(bg.ffn)) for bv, bg in zip(m_vl.blocks, m_ground.blocks)]
    convert_to_moe(out, cfg, np.random.default_rng([seed, 4]), bases=bases)
    out.provenance = list(m_ground.provenance) + ["MoE"]
    out.steps = dict(m_ground.steps)
    return out


def joint_moe(model: MultimodalModel, cfg: RouterConfig, seed: int = 0) -> MultimodalModel:
    """Joint-only baseline: both experts start from the same untrained FFN."""
    if model.provenance:
        raise ConfigurationError("joint baseline starts from a fresh model")
    convert_to_moe(model, cfg, np.random.default_rng([seed, 4]))
    model.provenance = ["MoE"]
    return model


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

class CheckpointError(ValueError):
    pass


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def manifest_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.stem + ".manifest.json")


def save_checkpoint(model: MultimodalModel, path, experiment: dict | None = None) -> dict:
    """Write ``<path>`` (MGT1) and its JSON manifest; returns the manifest."""
    payload = encode_tensors(model.state_dict())
    path = Path(path)
    path.write_bytes(payload)
    manifest = {
        "format": "MGT1",
        "stage": model.provenance[-1] if model.provenance else None,
        "provenance": list(model.provenance),
        "steps": dict(model.steps),
        "config_hash": config_hash(experiment if experiment is not None else model_config_dict(model)),
        "model": model_config_dict(model),
        "sha256": hashlib.sha256(payload).hexdigest(),
        "n_tensors": len(model.state_dict()),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_checkpoint(path) -> MultimodalModel:
    path = Path(path)
    mp = manifest_path(path)
    if not mp.exists():
        raise CheckpointError(f"missing manifest {mp}")
    manifest = json.loads(mp.read_text())
    payload = path.read_bytes()
    if hashlib.sha256(payload).hexdigest() != manifest.get("sha256"):
        raise CheckpointError(f"{path}: content hash does not match manifest")
    try:
        state = decode_tensors(payload)
    except FormatError as e:
        raise CheckpointError(f"{path}: {e}") from e
    cfg = ModelConfig(**manifest["model"]["model"])
    moe = manifest["model"].get("moe")
    dtype = next(iter(state.values())).dtype if state else T.default_dtype()
    with T.dtype_scope(dtype):
        model = MultimodalModel(cfg, seed=0, moe=RouterConfig(**moe) if moe else None)
        try:
            model.load_state_dict(state, strict=True)
        except (KeyError, ValueError) as e:
            raise CheckpointError(f"{path}: {e}") from e
    model.provenance = list(manifest["provenance"])
    model.steps = dict(manifest.get("steps", {}))
    return model


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
