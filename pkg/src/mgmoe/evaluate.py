"""Evaluation on the synthetic suite: decoding, mask prediction, reports and routing tables."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as D
from . import tensor as T
from . import vocab
from .metrics import closed_accuracy, mdice, token_precision_recall
from .model import MultimodalModel, build_batch
from .moe import expert_load_stats

EVAL_TASKS = ("complex-vqa", "region-vqa", "grounding")


def eval_samples(split: str, task: str, n: int, start: int = 0) -> list:
    return [D.make_sample(task, D.split_seed(split, start + i)) for i in range(n)]


def _chunks(items: list, size: int):
    for i in range(0, len(items), size):
        yield items[i:i + size]


def greedy_generate(model: MultimodalModel, samples: list, max_new_tokens: int = 8,
                    batch_size: int = 32) -> list:
    """Greedy answers (token ids, <eos> excluded) given each sample's image, prompt and region."""
    out = []
    with T.no_grad():
        for chunk in _chunks(samples, batch_size):
            seqs = [[vocab.BOS] + list(s.prompt) for s in chunk]
            answers = [[] for _ in chunk]
            done = [False] * len(chunk)
            for _ in range(max_new_tokens):
                batch = build_batch(chunk, model.cfg, sequences=seqs, with_targets=False)
                hidden = model.encode(batch)
                last = np.array([i * batch.length + batch.lengths[i] - 1 for i in range(len(chunk))])
                flat = T.reshape(hidden, (batch.size * batch.length, model.cfg.llm_dim))
                logits = model.lm_head(T.take_rows(flat, last)).data
                nxt = logits.argmax(axis=1)
                for i, tok in enumerate(nxt):
                    if done[i]:
                        continue
                    if tok == vocab.EOS:
                        done[i] = True
                        continue
                    answers[i].append(int(tok))
                    seqs[i].append(int(tok))
                if all(done):
                    break
            out.extend(answers)
    return out


def predict_masks(model: MultimodalModel, samples: list, batch_size: int = 32) -> np.ndarray:
    """Mask logits [N, H, W] with the reference answer teacher-forced up to <seg>."""
    out = []
    with T.no_grad():
        for chunk in _chunks(samples, batch_size):
            batch = build_batch(chunk, model.cfg, with_targets=False)
            out.append(model.mask_logits(batch, model.encode(batch)).data)
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# Routing
# ---------------------------------------------------------------------------

@dataclass
class LayerLoad:
    layer: int
    expert: int
    kept: int
    dropped: int
    fraction: float
    image_fraction: float
    text_fraction: float

    def record(self) -> str:
        return (f"layer={self.layer} expert={self.expert} kept={self.kept} dropped={self.dropped} "
                f"fraction={self.fraction:.6f} image={self.image_fraction:.6f} text={self.text_fraction:.6f}")


def routing_report(model: MultimodalModel, samples: list, batch_size: int = 32) -> list:
    """Per layer and expert: kept/dropped counts and token shares (fractions are over experts)."""
    layers = model.moe_layers()
    if not layers:
        return []
    plans = [[] for _ in layers]
    with T.no_grad():
        for chunk in _chunks(samples, batch_size):
            model.encode(build_batch(chunk, model.cfg, with_targets=False))
            for j, layer in enumerate(layers):
                plans[j].extend(layer.last_plans)
    rows = []
    for j, ps in enumerate(plans):
        st = expert_load_stats(ps)
        for e in range(len(st.kept)):
            rows.append(LayerLoad(j, e, int(st.kept[e]), int(st.dropped[e]), float(st.fraction[e]),
                                  float(st.image_fraction[e]), float(st.text_fraction[e])))
    return rows


# ---------------------------------------------------------------------------
# Report
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    closed_accuracy: float
    token_precision: float
    token_recall: float
    mdice_seen: dict
    mdice_zeroshot: dict
    loads: list = field(default_factory=list)
    counts: dict = field(default_factory=dict)

    @property
    def mean_mdice_seen(self) -> float:
        return float(np.mean(list(self.mdice_seen.values())))

    @property
    def mean_mdice_zeroshot(self) -> float:
        return float(np.mean(list(self.mdice_zeroshot.values())))

    @property
    def mean_score(self) -> float:
        """Balance of image-level and pixel-level quality on seen classes."""
        return float(np.mean([self.closed_accuracy, self.token_precision, self.token_recall,
                              self.mean_mdice_seen]))

    def records(self) -> list:
        """``(name, class, value)`` triples, one metric each; class ``-`` means aggregate."""
        rec = [("closed_accuracy", "-", self.closed_accuracy),
               ("token_precision", "-", self.token_precision),
               ("token_recall", "-", self.token_recall)]
        rec += [("mdice_seen", c, v) for c, v in sorted(self.mdice_seen.items())]
        rec.append(("mdice_seen", "mean", self.mean_mdice_seen))
        rec += [("mdice_zeroshot", c, v) for c, v in sorted(self.mdice_zeroshot.items())]
        rec.append(("mdice_zeroshot", "mean", self.mean_mdice_zeroshot))
        rec.append(("mean_score", "-", self.mean_score))
        for row in self.loads:
            tag = f"layer{row.layer}/expert{row.expert}"
            rec.append(("expert_fraction", tag, row.fraction))
            rec.append(("expert_image_fraction", tag, row.image_fraction))
            rec.append(("expert_text_fraction", tag, row.text_fraction))
        return rec

    def to_text(self) -> str:
        return "".join(f"{n}\t{c}\t{v:.6f}\n" for n, c, v in self.records())

    def summary(self) -> dict:
        return {
            "closed_accuracy": self.closed_accuracy,
            "token_precision": self.token_precision,
            "token_recall": self.token_recall,
            "mdice_seen": dict(sorted(self.mdice_seen.items())),
            "mdice_seen_mean": self.mean_mdice_seen,
            "mdice_zeroshot": dict(sorted(self.mdice_zeroshot.items())),
            "mdice_zeroshot_mean": self.mean_mdice_zeroshot,
            "mean_score": self.mean_score,
            "loads": [asdict(r) for r in self.loads],
            "counts": self.counts,
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"


def evaluate(model: MultimodalModel, split: str = "test", n: int = 96, n_zeroshot: int = 48,
             batch_size: int = 32, max_new_tokens: int = 8) -> EvalReport:
    """Score ``model`` on the first ``n`` scenes of ``split`` per task and on zero-shot grounding.

    Closed-set accuracy covers count and largest-shape questions (exact match of
    the greedy answer); token precision/recall cover list questions and
    region questions. Masks come from the reference grounding answer.
    """
    vqa = eval_samples(split, "complex-vqa", n)
    region = eval_samples(split, "region-vqa", n)
    ground = eval_samples(split, "grounding", n)
    zshot = eval_samples("zeroshot", "grounding", n_zeroshot)

    answers = greedy_generate(model, vqa + region, max_new_tokens, batch_size)
    closed_p, closed_g, prec, rec = [], [], [], []
    for s, a in zip(vqa + region, answers):
        if s.meta.get("closed"):
            closed_p.append(a)
            closed_g.append(s.answer)
        else:
            p, r = token_precision_recall([vocab.ITOS[t] for t in a], [vocab.ITOS[t] for t in s.answer])
            prec.append(p)
            rec.append(r)

    seen, _ = mdice(predict_masks(model, ground, batch_size) > 0, [s.gt_mask for s in ground],
                    [s.category for s in ground])
    zs, _ = mdice(predict_masks(model, zshot, batch_size) > 0, [s.gt_mask for s in zshot],
                  [s.category for s in zshot])
    loads = routing_report(model, vqa + region + ground, batch_size)
    return EvalReport(
        closed_accuracy=closed_accuracy(closed_p, closed_g),
        token_precision=float(np.mean(prec)),
        token_recall=float(np.mean(rec)),
        mdice_seen=seen,
        mdice_zeroshot=zs,
        loads=loads,
        counts={"closed": len(closed_g), "open": len(prec), "grounding": len(ground),
                "zeroshot": len(zshot)},
    )
