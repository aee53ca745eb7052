"""Procedural multimodal scenes and the task samples built from them.

A scene is a 28x28 RGB image with 1-3 non-overlapping shapes of distinct
categories on a noisy background. Each category is painted in a jittered
version of its own base colour. Everything is a pure function of the seed.
Seed ranges separate the splits; the zero-shot split draws only from the two
held-out categories, which never appear in training scenes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import vocab
from .encoders import RegionPrompt, region_tokens

IMAGE_SIZE = 28
PATCH = 4
MIN_AREA = 9

SHAPES = vocab.SHAPES
HELD_OUT = ("ring", "blob")
SEEN = tuple(s for s in SHAPES if s not in HELD_OUT)

SPLIT_BASE = {"train": 0, "test": 1_000_000, "zeroshot": 2_000_000}
SPLIT_SIZE = 1_000_000

COLORS = np.array([
    [0.95, 0.25, 0.2], [0.2, 0.8, 0.3], [0.25, 0.45, 0.95], [0.95, 0.85, 0.2],
    [0.85, 0.3, 0.9], [0.2, 0.9, 0.9], [0.95, 0.6, 0.2], [0.9, 0.9, 0.9],
])

GROUNDING_TEMPLATES = (
    "please segment the {cls} in this image .",
    "can you segment the {cls} in this image ?",
    "segment the {cls} .",
    "where is the {cls} ? please show the mask .",
    "please outline the {cls} in the picture .",
    "can you find the {cls} and mark it ?",
    "show me the mask of the {cls} .",
    "highlight the {cls} in this scene .",
    "locate the {cls} in the image and segment it .",
    "which area is the {cls} ? please segment it .",
)
GROUNDING_ANSWER = "sure , it is <seg> ."

CLOSED_KINDS = ("count", "largest")
NUMBER_WORDS = {1: "1", 2: "2", 3: "3"}


@dataclass
class Instance:
    category: str
    mask: np.ndarray
    bbox: tuple  # y0, x0, y1, x1 (exclusive ends)

    @property
    def area(self) -> int:
        return int(self.mask.sum())

    @property
    def centroid(self) -> tuple:
        ys, xs = np.nonzero(self.mask)
        return float(ys.mean()), float(xs.mean())


@dataclass
class Scene:
    seed: int
    image: np.ndarray
    instances: list
    modality_tag: str = "synthetic"


@dataclass
class Sample:
    task: str
    image: np.ndarray
    prompt: list
    answer: list
    region: RegionPrompt | None = None
    gt_mask: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def ids(self) -> list:
        """Full text sequence: <bos> prompt answer <eos>."""
        return [vocab.BOS] + self.prompt + self.answer + [vocab.EOS]

    @property
    def category(self) -> str | None:
        return self.meta.get("category")


# ---------------------------------------------------------------------------
# Shapes
# ---------------------------------------------------------------------------

def _grid(n=IMAGE_SIZE):
    return np.mgrid[0:n, 0:n].astype(float)


def draw_shape(kind: str, cy: float, cx: float, rng: np.random.Generator) -> np.ndarray:
    yy, xx = _grid()
    dy, dx = yy - cy, xx - cx
    d2 = dy * dy + dx * dx
    if kind == "disk":
        r = rng.uniform(3.0, 5.0)
        m = d2 <= r * r
    elif kind == "square":
        a = rng.uniform(2.5, 4.5)
        m = (np.abs(dy) <= a) & (np.abs(dx) <= a)
    elif kind == "triangle":
        hgt = rng.uniform(3.5, 5.5)
        t = (dy + hgt) / (2 * hgt)  # 0 at apex, 1 at base
        m = (t >= 0) & (t <= 1) & (np.abs(dx) <= t * hgt * 1.1)
    elif kind == "ring":
        r = rng.uniform(4.5, 6.0)
        m = (d2 <= r * r) & (d2 > (r - 2.0) ** 2)
    elif kind == "cross":
        a = rng.uniform(3.0, 5.0)
        m = ((np.abs(dy) <= 1) & (np.abs(dx) <= a)) | ((np.abs(dx) <= 1) & (np.abs(dy) <= a))
    elif kind == "bar":
        a = rng.uniform(5.0, 7.0)
        if rng.random() < 0.5:
            m = (np.abs(dy) <= 1) & (np.abs(dx) <= a)
        else:
            m = (np.abs(dx) <= 1) & (np.abs(dy) <= a)
    elif kind == "blob":
        m = np.zeros_like(d2, dtype=bool)
        for _ in range(3):
            oy, ox = rng.uniform(-2.0, 2.0, size=2)
            r = rng.uniform(2.0, 3.2)
            m |= (dy - oy) ** 2 + (dx - ox) ** 2 <= r * r
    elif kind == "dot":
        r = rng.uniform(1.6, 2.2)
        m = d2 <= r * r
    else:
        raise ValueError(f"unknown shape {kind!r}")
    return m


def _bbox(mask: np.ndarray) -> tuple:
    ys, xs = np.nonzero(mask)
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def generate_scene(seed: int, palette=SEEN, n_instances: int | None = None) -> Scene:
    """1-3 disjoint shapes of distinct categories from ``palette``; fully determined by ``seed``."""
    rng = np.random.default_rng([seed, 17])
    k = n_instances if n_instances is not None else int(rng.integers(1, 4))
    k = min(k, len(palette))
    cats = [palette[i] for i in rng.permutation(len(palette))[:k]]
    occupied = np.zeros((IMAGE_SIZE, IMAGE_SIZE), dtype=bool)
    instances = []
    for cat in cats:
        for _ in range(200):
            cy, cx = rng.uniform(5.0, IMAGE_SIZE - 6.0, size=2)
            m = draw_shape(cat, cy, cx, rng)
            if m.sum() < MIN_AREA:
                continue
            if (_dilate(_dilate(m)) & occupied).any():
                continue
            break
        else:
            continue
        occupied |= m
        instances.append(Instance(cat, m, _bbox(m)))
    if not instances:
        # every placement attempt collided; an empty canvas always admits one shape
        m = draw_shape(cats[0], IMAGE_SIZE / 2, IMAGE_SIZE / 2, rng)
        instances.append(Instance(cats[0], m, _bbox(m)))
    image = np.clip(rng.normal(0.12, 0.05, size=(IMAGE_SIZE, IMAGE_SIZE, 3)), 0.0, 1.0)
    for inst in instances:
        base = COLORS[SHAPES.index(inst.category)] + rng.normal(0, 0.04, size=3)
        color = base + rng.normal(0, 0.03, size=(IMAGE_SIZE, IMAGE_SIZE, 3))
        image = np.where(inst.mask[..., None], np.clip(color, 0.0, 1.0), image)
    return Scene(seed, image, instances)


# ---------------------------------------------------------------------------
# Samples
# ---------------------------------------------------------------------------

def _ordered_categories(scene: Scene) -> list:
    return sorted((inst.category for inst in scene.instances), key=SHAPES.index)


def generate_caption(scene: Scene) -> Sample:
    cats = _ordered_categories(scene)
    answer = "there is " + " and ".join(f"a {c}" for c in cats) + " ."
    return Sample("caption", scene.image, vocab.encode("describe the image ."), vocab.encode(answer),
                  meta={"seed": scene.seed})


def largest_instance(scene: Scene, margin: float = 1.25) -> Instance | None:
    """The instance with maximal area, or None if the runner-up is within ``margin``."""
    ranked = sorted(scene.instances, key=lambda i: -i.area)
    if len(ranked) > 1 and ranked[0].area < margin * ranked[1].area:
        return None
    return ranked[0]


def vqa_answer(scene: Scene, kind: str) -> str:
    if kind == "count":
        return NUMBER_WORDS[len(scene.instances)]
    if kind == "list":
        return " , ".join(_ordered_categories(scene))
    if kind == "largest":
        inst = largest_instance(scene)
        if inst is None:
            raise ValueError("largest shape is ambiguous in this scene")
        return inst.category
    raise ValueError(f"unknown question kind {kind!r}")


VQA_QUESTIONS = {
    "count": "how many shapes are in the image ?",
    "list": "list the shapes in the image .",
    "largest": "what is the largest shape ?",
}


def generate_vqa_pair(scene: Scene, seed: int) -> Sample:
    """Count / list / largest question with its answer computed from the scene metadata."""
    rng = np.random.default_rng([seed, 23])
    kind = ("count", "list", "largest")[int(rng.integers(0, 3))]
    if kind == "largest" and largest_instance(scene) is None:
        kind = "count"
    return Sample("complex-vqa", scene.image, vocab.encode(VQA_QUESTIONS[kind]),
                  vocab.encode(vqa_answer(scene, kind)),
                  meta={"seed": scene.seed, "kind": kind, "closed": kind in CLOSED_KINDS})


REGION_QUESTION = "what is in <region> </region> ?"


def generate_region_qa(scene: Scene, seed: int, patch: int = PATCH) -> Sample:
    """Ask for the category inside a mask, jittered box or centroid-point prompt."""
    if not scene.instances:
        raise ValueError("scene has no instances")
    rng = np.random.default_rng([seed, 29])
    inst = scene.instances[int(rng.integers(0, len(scene.instances)))]
    kind = ("mask", "box", "point")[int(rng.integers(0, 3))]
    shape = inst.mask.shape
    if kind == "mask":
        region = RegionPrompt.free_form(inst.mask)
    elif kind == "box":
        y0, x0, y1, x1 = inst.bbox
        j = rng.integers(-1, 2, size=4)
        by0, bx0 = min(y0 + j[0], shape[0] - 1), min(x0 + j[1], shape[1] - 1)
        region = RegionPrompt.box(by0, bx0, max(y1 + j[2], by0 + 1), max(x1 + j[3], bx0 + 1), shape)
    else:
        cy, cx = inst.centroid
        region = RegionPrompt.point(int(round(cy)), int(round(cx)), shape, patch)
    if region_tokens(region, patch).size == 0:
        cy, cx = inst.centroid
        region = RegionPrompt.point(int(round(cy)), int(round(cx)), shape, patch)
    return Sample("region-vqa", scene.image, vocab.encode(REGION_QUESTION),
                  vocab.encode(f"it is a {inst.category}"), region=region,
                  meta={"seed": scene.seed, "category": inst.category, "prompt_kind": region.kind})


def generate_grounding_pair(scene: Scene, seed: int, templates=GROUNDING_TEMPLATES) -> Sample:
    """Instantiate a random template with a random instance's category; the answer holds one <seg>."""
    if not scene.instances:
        raise ValueError("scene has no instances")
    if not templates:
        raise ValueError("template set is empty")
    rng = np.random.default_rng([seed, 31])
    inst = scene.instances[int(rng.integers(0, len(scene.instances)))]
    t = int(rng.integers(0, len(templates)))
    prompt = templates[t].format(cls=inst.category)
    return Sample("grounding", scene.image, vocab.encode(prompt), vocab.encode(GROUNDING_ANSWER),
                  gt_mask=inst.mask.copy(),
                  meta={"seed": scene.seed, "category": inst.category, "template": t,
                        "n_instances": len(scene.instances)})


def anonymize_category(sample: Sample, token: int) -> Sample:
    """Copy of a grounding sample whose class word is replaced by ``token``."""
    cid = vocab.shape_id(sample.category)
    if cid not in sample.prompt:
        raise ValueError("prompt does not name the sample category")
    prompt = [token if t == cid else t for t in sample.prompt]
    return Sample(sample.task, sample.image, prompt, list(sample.answer), sample.region,
                  sample.gt_mask, dict(sample.meta, anonymized=True))


TASKS = ("caption", "complex-vqa", "region-vqa", "grounding")


def split_seed(split: str, index: int) -> int:
    if not 0 <= index < SPLIT_SIZE:
        raise ValueError(f"index {index} outside split range")
    return SPLIT_BASE[split] + index


def split_of(seed: int) -> str:
    for name, base in SPLIT_BASE.items():
        if base <= seed < base + SPLIT_SIZE:
            return name
    raise ValueError(f"seed {seed} belongs to no split")


def make_sample(task: str, seed: int) -> Sample:
    """The ``task`` sample for scene ``seed``; zero-shot seeds use the held-out palette."""
    zeroshot = split_of(seed) == "zeroshot"
    palette = HELD_OUT if zeroshot else SEEN
    scene = generate_scene(seed, palette, n_instances=1 if zeroshot else None)
    if task == "caption":
        return generate_caption(scene)
    if task == "complex-vqa":
        return generate_vqa_pair(scene, seed)
    if task == "region-vqa":
        return generate_region_qa(scene, seed)
    if task == "grounding":
        return generate_grounding_pair(scene, seed)
    raise ValueError(f"unknown task {task!r}")
