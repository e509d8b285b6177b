"""Class-specific instruction conversations for detection fine-tuning.

Every image becomes one multi-turn record: one positive turn per category
present (answer = that category's boxes), the same number of negative turns
for categories sampled from the rest of the label set, turn order shuffled,
total turns capped per image.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import rng as rngs
from .detmodel import CategorySet, DetectionDataset, DetkitError, GroundTruthAnnotation, ImageRecord
from .tokencodec import GROUP_SEPARATOR, NEGATIVE_ANSWER, TokenCodecConfig, encode_answer, split_groups

logger = logging.getLogger(__name__)

DEFAULT_TEMPLATE = "Detect all the objects in the image that belong to the category set <category>."
PLACEHOLDER = "<category>"
COCO_CAP = 80
OBJECTS365_CAP = 365


class ConfigError(DetkitError, ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    seed: int = 0
    round_cap: int = COCO_CAP
    codec: TokenCodecConfig = field(default_factory=TokenCodecConfig)
    prompt_template: str = DEFAULT_TEMPLATE

    def __post_init__(self) -> None:
        if self.round_cap < 0:
            raise ConfigError("round_cap must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.prompt_template.count(PLACEHOLDER) != 1:
            raise ConfigError(f"prompt template must contain {PLACEHOLDER} exactly once")


@dataclass(frozen=True)
class InstructionTurn:
    category_id: int
    polarity: str  # "positive" | "negative"
    prompt: str
    answer: str


@dataclass(frozen=True)
class ConversationRecord:
    image_id: int
    turns: tuple[InstructionTurn, ...] = ()
    file_name: str = ""

    @property
    def positives(self) -> list[InstructionTurn]:
        return [t for t in self.turns if t.polarity == "positive"]

    @property
    def negatives(self) -> list[InstructionTurn]:
        return [t for t in self.turns if t.polarity == "negative"]


def build_prompt(category_name: str, template: str = DEFAULT_TEMPLATE) -> str:
    if template.count(PLACEHOLDER) != 1:
        raise ConfigError(f"prompt template must contain {PLACEHOLDER} exactly once: {template!r}")
    return template.replace(PLACEHOLDER, category_name)


def categories_present(image_id: int, annotations: Iterable[GroundTruthAnnotation]) -> set[int]:
    return {a.category_id for a in annotations if a.image_id == image_id and not a.iscrowd}


def sample_negatives(present: set[int], categories: CategorySet, n: int, rng: np.random.Generator) -> set[int]:
    remaining = [c for c in categories.ids if c not in present]
    if n > len(remaining):
        logger.warning("asked for %d negatives but only %d categories remain; clipping", n, len(remaining))
        n = len(remaining)
    if n <= 0:
        return set()
    picks = rng.choice(len(remaining), size=n, replace=False)
    return {remaining[i] for i in picks}


def build_conversation(
    image: ImageRecord,
    anns: Sequence[GroundTruthAnnotation],
    categories: CategorySet,
    cfg: GenConfig,
    rng: np.random.Generator,
) -> ConversationRecord:
    """One record for one image.

    With n present categories: min(n, cap) positive turns and
    min(n, cap - positives) negative turns. If n alone exceeds the cap, a
    random subset of present categories is kept.
    """
    boxes: dict[int, list[GroundTruthAnnotation]] = {}
    for a in anns:
        if a.image_id == image.image_id and not a.iscrowd:
            boxes.setdefault(a.category_id, []).append(a)
    present = [c for c in categories.ids if c in boxes]
    n = len(present)
    n_pos = min(n, cfg.round_cap)
    n_neg = min(n, cfg.round_cap - n_pos)
    if n_pos < n:
        keep = set(rng.choice(n, size=n_pos, replace=False).tolist())
        present = [c for i, c in enumerate(present) if i in keep]

    turns = []
    for c in present:
        cat_boxes = boxes[c]
        order = rng.permutation(len(cat_boxes))
        turns.append(
            InstructionTurn(
                c,
                "positive",
                build_prompt(categories.name(c), cfg.prompt_template),
                encode_answer([cat_boxes[i] for i in order], image, cfg.codec),
            )
        )
    negatives = sample_negatives(set(boxes), categories, n_neg, rng)
    for c in categories.ids:
        if c in negatives:
            turns.append(InstructionTurn(c, "negative", build_prompt(categories.name(c), cfg.prompt_template), NEGATIVE_ANSWER))
    order = rng.permutation(len(turns))
    return ConversationRecord(image.image_id, tuple(turns[i] for i in order), image.file_name)


def generate_conversations(ds: DetectionDataset, cfg: GenConfig) -> list[ConversationRecord]:
    """Records for every image, in image-id order. Pure function of (ds, cfg)."""
    out = []
    for im in sorted(ds.images, key=lambda im: im.image_id):
        r = rngs.keyed_rng(cfg.seed, rngs.GENERATE, im.image_id)
        out.append(build_conversation(im, ds.image_annotations(im.image_id), ds.categories, cfg, r))
    return out


def shuffle_epoch(records: Sequence[ConversationRecord], epoch: int, seed: int) -> list[ConversationRecord]:
    """Re-randomise turn order and box order for one training epoch."""
    out = []
    for rec in records:
        r = rngs.keyed_rng(seed, rngs.SHUFFLE, epoch, rec.image_id)
        turns = []
        for t in rec.turns:
            groups = split_groups(t.answer)
            if t.polarity == "positive" and len(groups) > 1:
                groups = [groups[i] for i in r.permutation(len(groups))]
                t = InstructionTurn(t.category_id, t.polarity, t.prompt, GROUP_SEPARATOR.join(groups))
            turns.append(t)
        order = r.permutation(len(turns))
        out.append(ConversationRecord(rec.image_id, tuple(turns[i] for i in order), rec.file_name))
    return out


def record_to_json(rec: ConversationRecord, categories: CategorySet) -> dict:
    return {
        "image_id": rec.image_id,
        "file_name": rec.file_name,
        "turns": [
            {
                "category": categories.name(t.category_id),
                "category_id": t.category_id,
                "polarity": t.polarity,
                "prompt": t.prompt,
                "answer": t.answer,
            }
            for t in rec.turns
        ],
    }


def export_conversations(
    records: Iterable[ConversationRecord],
    path: str | Path,
    categories: CategorySet,
    skip_empty: bool = True,
) -> int:
    """Write one JSON object per line; returns the number of lines written."""
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            if skip_empty and not rec.turns:
                continue
            fh.write(json.dumps(record_to_json(rec, categories), ensure_ascii=False, sort_keys=True) + "\n")
            n += 1
    return n


def load_conversations(path: str | Path) -> list[ConversationRecord]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            turns = tuple(
                InstructionTurn(int(t["category_id"]), t["polarity"], t["prompt"], t["answer"]) for t in d["turns"]
            )
            out.append(ConversationRecord(int(d["image_id"]), turns, d.get("file_name", "")))
    return out
