"""Data distribution adjustment: densify ground truth with detector pseudo-labels.

Ground-truth boxes enter the merge with confidence 1.0 and pseudo-labels with
the detector's own score; class-wise NMS over the union removes pseudo boxes
that duplicate a ground-truth (or a better pseudo) box.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .detmodel import (
    BoxDistributionStats,
    Detection,
    DetectionDataset,
    DetkitError,
    GroundTruthAnnotation,
    Issue,
    LoadedResults,
    ScoredAnnotation,
    ValidationError,
    load_results,
)
from .geom import nms
from .report import bar_chart_svg

DEFAULT_MERGE_IOU = 0.5


def load_pseudo_labels(path: str | Path, ds: DetectionDataset) -> LoadedResults:
    """Read detector outputs in COCO results format.

    Unknown image ids are a validation error. Records with a score outside
    [0, 1], a category outside the dataset, or a box that is empty after
    clamping are dropped and listed in ``warnings``.
    """
    return load_results(path, ds, unknown_category="drop")


def _as_scored(a: GroundTruthAnnotation) -> ScoredAnnotation:
    if isinstance(a, ScoredAnnotation):
        return a
    return ScoredAnnotation(a.image_id, a.category_id, a.bbox, a.area, a.iscrowd, a.id, 1.0, "ground_truth")


def merge_image(
    gt: Sequence[GroundTruthAnnotation],
    pseudo: Sequence[Detection],
    iou_threshold: float = DEFAULT_MERGE_IOU,
    class_wise: bool = True,
) -> list[ScoredAnnotation]:
    """Merge one image's ground truth with its pseudo-labels.

    Every ground-truth box survives: it is never suppressed, not even by
    another ground-truth box, and on a score tie at 1.0 it ranks before any
    pseudo box. Crowd regions take no part in suppression. Output is the
    ground truth in input order followed by the kept pseudo boxes in
    descending score order.
    """
    scored = [_as_scored(a) for a in gt]
    union = [a for a in scored if not a.iscrowd]
    protected = [a.origin == "ground_truth" for a in union]
    union += [
        ScoredAnnotation(d.image_id, d.category_id, d.bbox, d.bbox.area, False, 0, d.score, "pseudo")
        for d in pseudo
    ]
    protected += [False] * len(pseudo)
    kept = nms(union, iou_threshold, class_wise=class_wise, protected=protected)
    kept_ids = {id(a) for a in kept}
    input_ids = {id(a) for a in scored}
    return [a for a in scored if a.iscrowd or id(a) in kept_ids] + [a for a in kept if id(a) not in input_ids]


def adjust_dataset(
    ds: DetectionDataset,
    pseudo: Sequence[Detection],
    iou_threshold: float = DEFAULT_MERGE_IOU,
    class_wise: bool = True,
    workers: int = 1,
) -> DetectionDataset:
    """Apply :func:`merge_image` to every image.

    Kept pseudo boxes get fresh annotation ids above the largest existing id,
    assigned in image order so reruns are identical.
    """
    by_image: dict[int, list[Detection]] = {}
    for d in pseudo:
        if d.image_id not in ds.image_index:
            raise ValidationError([Issue("dangling_image_id", f"pseudo label -> image {d.image_id}")])
        by_image.setdefault(d.image_id, []).append(d)

    def one(image_id: int) -> list[ScoredAnnotation]:
        return merge_image(ds.image_annotations(image_id), by_image.get(image_id, []), iou_threshold, class_wise)

    image_ids = [im.image_id for im in ds.images]
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            merged = list(pool.map(one, image_ids))
    else:
        merged = [one(i) for i in image_ids]

    next_id = max((a.id for a in ds.annotations), default=0) + 1
    out: list[ScoredAnnotation] = []
    for anns in merged:
        for a in anns:
            if a.origin == "pseudo":
                a = ScoredAnnotation(a.image_id, a.category_id, a.bbox, a.area, a.iscrowd, next_id, a.score, a.origin)
                next_id += 1
            out.append(a)
    return DetectionDataset(ds.images, tuple(out), ds.categories)


@dataclass
class ShiftReport:
    rows: list[tuple[int, int, int]]  # bucket, images before, images after
    mean_before: float
    mean_after: float

    @property
    def delta(self) -> float:
        return self.mean_after - self.mean_before

    def to_csv(self) -> str:
        lines = ["bucket,before,after,mean_delta"]
        lines += [f"{b},{x},{y}," for b, x, y in self.rows]
        lines.append(f"mean,{round(self.mean_before, 4)},{round(self.mean_after, 4)},{round(self.delta, 4):+}")
        return "\n".join(lines) + "\n"

    def to_svg(self) -> str:
        return bar_chart_svg(
            {
                f"before (mean {self.mean_before:.2f})": {b: x for b, x, _ in self.rows},
                f"after (mean {self.mean_after:.2f})": {b: y for b, _, y in self.rows},
            },
            title=f"Boxes per image before/after adjustment (delta {round(self.delta, 4):+})",
        )


def distribution_shift_report(before: BoxDistributionStats, after: BoxDistributionStats) -> ShiftReport:
    if before.total_images != after.total_images:
        raise DetkitError(
            f"image counts differ: {before.total_images} before vs {after.total_images} after"
        )
    buckets = sorted(set(before.histogram) | set(after.histogram))
    rows = [(b, before.histogram.get(b, 0), after.histogram.get(b, 0)) for b in buckets]
    return ShiftReport(rows, before.mean_boxes_per_image, after.mean_boxes_per_image)
