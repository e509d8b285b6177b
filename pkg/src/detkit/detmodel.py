"""Detection domain types and COCO-style annotation ingestion."""

from __future__ import annotations

import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)


class DetkitError(Exception):
    """Base class for toolkit errors."""


class AnnotationParseError(DetkitError):
    def __init__(self, path: str | Path, offset: int, reason: str):
        self.path = str(path)
        self.offset = offset
        self.reason = reason
        super().__init__(f"{self.path}: byte {offset}: {reason}")


class ValidationError(DetkitError):
    def __init__(self, issues: Sequence["Issue"]):
        self.issues = list(issues)
        head = "; ".join(str(i) for i in self.issues[:5])
        more = f" (+{len(self.issues) - 5} more)" if len(self.issues) > 5 else ""
        super().__init__(f"{len(self.issues)} validation issue(s): {head}{more}")


class EmptyInputError(DetkitError):
    pass


class DegenerateBoxError(DetkitError, ValueError):
    pass


@dataclass(frozen=True, slots=True)
class BBox:
    """Axis-aligned box in absolute pixel corner coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> BBox:
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    def to_xywh(self) -> list[float]:
        return [self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1]

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    @property
    def is_degenerate(self) -> bool:
        return not (self.x2 > self.x1 and self.y2 > self.y1)

    def clamp(self, width: float, height: float) -> BBox:
        return BBox(
            min(max(self.x1, 0.0), width),
            min(max(self.y1, 0.0), height),
            min(max(self.x2, 0.0), width),
            min(max(self.y2, 0.0), height),
        )


@dataclass(frozen=True, slots=True)
class GroundTruthAnnotation:
    image_id: int
    category_id: int
    bbox: BBox
    area: float
    iscrowd: bool = False
    id: int = 0


@dataclass(frozen=True, slots=True)
class ScoredAnnotation(GroundTruthAnnotation):
    """Annotation carrying a confidence score and where it came from."""

    score: float = 1.0
    origin: str = "ground_truth"  # or "pseudo"


@dataclass(frozen=True, slots=True)
class Detection:
    image_id: int
    category_id: int
    bbox: BBox
    score: float


@dataclass(frozen=True, slots=True)
class ImageRecord:
    image_id: int
    width: int
    height: int
    file_name: str = ""


@dataclass(frozen=True)
class CategorySet:
    """Ordered (id, name) pairs. Order is the file order and never resorted."""

    items: tuple[tuple[int, str], ...]

    def __post_init__(self) -> None:
        ids = [i for i, _ in self.items]
        names = [n for _, n in self.items]
        if len(set(ids)) != len(ids):
            raise ValidationError([Issue("duplicate_category_id", str(k)) for k, c in Counter(ids).items() if c > 1])
        if len(set(names)) != len(names):
            raise ValidationError([Issue("duplicate_category_name", k) for k, c in Counter(names).items() if c > 1])

    @classmethod
    def from_names(cls, names: Iterable[str], start: int = 1) -> CategorySet:
        return cls(tuple((start + i, n) for i, n in enumerate(names)))

    @property
    def ids(self) -> list[int]:
        return [i for i, _ in self.items]

    @cached_property
    def _names(self) -> dict[int, str]:
        return dict(self.items)

    @cached_property
    def _ids_by_name(self) -> dict[str, int]:
        return {n: i for i, n in self.items}

    def name(self, category_id: int) -> str:
        return self._names[category_id]

    def id_of(self, name: str) -> int:
        return self._ids_by_name[name]

    def __contains__(self, category_id: object) -> bool:
        return category_id in self._names

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)


@dataclass(frozen=True)
class DetectionDataset:
    images: tuple[ImageRecord, ...]
    annotations: tuple[GroundTruthAnnotation, ...]
    categories: CategorySet
    warnings: tuple[str, ...] = field(default=(), compare=False)

    @cached_property
    def image_index(self) -> dict[int, ImageRecord]:
        return {im.image_id: im for im in self.images}

    @cached_property
    def annotations_by_image(self) -> dict[int, list[GroundTruthAnnotation]]:
        out: dict[int, list[GroundTruthAnnotation]] = defaultdict(list)
        for ann in self.annotations:
            out[ann.image_id].append(ann)
        return out

    def image_annotations(self, image_id: int) -> list[GroundTruthAnnotation]:
        return self.annotations_by_image.get(image_id, [])


@dataclass(frozen=True)
class BoxDistributionStats:
    total_images: int
    total_boxes: int
    mean_boxes_per_image: float
    histogram: dict[int, int]

    def to_csv(self) -> str:
        lines = [
            f"# images={self.total_images},boxes={self.total_boxes},"
            f"mean_boxes_per_image={self.mean_boxes_per_image:.4f}",
            "bucket,count",
        ]
        lines += [f"{b},{c}" for b, c in sorted(self.histogram.items())]
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class Issue:
    kind: str
    record: str

    def __str__(self) -> str:
        return f"{self.kind}: {self.record}"


def _parse_json_file(path: Path):
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise AnnotationParseError(path, exc.start, "not valid UTF-8") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise AnnotationParseError(path, offset, exc.msg) from exc


def _require(doc: dict, key: str, path: Path, kind: type = list):
    if key not in doc:
        raise AnnotationParseError(path, 0, f"missing top-level key {key!r}")
    value = doc[key]
    if not isinstance(value, kind):
        raise AnnotationParseError(path, 0, f"{key!r} must be a {kind.__name__}")
    return value


def load_coco_json(path: str | Path) -> DetectionDataset:
    """Load a COCO-style annotation document.

    Boxes are converted from ``[x, y, w, h]`` to corners and clamped to the
    image. Records that are degenerate after clamping are dropped and counted
    in ``DetectionDataset.warnings``. Annotations carrying a ``score`` field
    (as written by ``merge-pseudo``) come back as :class:`ScoredAnnotation`.
    """
    path = Path(path)
    doc = _parse_json_file(path)
    if not isinstance(doc, dict):
        raise AnnotationParseError(path, 0, "top-level value must be an object")
    raw_images = _require(doc, "images", path)
    raw_anns = _require(doc, "annotations", path)
    raw_cats = _require(doc, "categories", path)

    try:
        categories = CategorySet(tuple((int(c["id"]), str(c["name"])) for c in raw_cats))
        images = tuple(
            ImageRecord(int(im["id"]), int(im["width"]), int(im["height"]), str(im.get("file_name", "")))
            for im in raw_images
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationParseError(path, 0, f"bad image/category record: {exc!r}") from exc

    index = {im.image_id: im for im in images}
    dangling: list[Issue] = []
    anns: list[GroundTruthAnnotation] = []
    dropped = 0
    for n, a in enumerate(raw_anns):
        try:
            image_id = int(a["image_id"])
            category_id = int(a["category_id"])
            x, y, w, h = (float(v) for v in a["bbox"])
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationParseError(path, 0, f"bad annotation #{n}: {exc!r}") from exc
        ann_id = int(a.get("id", n))
        if image_id not in index:
            dangling.append(Issue("dangling_image_id", f"annotation {ann_id} -> image {image_id}"))
            continue
        if category_id not in categories:
            dangling.append(Issue("dangling_category_id", f"annotation {ann_id} -> category {category_id}"))
            continue
        im = index[image_id]
        box = BBox.from_xywh(x, y, w, h).clamp(im.width, im.height)
        if box.is_degenerate:
            dropped += 1
            continue
        area = float(a.get("area") or 0.0)
        if area <= 0:
            area = box.area
        common = dict(
            image_id=image_id,
            category_id=category_id,
            bbox=box,
            area=area,
            iscrowd=bool(a.get("iscrowd", 0)),
            id=ann_id,
        )
        if "score" in a:
            anns.append(ScoredAnnotation(**common, score=float(a["score"]), origin=str(a.get("origin", "ground_truth"))))
        else:
            anns.append(GroundTruthAnnotation(**common))
    if dangling:
        raise ValidationError(dangling)

    warnings: tuple[str, ...] = ()
    if dropped:
        logger.warning("%s: dropped %d degenerate box(es) after clamping", path, dropped)
        warnings = ("degenerate box dropped",) * dropped
    ds = DetectionDataset(images, tuple(anns), categories, warnings)
    issues = validate(ds)
    if issues:
        raise ValidationError(issues)
    return ds


def dataset_to_coco(ds: DetectionDataset) -> dict:
    """Inverse of :func:`load_coco_json` (scored annotations keep score/origin)."""
    anns = []
    for a in ds.annotations:
        rec = {
            "id": a.id,
            "image_id": a.image_id,
            "category_id": a.category_id,
            "bbox": a.bbox.to_xywh(),
            "area": a.area,
            "iscrowd": int(a.iscrowd),
        }
        if isinstance(a, ScoredAnnotation):
            rec["score"] = a.score
            rec["origin"] = a.origin
        anns.append(rec)
    return {
        "images": [
            {"id": im.image_id, "width": im.width, "height": im.height, "file_name": im.file_name}
            for im in ds.images
        ],
        "annotations": anns,
        "categories": [{"id": i, "name": n} for i, n in ds.categories],
    }


def validate(ds: DetectionDataset) -> list[Issue]:
    """Every invariant violation in ``ds``; empty iff the dataset is valid."""
    issues: list[Issue] = []
    seen: set[int] = set()
    for im in ds.images:
        if im.image_id in seen:
            issues.append(Issue("duplicate_image_id", f"image {im.image_id}"))
        seen.add(im.image_id)
        if im.width <= 0 or im.height <= 0:
            issues.append(Issue("bad_image_size", f"image {im.image_id} ({im.width}x{im.height})"))
    index = ds.image_index
    for a in ds.annotations:
        who = f"annotation {a.id} (image {a.image_id})"
        if a.image_id not in index:
            issues.append(Issue("dangling_image_id", who))
        if a.category_id not in ds.categories:
            issues.append(Issue("dangling_category_id", f"{who} category {a.category_id}"))
        if a.bbox.is_degenerate:
            issues.append(Issue("degenerate_box", who))
        elif a.image_id in index:
            im = index[a.image_id]
            b = a.bbox
            if b.x1 < 0 or b.y1 < 0 or b.x2 > im.width or b.y2 > im.height:
                issues.append(Issue("box_outside_image", who))
        if not a.area > 0:
            issues.append(Issue("non_positive_area", who))
        score = getattr(a, "score", 1.0)
        if not 0.0 <= score <= 1.0:
            issues.append(Issue("score_out_of_range", who))
    return issues


def dataset_stats(ds: DetectionDataset) -> BoxDistributionStats:
    """Boxes-per-image distribution over all images, empty ones included.

    Crowd annotations are counted; that is the convention under which the
    public COCO 2017 files give 860,001 boxes and 7.3 boxes per image.
    """
    if not ds.images:
        raise EmptyInputError("dataset has no images")
    counts = Counter(a.image_id for a in ds.annotations)
    histogram = Counter(counts.get(im.image_id, 0) for im in ds.images)
    total = sum(counts.get(im.image_id, 0) for im in ds.images)
    return BoxDistributionStats(
        total_images=len(ds.images),
        total_boxes=total,
        mean_boxes_per_image=total / len(ds.images),
        histogram=dict(sorted(histogram.items())),
    )


@dataclass
class LoadedResults:
    detections: list[Detection]
    warnings: list[str] = field(default_factory=list)


def load_results(path: str | Path, ds: DetectionDataset, unknown_category: str = "error") -> LoadedResults:
    """Read a COCO results document (``[{image_id, category_id, bbox, score}]``).

    Boxes are clamped like ground truth. Unknown image ids always raise
    :class:`ValidationError`; unknown categories raise too unless
    ``unknown_category="drop"``. Out-of-range scores and boxes that are empty
    after clamping are dropped with a warning.
    """
    path = Path(path)
    doc = _parse_json_file(path)
    if not isinstance(doc, list):
        raise AnnotationParseError(path, 0, "results document must be a list")
    dets: list[Detection] = []
    warnings: list[str] = []
    dangling: list[Issue] = []
    for n, r in enumerate(doc):
        try:
            image_id = int(r["image_id"])
            category_id = int(r["category_id"])
            x, y, w, h = (float(v) for v in r["bbox"])
            score = float(r["score"])
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationParseError(path, 0, f"bad result #{n}: {exc!r}") from exc
        im = ds.image_index.get(image_id)
        if im is None:
            dangling.append(Issue("dangling_image_id", f"result #{n} -> image {image_id}"))
            continue
        if category_id not in ds.categories:
            if unknown_category == "drop":
                warnings.append(f"result #{n}: category {category_id} not in dataset, dropped")
            else:
                dangling.append(Issue("dangling_category_id", f"result #{n} -> category {category_id}"))
            continue
        if not 0.0 <= score <= 1.0:
            warnings.append(f"result #{n}: score {score} outside [0, 1], rejected")
            continue
        box = BBox.from_xywh(x, y, w, h).clamp(im.width, im.height)
        if box.is_degenerate:
            warnings.append(f"result #{n}: empty box after clamping, rejected")
            continue
        dets.append(Detection(image_id, category_id, box, score))
    if dangling:
        raise ValidationError(dangling)
    for w in warnings:
        logger.warning("%s: %s", path, w)
    return LoadedResults(dets, warnings)


def results_to_coco(dets: Iterable[Detection]) -> list[dict]:
    return [
        {"image_id": d.image_id, "category_id": d.category_id, "bbox": d.bbox.to_xywh(), "score": d.score}
        for d in dets
    ]
