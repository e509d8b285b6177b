"""COCO-protocol box evaluation: AP@[.50:.95], AP50, AP75, APs/m/l, AR@100.

Follows the reference COCO accumulation (per image/category score ranking,
greedy matching, 101-point interpolation over the precision envelope) with
one deliberate difference: crowd annotations are dropped instead of acting
as ignore regions. Strata without ground truth report ``None`` rather
than zero.
"""

from __future__ import annotations

from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detmodel import Detection, DetectionDataset, GroundTruthAnnotation, Issue, ValidationError
from .geom import greedy_match, iou_matrix, nms

AREA_RANGES = {
    "all": (0.0, 1e10),
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, 1e10),
}


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple[float, ...] = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
    recall_points: int = 101
    max_detections: int = 100
    area_ranges: dict = field(default_factory=lambda: dict(AREA_RANGES))
    score_threshold: float | None = None
    # "image_category" truncates like the COCO tool; "image" keeps the top
    # max_detections across all categories of an image.
    max_dets_scope: str = "image_category"

    def __post_init__(self) -> None:
        t = self.iou_thresholds
        if not t or any(not 0 < x <= 1 for x in t) or any(b <= a for a, b in zip(t, t[1:])):
            raise ValueError("iou_thresholds must be strictly increasing within (0, 1]")
        if self.recall_points < 2:
            raise ValueError("recall_points must be >= 2")
        if self.max_dets_scope not in ("image_category", "image"):
            raise ValueError(f"unknown max_dets_scope {self.max_dets_scope!r}")

    @property
    def recall_thresholds(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.recall_points)

    def threshold_index(self, t: float) -> int | None:
        for i, x in enumerate(self.iou_thresholds):
            if abs(x - t) < 1e-9:
                return i
        return None


@dataclass
class PRCurve:
    category_id: int
    iou_threshold: float
    points: list[tuple[float, float]]  # (recall, precision) after each ranked detection
    interpolated: list[tuple[float, float]]  # (recall threshold, envelope precision)

    @property
    def ap(self) -> float:
        return float(np.mean([p for _, p in self.interpolated]))


@dataclass
class EvalResult:
    ap: float | None
    ap50: float | None
    ap75: float | None
    ap_small: float | None
    ap_medium: float | None
    ap_large: float | None
    ar_at_100: float | None
    per_category: dict[int, float | None]
    counts: dict[str, int]
    # precision[t, r, k] and recall[t, k] for the "all" area range, -1 where undefined
    precision: np.ndarray = field(repr=False, default=None)
    recall: np.ndarray = field(repr=False, default=None)

    def summary(self) -> dict:
        return {
            "AP": self.ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "APs": self.ap_small,
            "APm": self.ap_medium,
            "APl": self.ap_large,
            "AR@100": self.ar_at_100,
        }


@dataclass
class _Ranked:
    """Detections of one category/area across the dataset, in final rank order."""

    scores: np.ndarray  # (D,)
    tp: np.ndarray  # (T, D) bool
    ignore: np.ndarray  # (T, D) bool
    n_gt: int


def _check_ids(preds: Sequence[Detection], ds: DetectionDataset) -> None:
    issues = []
    for n, p in enumerate(preds):
        if p.image_id not in ds.image_index:
            issues.append(Issue("dangling_image_id", f"prediction #{n} -> image {p.image_id}"))
        if p.category_id not in ds.categories:
            issues.append(Issue("dangling_category_id", f"prediction #{n} -> category {p.category_id}"))
    if issues:
        raise ValidationError(issues)


def _group(preds: Sequence[Detection], ds: DetectionDataset, cfg: EvalConfig):
    """Ground truth and truncated, score-sorted detections per (image, category)."""
    gts: dict[tuple[int, int], list[GroundTruthAnnotation]] = defaultdict(list)
    for a in ds.annotations:
        if not a.iscrowd:
            gts[a.image_id, a.category_id].append(a)
    if cfg.score_threshold is not None:
        preds = [p for p in preds if p.score >= cfg.score_threshold]
    by_image: dict[int, list[Detection]] = defaultdict(list)
    for p in preds:
        by_image[p.image_id].append(p)
    dts: dict[tuple[int, int], list[Detection]] = defaultdict(list)
    for image_id, ps in by_image.items():
        ps = sorted(ps, key=lambda p: -p.score)
        if cfg.max_dets_scope == "image":
            ps = ps[: cfg.max_detections]
        for p in ps:
            dts[image_id, p.category_id].append(p)
    if cfg.max_dets_scope == "image_category":
        for key in dts:
            dts[key] = dts[key][: cfg.max_detections]
    return gts, dts


def _match_image(dts, gts, ious, thresholds, lo, hi):
    """COCO matching for one image/category/area: (tp, ignore) arrays of shape (T, D)."""
    T, D = len(thresholds), len(dts)
    g_ignore = [not (lo <= g.area <= hi) for g in gts]
    gorder = sorted(range(len(gts)), key=lambda g: g_ignore[g])
    tp = np.zeros((T, D), dtype=bool)
    ignore = np.zeros((T, D), dtype=bool)
    d_out = [not (lo <= d.bbox.area <= hi) for d in dts]
    for ti, t in enumerate(thresholds):
        taken = [False] * len(gts)
        for d in range(D):
            best, best_iou = -1, -1.0
            for g in gorder:
                if taken[g]:
                    continue
                if best >= 0 and not g_ignore[best] and g_ignore[g]:
                    break
                v = ious[d, g]
                if v >= t and v > best_iou:
                    best, best_iou = g, v
            if best < 0:
                ignore[ti, d] = d_out[d]
            else:
                taken[best] = True
                if g_ignore[best]:
                    ignore[ti, d] = True
                else:
                    tp[ti, d] = True
    return tp, ignore


def _rank_category(cat: int, image_ids: list[int], gts, dts, cfg: EvalConfig) -> dict[str, _Ranked]:
    T = len(cfg.iou_thresholds)
    parts: dict[str, list] = {a: [] for a in cfg.area_ranges}
    n_gt = Counter()
    for image_id in image_ids:
        g = gts.get((image_id, cat), [])
        d = dts.get((image_id, cat), [])
        if not g and not d:
            continue
        ious = iou_matrix([x.bbox for x in d], [x.bbox for x in g])
        scores = np.array([x.score for x in d], dtype=np.float64)
        for area, (lo, hi) in cfg.area_ranges.items():
            tp, ign = _match_image(d, g, ious, cfg.iou_thresholds, lo, hi)
            parts[area].append((scores, tp, ign))
            n_gt[area] += sum(1 for x in g if lo <= x.area <= hi)
    out = {}
    for area, ps in parts.items():
        if ps:
            scores = np.concatenate([p[0] for p in ps])
            tp = np.concatenate([p[1] for p in ps], axis=1)
            ign = np.concatenate([p[2] for p in ps], axis=1)
        else:
            scores, tp, ign = np.zeros(0), np.zeros((T, 0), bool), np.zeros((T, 0), bool)
        order = np.argsort(-scores, kind="mergesort")
        out[area] = _Ranked(scores[order], tp[:, order], ign[:, order], n_gt[area])
    return out


def _pr_arrays(r: _Ranked, t: int) -> tuple[np.ndarray, np.ndarray]:
    tp = np.cumsum(r.tp[t] & ~r.ignore[t]).astype(np.float64)
    fp = np.cumsum(~r.tp[t] & ~r.ignore[t]).astype(np.float64)
    rc = tp / r.n_gt
    denom = tp + fp
    pr = np.divide(tp, denom, out=np.zeros_like(tp), where=denom > 0)
    return rc, pr


def _interpolate(rc: np.ndarray, pr: np.ndarray, rec_thrs: np.ndarray) -> np.ndarray:
    env = np.maximum.accumulate(pr[::-1])[::-1] if len(pr) else pr
    idx = np.searchsorted(rc, rec_thrs, side="left")
    q = np.zeros(len(rec_thrs))
    ok = idx < len(env)
    q[ok] = env[idx[ok]]
    return q


def _accumulate(ranked: _Ranked, cfg: EvalConfig) -> tuple[np.ndarray, np.ndarray]:
    """precision (T, R) and recall (T,), -1 when the stratum has no ground truth."""
    T, R = len(cfg.iou_thresholds), cfg.recall_points
    if ranked.n_gt == 0:
        return -np.ones((T, R)), -np.ones(T)
    precision = np.zeros((T, R))
    recall = np.zeros(T)
    rec_thrs = cfg.recall_thresholds
    for t in range(T):
        rc, pr = _pr_arrays(ranked, t)
        recall[t] = rc[-1] if len(rc) else 0.0
        precision[t] = _interpolate(rc, pr, rec_thrs)
    return precision, recall


def _mean_defined(x: np.ndarray) -> float | None:
    x = x[x > -1]
    return float(np.mean(x)) if x.size else None


def evaluate(
    preds: Sequence[Detection],
    ds: DetectionDataset,
    cfg: EvalConfig | None = None,
    workers: int = 1,
) -> EvalResult:
    cfg = cfg or EvalConfig()
    _check_ids(preds, ds)
    gts, dts = _group(preds, ds, cfg)
    image_ids = [im.image_id for im in ds.images]
    cats = ds.categories.ids
    T, R, K = len(cfg.iou_thresholds), cfg.recall_points, len(cats)
    areas = list(cfg.area_ranges)
    precision = -np.ones((T, R, K, len(areas)))
    recall = -np.ones((T, K, len(areas)))

    def one(cat: int):
        return _rank_category(cat, image_ids, gts, dts, cfg)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            ranked = list(pool.map(one, cats))
    else:
        ranked = [one(c) for c in cats]

    counts = Counter()
    i50 = cfg.threshold_index(0.5)
    for k, per_area in enumerate(ranked):
        for a, area in enumerate(areas):
            precision[:, :, k, a], recall[:, k, a] = _accumulate(per_area[area], cfg)
        if i50 is not None and "all" in per_area:
            r = per_area["all"]
            live = ~r.ignore[i50]
            tp = int((r.tp[i50] & live).sum())
            counts["matched"] += tp
            counts["unmatched_predictions"] += int((~r.tp[i50] & live).sum())
            counts["unmatched_gts"] += r.n_gt - tp

    def ap(area: str, t: float | None = None) -> float | None:
        if area not in areas:
            return None
        p = precision[..., areas.index(area)]
        if t is not None:
            i = cfg.threshold_index(t)
            if i is None:
                return None
            p = p[i]
        return _mean_defined(p)

    a_all = areas.index("all")
    return EvalResult(
        ap=ap("all"),
        ap50=ap("all", 0.5),
        ap75=ap("all", 0.75),
        ap_small=ap("small"),
        ap_medium=ap("medium"),
        ap_large=ap("large"),
        ar_at_100=_mean_defined(recall[:, :, a_all]),
        per_category={c: _mean_defined(precision[:, :, k, a_all]) for k, c in enumerate(cats)},
        counts=dict(counts),
        precision=precision[..., a_all],
        recall=recall[..., a_all],
    )


def pr_curve(
    preds: Sequence[Detection],
    ds: DetectionDataset,
    category: int,
    iou_threshold: float = 0.5,
    cfg: EvalConfig | None = None,
) -> PRCurve | None:
    """Raw PR staircase and 101-point envelope; ``None`` when the category has no GT."""
    cfg = cfg or EvalConfig()
    if category not in ds.categories:
        raise ValidationError([Issue("unknown_category", str(category))])
    _check_ids(preds, ds)
    one_t = EvalConfig(
        iou_thresholds=(iou_threshold,),
        recall_points=cfg.recall_points,
        max_detections=cfg.max_detections,
        area_ranges={"all": cfg.area_ranges["all"]},
        score_threshold=cfg.score_threshold,
        max_dets_scope=cfg.max_dets_scope,
    )
    gts, dts = _group(preds, ds, one_t)
    r = _rank_category(category, [im.image_id for im in ds.images], gts, dts, one_t)["all"]
    if r.n_gt == 0:
        return None
    rc, pr = _pr_arrays(r, 0)
    live = ~r.ignore[0]
    points = [(float(x), float(y)) for x, y, keep in zip(rc, pr, live) if keep]
    q = _interpolate(rc, pr, one_t.recall_thresholds)
    return PRCurve(category, iou_threshold, points, [(float(x), float(y)) for x, y in zip(one_t.recall_thresholds, q)])


@dataclass
class CorrectnessFlags:
    predictions: list[str]  # per input prediction: correct | wrong_box | wrong_label
    gts: dict[int, str]  # annotation id -> found | missed

    def totals(self) -> dict[str, int]:
        c = Counter(self.predictions)
        g = Counter(self.gts.values())
        return {k: c.get(k, 0) for k in ("correct", "wrong_box", "wrong_label")} | {
            k: g.get(k, 0) for k in ("found", "missed")
        }


def correctness_flags(preds: Sequence[Detection], ds: DetectionDataset, iou_threshold: float = 0.5) -> CorrectnessFlags:
    """Per-box verdicts: correct needs IoU strictly above 0.5 and the right label.

    Matching is greedy by score within each image/category. A prediction left
    unmatched is ``wrong_label`` if it overlaps (IoU > threshold) a GT box of
    another category, otherwise ``wrong_box``.
    """
    _check_ids(preds, ds)
    flags = ["wrong_box"] * len(preds)
    gt_flags: dict[int, str] = {}
    by_image: dict[int, list[int]] = defaultdict(list)
    for n, p in enumerate(preds):
        by_image[p.image_id].append(n)
    for im in ds.images:
        gts = [a for a in ds.image_annotations(im.image_id) if not a.iscrowd]
        pidx = by_image.get(im.image_id, [])
        for cat in {a.category_id for a in gts} | {preds[n].category_id for n in pidx}:
            cp = [n for n in pidx if preds[n].category_id == cat]
            cg = [a for a in gts if a.category_id == cat]
            m = greedy_match([preds[n] for n in cp], cg, iou_threshold, strict=True)
            for p, g, _ in m.pairs:
                flags[cp[p]] = "correct"
                gt_flags[cg[g].id] = "found"
            for g in m.unmatched_gts:
                gt_flags[cg[g].id] = "missed"
            for p in m.unmatched_predictions:
                others = [a for a in gts if a.category_id != cat]
                if others:
                    ious = iou_matrix([preds[cp[p]].bbox], [a.bbox for a in others])
                    if (ious > iou_threshold).any():
                        flags[cp[p]] = "wrong_label"
    return CorrectnessFlags(flags, gt_flags)


def postprocess_for_visualization(
    preds: Sequence[Detection], score_threshold: float = 0.5, iou_threshold: float = 0.5
) -> list[Detection]:
    """Drop low scores, then class-wise NMS per image. Display only; metrics use raw predictions."""
    by_image: dict[int, list[Detection]] = {}
    for p in preds:
        if p.score >= score_threshold:
            by_image.setdefault(p.image_id, []).append(p)
    out: list[Detection] = []
    for ps in by_image.values():
        out += nms(ps, iou_threshold, class_wise=True)
    return out
