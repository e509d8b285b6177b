import pytest

from detkit.detmodel import BBox, Detection, DetectionDataset, GroundTruthAnnotation, ValidationError
from detkit.evaluator import (
    EvalConfig,
    correctness_flags,
    evaluate,
    postprocess_for_visualization,
    pr_curve,
)

from . import oracle
from .synth import oracle_inputs, random_eval_instance, synthetic_dataset

METRICS = ("ap", "ap50", "ap75", "ap_small", "ap_medium", "ap_large", "ar_at_100")


def perfect(ds):
    return [Detection(a.image_id, a.category_id, a.bbox, 1.0) for a in ds.annotations if not a.iscrowd]


def close(a, b, tol=1e-9):
    if a is None or b is None:
        return a is None and b is None
    return abs(a - b) <= tol


def test_perfect_predictions_score_one():
    ds = synthetic_dataset(20, seed=30)
    r = evaluate(perfect(ds), ds)
    for m in ("ap", "ap50", "ap75", "ar_at_100"):
        assert getattr(r, m) == pytest.approx(1.0, abs=1e-12)
    assert r.counts["unmatched_predictions"] == 0 and r.counts["unmatched_gts"] == 0


def test_no_predictions_scores_zero():
    ds = synthetic_dataset(10, seed=31)
    r = evaluate([], ds)
    assert r.ap == 0.0 and r.ar_at_100 == 0.0


def test_empty_strata_are_undefined_not_zero(mini_ds):
    r = evaluate(perfect(mini_ds), mini_ds)
    assert r.ap_small is None  # smallest box is 50x50
    assert r.ap_medium == pytest.approx(1.0) and r.ap_large == pytest.approx(1.0)


def test_category_without_gt_is_undefined(mini_ds):
    anns = tuple(a for a in mini_ds.annotations if a.category_id != 3)
    ds = DetectionDataset(mini_ds.images, anns, mini_ds.categories)
    r = evaluate(perfect(ds), ds)
    assert r.per_category[3] is None and r.ap == pytest.approx(1.0)


def test_unknown_prediction_ids_rejected(mini_ds):
    with pytest.raises(ValidationError):
        evaluate([Detection(99, 1, BBox(0, 0, 5, 5), 0.5)], mini_ds)
    with pytest.raises(ValidationError):
        evaluate([Detection(1, 99, BBox(0, 0, 5, 5), 0.5)], mini_ds)


def test_crowd_annotations_are_excluded(mini_ds):
    crowd = GroundTruthAnnotation(2, 3, BBox(100, 100, 200, 200), 10000.0, True, 9)
    ds = DetectionDataset(mini_ds.images, mini_ds.annotations + (crowd,), mini_ds.categories)
    assert evaluate(perfect(ds), ds).ap == pytest.approx(1.0)


@pytest.mark.parametrize("seed", range(60))
def test_matches_brute_force_oracle(seed):
    ds, preds = random_eval_instance(seed)
    got = evaluate(preds, ds)
    want = oracle.evaluate(*oracle_inputs(ds, preds))
    for m in METRICS:
        assert close(getattr(got, m), want[m]), m
    for c, v in want["per_category"].items():
        assert close(got.per_category[c], v)


def test_max_detections_truncation_matches_oracle():
    ds = synthetic_dataset(3, seed=32, crowd_scenes=1.0)
    preds = []
    for a in ds.annotations:
        b = a.bbox
        for k in range(5):
            preds.append(Detection(a.image_id, a.category_id, BBox(b.x1 + k, b.y1, b.x2 + k, b.y2), (a.id * 7 + k) % 97 / 97))
    got = evaluate(preds, ds)
    want = oracle.evaluate(*oracle_inputs(ds, preds))
    assert close(got.ap, want["ap"]) and close(got.ar_at_100, want["ar_at_100"])


def test_workers_do_not_change_result():
    ds, preds = random_eval_instance(7, max_images=6, max_categories=5)
    a, b = evaluate(preds, ds), evaluate(preds, ds, workers=4)
    assert a.summary() == b.summary() and a.per_category == b.per_category


def test_score_threshold_and_image_scope_options():
    ds = synthetic_dataset(10, seed=33)
    preds = perfect(ds) + [Detection(ds.images[0].image_id, ds.categories.ids[0], BBox(0, 0, 30, 30), 0.1)]
    base = evaluate(preds, ds).ap
    assert evaluate(preds, ds, EvalConfig(score_threshold=0.5)).ap >= base
    assert evaluate(preds, ds, EvalConfig(max_dets_scope="image")).ap == pytest.approx(base)
    with pytest.raises(ValueError):
        EvalConfig(max_dets_scope="dataset")


# pr_curve


def test_pr_curve_tp_then_fp(mini_ds):
    preds = [Detection(2, 3, BBox(0, 0, 50, 50), 0.9), Detection(2, 3, BBox(200, 200, 250, 230), 0.8)]
    curve = pr_curve(preds, mini_ds, 3)
    assert curve.points == [(1.0, 1.0), (1.0, 0.5)]
    assert curve.ap == pytest.approx(1.0)


def test_pr_curve_all_predictions_below_threshold(mini_ds):
    preds = [Detection(2, 3, BBox(0, 0, 20, 20), 0.9)]
    curve = pr_curve(preds, mini_ds, 3)
    assert curve.points == [(0.0, 0.0)]
    assert all(p == 0 for _, p in curve.interpolated)


def test_pr_curve_undefined_without_gt(mini_ds):
    anns = tuple(a for a in mini_ds.annotations if a.category_id != 3)
    assert pr_curve([], DetectionDataset(mini_ds.images, anns, mini_ds.categories), 3) is None


@pytest.mark.parametrize("seed", range(15))
def test_pr_curve_matches_oracle_staircase(seed):
    ds, preds = random_eval_instance(seed)
    images, cats, gts, dets = oracle_inputs(ds, preds)
    gts_by, dets_by = {}, {}
    for g in gts:
        gts_by.setdefault((g["image"], g["cat"]), []).append(g)
    for d in dets:
        dets_by.setdefault((d["image"], d["cat"]), []).append(d)
    for c in cats:
        points, n_gt = oracle.staircase(images, gts_by, dets_by, c, 0.5)
        curve = pr_curve(preds, ds, c)
        if n_gt == 0:
            assert curve is None
            continue
        assert curve.points == pytest.approx(points)
        recalls = [r for r, _ in curve.points]
        assert recalls == sorted(recalls)


# invariants


@pytest.mark.parametrize("seed", range(10))
def test_duplicating_predictions_never_raises_ap(seed):
    ds, preds = random_eval_instance(seed)
    base = evaluate(preds, ds)
    dup = evaluate(preds + preds, ds)
    assert dup.ap is None or dup.ap <= base.ap + 1e-12


@pytest.mark.parametrize("seed", range(10))
def test_scale_invariance_of_all_area_metrics(seed):
    ds, preds = random_eval_instance(seed)
    s = 2.0
    scale = lambda b: BBox(b.x1 * s, b.y1 * s, b.x2 * s, b.y2 * s)  # noqa: E731
    from detkit.detmodel import ImageRecord

    ds2 = DetectionDataset(
        tuple(ImageRecord(im.image_id, im.width * 2, im.height * 2) for im in ds.images),
        tuple(GroundTruthAnnotation(a.image_id, a.category_id, scale(a.bbox), a.area * 4, a.iscrowd, a.id) for a in ds.annotations),
        ds.categories,
    )
    p2 = [Detection(p.image_id, p.category_id, scale(p.bbox), p.score) for p in preds]
    a, b = evaluate(preds, ds), evaluate(p2, ds2)
    for m in ("ap", "ap50", "ap75", "ar_at_100"):
        assert close(getattr(a, m), getattr(b, m), 1e-9)


@pytest.mark.parametrize("seed", range(10))
def test_ap_non_increasing_in_iou_threshold(seed):
    ds, preds = random_eval_instance(seed)
    r = evaluate(preds, ds)
    for k in range(r.precision.shape[2]):
        if r.recall[0, k] < 0:
            continue
        ap_t = r.precision[:, :, k].mean(axis=1)
        assert all(ap_t[i + 1] <= ap_t[i] + 1e-12 for i in range(len(ap_t) - 1))
        assert all(r.recall[i + 1, k] <= r.recall[i, k] for i in range(len(ap_t) - 1))


# correctness flags


def test_flags_example(mini_ds):
    preds = [
        Detection(1, 1, BBox(10, 10, 110, 110), 0.9),  # correct
        Detection(1, 1, BBox(10, 10, 110, 110), 0.8),  # duplicate of the same GT
        Detection(1, 1, BBox(400, 100, 500, 300), 0.7),  # sits on the dog
        Detection(2, 3, BBox(0, 0, 50, 25), 0.6),  # IoU exactly 0.5: not correct
    ]
    f = correctness_flags(preds, mini_ds)
    assert f.predictions == ["correct", "wrong_box", "wrong_label", "wrong_box"]
    assert f.gts == {1: "found", 2: "missed", 3: "missed", 4: "missed"}
    assert f.totals() == {"correct": 1, "wrong_box": 2, "wrong_label": 1, "found": 1, "missed": 3}


def brute_flags(ds, preds):
    """Reference verdicts straight from the rule, with plain loops."""
    flags = ["wrong_box"] * len(preds)
    gt_flags = {}
    for im in ds.images:
        gts = [a for a in ds.annotations if a.image_id == im.image_id and not a.iscrowd]
        for cat in {a.category_id for a in gts} | {p.category_id for p in preds if p.image_id == im.image_id}:
            cg = [a for a in gts if a.category_id == cat]
            cp = sorted(
                [n for n, p in enumerate(preds) if p.image_id == im.image_id and p.category_id == cat],
                key=lambda n: -preds[n].score,
            )
            used = set()
            for n in cp:
                cands = [
                    (oracle.box_iou(_t(preds[n].bbox), _t(a.bbox)), -g)
                    for g, a in enumerate(cg)
                    if g not in used and oracle.box_iou(_t(preds[n].bbox), _t(a.bbox)) > 0.5
                ]
                if cands:
                    _, g = max(cands)
                    used.add(-g)
                    flags[n] = "correct"
                elif any(oracle.box_iou(_t(preds[n].bbox), _t(a.bbox)) > 0.5 for a in gts if a.category_id != cat):
                    flags[n] = "wrong_label"
            for g, a in enumerate(cg):
                gt_flags[a.id] = "found" if g in used else "missed"
    return flags, gt_flags


def _t(b):
    return (b.x1, b.y1, b.x2, b.y2)


@pytest.mark.parametrize("seed", range(25))
def test_flags_match_brute_force(seed):
    ds, preds = random_eval_instance(seed)
    f = correctness_flags(preds, ds)
    flags, gt_flags = brute_flags(ds, preds)
    assert f.predictions == flags and f.gts == gt_flags


# visualisation post-processing


def test_postprocess_drops_low_scores_and_suppresses():
    preds = [
        Detection(1, 1, BBox(0, 0, 10, 10), 0.9),
        Detection(1, 1, BBox(0, 0, 10, 9), 0.8),
        Detection(1, 2, BBox(0, 0, 10, 9), 0.7),
        Detection(1, 1, BBox(50, 50, 60, 60), 0.4),
        Detection(2, 1, BBox(0, 0, 10, 9), 0.5),
    ]
    out = postprocess_for_visualization(preds)
    assert out == [preds[0], preds[2], preds[4]]


def test_postprocess_does_not_touch_metric_inputs(mini_ds):
    preds = perfect(mini_ds)
    before = evaluate(preds, mini_ds).ap
    postprocess_for_visualization(preds, 0.99)
    assert evaluate(preds, mini_ds).ap == before


def test_recall_grid_follows_coco_floats():
    # 7 of 10 boxes found: recall is exactly 0.7, which falls short of the
    # tool's 0.7000000000000001 grid point, so 70 of 101 points are 1.0
    from detkit.detmodel import CategorySet, ImageRecord

    gts = tuple(GroundTruthAnnotation(1, 1, BBox(40 * i, 0, 40 * i + 30, 30), 900.0, False, i + 1) for i in range(10))
    ds = DetectionDataset((ImageRecord(1, 400, 40),), gts, CategorySet.from_names(["a"]))
    preds = [Detection(1, 1, g.bbox, 1.0) for g in gts[:7]]
    r = evaluate(preds, ds, EvalConfig(iou_thresholds=(0.5,)))
    assert r.ap == pytest.approx(70 / 101, abs=1e-12)
    assert r.ar_at_100 == pytest.approx(0.7)
