import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from detkit.detmodel import BBox, DegenerateBoxError, Detection, GroundTruthAnnotation
from detkit.geom import greedy_match, iou, iou_matrix, nms

from .oracle import box_iou, nms_keep


def det(x1, y1, x2, y2, score=0.5, cat=1, image=1):
    return Detection(image, cat, BBox(x1, y1, x2, y2), score)


def gt(x1, y1, x2, y2, cat=1, image=1):
    b = BBox(x1, y1, x2, y2)
    return GroundTruthAnnotation(image, cat, b, b.area)


def random_box(rng, size=100.0):
    x, y = rng.uniform(0, size), rng.uniform(0, size)
    return BBox(x, y, x + rng.uniform(1, size / 2), y + rng.uniform(1, size / 2))


def as_tuple(b):
    return (b.x1, b.y1, b.x2, b.y2)


def test_iou_identical():
    assert iou(BBox(0, 0, 2, 2), BBox(0, 0, 2, 2)) == 1.0


def test_iou_disjoint_and_touching():
    assert iou(BBox(0, 0, 1, 1), BBox(5, 5, 6, 6)) == 0.0
    assert iou(BBox(0, 0, 1, 1), BBox(1, 0, 2, 1)) == 0.0


def test_iou_partial_overlap():
    # intersection 1, union 4 + 4 - 1
    assert iou(BBox(0, 0, 2, 2), BBox(1, 1, 3, 3)) == pytest.approx(1 / 7, abs=1e-12)


def test_iou_degenerate_raises():
    with pytest.raises(DegenerateBoxError):
        iou(BBox(0, 0, 0, 2), BBox(0, 0, 1, 1))


box_st = st.tuples(
    st.floats(0, 100), st.floats(0, 100), st.floats(0.5, 50), st.floats(0.5, 50)
).map(lambda t: BBox(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(box_st, box_st)
def test_iou_symmetric_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert iou(a, a) == pytest.approx(1.0)


@given(box_st, box_st, st.floats(-100, 100), st.floats(-100, 100), st.sampled_from([0.5, 2.0, 4.0]))
def test_iou_translation_and_scale_invariant(a, b, dx, dy, s):
    shift = lambda x: BBox(x.x1 + dx, x.y1 + dy, x.x2 + dx, x.y2 + dy)  # noqa: E731
    scale = lambda x: BBox(x.x1 * s, x.y1 * s, x.x2 * s, x.y2 * s)  # noqa: E731
    assert iou(shift(a), shift(b)) == pytest.approx(iou(a, b), abs=1e-9)
    assert iou(scale(a), scale(b)) == pytest.approx(iou(a, b), abs=1e-12)


def test_iou_matrix_matches_scalar():
    rng = random.Random(1)
    a = [random_box(rng) for _ in range(6)]
    b = [random_box(rng) for _ in range(4)]
    m = iou_matrix(a, b)
    for i, j in itertools.product(range(6), range(4)):
        assert m[i, j] == iou(a[i], b[j])


# nms


def test_nms_keeps_dominant_box():
    a = det(0, 0, 10, 10, 0.9)
    b = det(0, 0, 10, 8, 0.7)  # IoU 0.8
    assert iou(a.bbox, b.bbox) == pytest.approx(0.8)
    assert nms([b, a], 0.5) == [a]


def test_nms_class_wise_keeps_other_class():
    a = det(0, 0, 10, 10, 0.9, cat=1)
    b = det(0, 0, 10, 8, 0.7, cat=2)
    assert nms([a, b], 0.5, class_wise=True) == [a, b]
    assert nms([a, b], 0.5, class_wise=False) == [a]


def test_nms_empty():
    assert nms([], 0.5) == []


@pytest.mark.parametrize("seed", range(25))
def test_nms_matches_brute_force(seed):
    rng = random.Random(seed)
    dets = [det(*as_tuple(random_box(rng)), rng.random(), cat=rng.randint(1, 3)) for _ in range(20)]
    kept = nms(dets, 0.5)
    expected = nms_keep([as_tuple(d.bbox) for d in dets], [d.score for d in dets], [d.category_id for d in dets], 0.5)
    assert kept == [dets[i] for i in expected]


@settings(max_examples=50)
@given(st.lists(box_st, min_size=1, max_size=15), st.randoms(use_true_random=False))
def test_nms_order_invariant_and_sound(boxes, r):
    dets = [det(*as_tuple(b), score=(i + 1) / 100, cat=i % 2) for i, b in enumerate(boxes)]
    kept = nms(dets, 0.5)
    shuffled = dets[:]
    r.shuffle(shuffled)
    assert nms(shuffled, 0.5) == kept
    scores = [d.score for d in kept]
    assert scores == sorted(scores, reverse=True)
    for a, b in itertools.combinations(kept, 2):
        assert a.category_id != b.category_id or iou(a.bbox, b.bbox) <= 0.5
    for d in dets:
        if d not in kept:
            assert any(k.category_id == d.category_id and k.score >= d.score and iou(k.bbox, d.bbox) > 0.5 for k in kept)


def test_nms_equal_scores_keep_input_order():
    a = det(0, 0, 10, 10, 0.5)
    b = det(0, 0, 10, 10, 0.5)
    assert nms([a, b], 0.5)[0] is a
    assert nms([b, a], 0.5)[0] is b


# greedy_match


def test_match_exact_pair():
    m = greedy_match([det(0, 0, 10, 10)], [gt(0, 0, 10, 10)], 0.5)
    assert m.pairs == [(0, 0, 1.0)]
    assert m.unmatched_predictions == [] and m.unmatched_gts == []


def test_match_two_preds_one_gt():
    preds = [det(0, 0, 10, 9, 0.6), det(0, 0, 10, 10, 0.9)]
    m = greedy_match(preds, [gt(0, 0, 10, 10)], 0.5)
    assert [(p, g) for p, g, _ in m.pairs] == [(1, 0)]
    assert m.unmatched_predictions == [0]


def test_match_equal_iou_goes_to_lower_gt_index():
    m = greedy_match([det(5, 0, 15, 10)], [gt(0, 0, 10, 10), gt(10, 0, 20, 10)], 0.3)
    assert m.pairs[0][1] == 0


def test_match_threshold_inclusive_unless_strict():
    p, g = det(0, 0, 10, 10), gt(0, 0, 10, 5)  # IoU exactly 0.5
    assert len(greedy_match([p], [g], 0.5).pairs) == 1
    assert greedy_match([p], [g], 0.5, strict=True).pairs == []


def exhaustive_greedy(preds, gts, thr):
    """Enumerate every injective partial assignment and keep the lexicographic best.

    Walking predictions in score order, the greedy rule maximises each
    prediction's IoU (lowest GT index on ties) given the earlier choices, which
    is exactly the lexicographic maximum of (iou, -gt index) per prediction.
    """
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    best_key, best = None, None
    choices = list(range(len(gts))) + [None]
    for assign in itertools.product(choices, repeat=len(preds)):
        used = [g for g in assign if g is not None]
        if len(used) != len(set(used)):
            continue
        key = []
        ok = True
        for p in order:
            g = assign[p]
            if g is None:
                key += [-1.0, 0]
                continue
            v = box_iou(as_tuple(preds[p].bbox), as_tuple(gts[g].bbox))
            if v < thr:
                ok = False
                break
            key += [v, -g]
        if ok and (best_key is None or key > best_key):
            best_key, best = key, assign
    return sorted((p, g) for p, g in enumerate(best) if g is not None)


@pytest.mark.parametrize("seed", range(40))
def test_match_equals_exhaustive_enumeration(seed):
    rng = random.Random(seed)
    gts = [gt(*as_tuple(random_box(rng, 40))) for _ in range(3)]
    preds = []
    for _ in range(4):
        base = rng.choice(gts).bbox
        j = lambda: rng.uniform(-2.5, 2.5)  # noqa: E731
        preds.append(det(base.x1 + j(), base.y1 + j(), base.x2 + j() + 5, base.y2 + j() + 5, rng.random()))
    m = greedy_match(preds, gts, 0.3)
    assert sorted((p, g) for p, g, _ in m.pairs) == exhaustive_greedy(preds, gts, 0.3)
    assert len(m.pairs) <= min(len(preds), len(gts))
    assert all(v >= 0.3 for _, _, v in m.pairs)
