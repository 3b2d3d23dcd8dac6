import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from darcnn.core import InstancePrediction
from darcnn.errors import ModeError, ShapeError
from darcnn.eval import (
    aji, aji_counts, label_map_instances, max_iou, object_counts, object_f1, pixel_f1,
    resolve_overlaps, rule_filter, score_instances,
)

# --------------------------------------------------------------------------
# brute-force oracles on pixel sets
# --------------------------------------------------------------------------


def _sets(stack):
    return [frozenset(zip(*np.nonzero(m))) for m in stack]


def _iou(a, b):
    return len(a & b) / len(a | b) if a | b else 0.0


def _assignments(n_gt, n_pred):
    """Every partial one-to-one map from ground truths to predictions."""
    options = [None] + list(range(n_pred))
    for combo in itertools.product(options, repeat=n_gt):
        used = [j for j in combo if j is not None]
        if len(used) == len(set(used)):
            yield combo


def _aji_oracle(gt, pred):
    g, p = _sets(gt), _sets(pred)
    if not g and not p:
        return 1.0
    if not g or not p:
        return 0.0

    def best_first(combo):
        # each ground truth, in order, holds the lowest-index free prediction
        # of maximal IoU, or nothing when every free prediction misses it
        for i, j in enumerate(combo):
            free = [q for q in range(len(p)) if q not in combo[:i]]
            ious = [_iou(g[i], p[q]) for q in free]
            if not any(ious):
                if j is not None:
                    return False
            elif j != free[ious.index(max(ious))]:
                return False
        return True

    chosen = [c for c in _assignments(len(g), len(p)) if best_first(c)]
    assert len(chosen) == 1
    combo = chosen[0]
    c = u = 0
    for i, j in enumerate(combo):
        if j is None:
            u += len(g[i])
        else:
            c += len(g[i] & p[j])
            u += len(g[i] | p[j])
    u += sum(len(p[q]) for q in range(len(p)) if q not in combo)
    return c / u


def _pixel_f1_oracle(gt, pred):
    gu = set().union(*_sets(gt)) if len(gt) else set()
    pu = set().union(*_sets(pred)) if len(pred) else set()
    tp, fp, fn = len(gu & pu), len(pu - gu), len(gu - pu)
    if not gu and not pu:
        return 1.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


def _object_f1_oracle(gt, pred, thr=0.5):
    g, p = _sets(gt), _sets(pred)
    if not g and not p:
        return 1.0
    tp = max(sum(1 for i, j in enumerate(c) if j is not None and _iou(g[i], p[j]) >= thr)
             for c in _assignments(len(g), len(p)))
    prec = tp / len(p) if p else 0.0
    rec = tp / len(g) if g else 0.0
    return 2 * prec * rec / (prec + rec) if prec + rec else 0.0


def _tables(total=9, cells=9):
    """All ways to distribute ``total`` pixels over ``cells`` label pairs."""
    for bars in itertools.combinations(range(total + cells - 1), cells - 1):
        edges = (-1,) + bars + (total + cells - 1,)
        yield [edges[k + 1] - edges[k] - 1 for k in range(cells)]


def _configuration(table):
    """Concrete 3x3 gt/pred label maps realising a (gt label, pred label) count table."""
    g = np.zeros(9, np.uint8)
    p = np.zeros(9, np.uint8)
    pos = 0
    for cell, n in enumerate(table):
        g[pos:pos + n], p[pos:pos + n] = divmod(cell, 3)
        pos += n
    return label_map_instances(g.reshape(3, 3)), label_map_instances(p.reshape(3, 3))


def test_metrics_match_brute_force_on_every_3x3_configuration():
    n = 0
    for table in _tables():
        gt, pred = _configuration(table)
        got_aji = aji(gt, pred)
        assert got_aji == pytest.approx(_aji_oracle(gt, pred), abs=1e-12), table
        assert pixel_f1(gt.any(0) if len(gt) else np.zeros((3, 3), bool),
                        pred.any(0) if len(pred) else np.zeros((3, 3), bool)) == \
            pytest.approx(_pixel_f1_oracle(gt, pred), abs=1e-12), table
        assert object_f1(gt, pred) == pytest.approx(_object_f1_oracle(gt, pred), abs=1e-12), table
        # AJI is 1 exactly when both sides are the same pixel partition
        assert got_aji <= 1.0
        assert (got_aji == 1.0) == (sorted(_sets(gt), key=sorted) == sorted(_sets(pred), key=sorted))
        n += 1
    assert n == 24310


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 24309), st.permutations(range(9)))
def test_metrics_ignore_pixel_arrangement(index, perm):
    table = next(itertools.islice(_tables(), index, None))
    gt, pred = _configuration(table)
    flat = lambda s: s.reshape(len(s), 9)[:, list(perm)].reshape(len(s), 3, 3)  # noqa: E731
    assert aji(flat(gt), flat(pred)) == aji(gt, pred)
    assert object_f1(flat(gt), flat(pred)) == object_f1(gt, pred)


def _square(y0, x0, h, w, shape=(8, 8)):
    m = np.zeros(shape, bool)
    m[y0:y0 + h, x0:x0 + w] = True
    return m


def test_aji_toy_case():
    gt = [_square(2, 2, 2, 2)]
    pred = [_square(2, 2, 1, 2)]
    assert aji_counts(gt, pred) == (2, 4)
    assert aji(gt, pred) == 0.5


def test_aji_examples():
    gt = [_square(0, 0, 2, 2), _square(4, 4, 3, 3)]
    assert aji(gt, gt) == 1.0
    assert aji([_square(0, 0, 2, 2)], []) == 0.0
    assert aji([], []) == 1.0
    assert aji([], [_square(0, 0, 2, 2)]) == 0.0
    # an unused prediction still inflates the union
    assert aji_counts([_square(0, 0, 2, 2)], [_square(0, 0, 2, 2), _square(5, 5, 1, 1)]) == (4, 5)


def test_aji_ties_go_to_lower_prediction_index():
    gt = [_square(0, 0, 2, 2)]
    a, b = _square(0, 0, 2, 1), _square(0, 1, 2, 1)  # equal IoU 0.5
    c1, u1 = aji_counts(gt, [a, b])
    assert (c1, u1) == (2, 6)
    g2 = [_square(0, 0, 2, 2), _square(0, 0, 2, 1)]
    # the first gt takes the lower index; the second then overlaps nothing free
    assert aji_counts(g2, [a, b]) == (2 + 0, 4 + 4)


def test_metric_shape_mismatch():
    with pytest.raises(ShapeError):
        aji([_square(0, 0, 2, 2)], [_square(0, 0, 2, 2, (6, 6))])
    with pytest.raises(ShapeError):
        pixel_f1(np.zeros((4, 4)), np.zeros((4, 5)))
    with pytest.raises(ShapeError):
        object_f1([_square(0, 0, 2, 2)], [_square(0, 0, 2, 2, (6, 6))])


def test_pixel_f1_examples():
    g = np.zeros((4, 4), bool)
    g[0, :4] = True
    p = np.zeros((4, 4), bool)
    p[0, :2] = True
    assert pixel_f1(g, p) == pytest.approx(2 / 3, abs=1e-15)
    assert pixel_f1(g, g) == 1.0
    assert pixel_f1(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0
    assert pixel_f1(g, np.roll(g, 2, axis=0)) == 0.0


def test_object_f1_examples():
    gt = [_square(0, 0, 2, 5, (10, 10))]
    hit = _square(0, 0, 2, 3, (10, 10))  # IoU 0.6
    far = _square(7, 7, 2, 2, (10, 10))
    assert object_counts(gt, [hit, far]) == (1, 1, 0)
    assert object_f1(gt, [hit, far]) == pytest.approx(2 / 3, abs=1e-15)
    assert object_f1(gt, gt) == 1.0
    assert object_f1(gt, [far]) == 0.0
    assert object_f1(gt, [hit], iou_threshold=0.7) == 0.0
    with pytest.raises(ValueError):
        object_f1(gt, [hit], iou_threshold=1.0)


def test_max_iou_examples():
    gt = _square(0, 0, 2, 5, (10, 10))
    low = _square(0, 0, 1, 2, (10, 10))  # IoU 0.2
    high = _square(0, 0, 2, 5, (10, 10)) & ~_square(0, 2, 1, 3, (10, 10))  # IoU 0.7
    assert max_iou(gt, [low, high]) == pytest.approx(0.7)
    assert max_iou(gt, [low]) == pytest.approx(0.2)
    assert max_iou(gt, [gt]) == 1.0
    assert max_iou(gt, []) == 0.0
    with pytest.raises(ModeError):
        max_iou([gt, low], [high])


def _masks_from_draw(flat, shape=(5, 5)):
    return [np.asarray(m, bool).reshape(shape) for m in flat]


mask_lists = st.lists(st.lists(st.booleans(), min_size=25, max_size=25), max_size=4)


@settings(max_examples=60, deadline=None)
@given(mask_lists, mask_lists, st.randoms(use_true_random=False))
def test_metrics_are_permutation_invariant_and_symmetric(g, p, rnd):
    gt, pred = _masks_from_draw(g), _masks_from_draw(p)
    gt = [m for m in gt if m.any()]
    pred = [m for m in pred if m.any()]
    shuffled_gt, shuffled_pred = gt[:], pred[:]
    rnd.shuffle(shuffled_gt)
    rnd.shuffle(shuffled_pred)
    assert object_f1(shuffled_gt, shuffled_pred) == object_f1(gt, pred)
    assert object_f1(pred, gt) == object_f1(gt, pred)
    tp, fp, fn = object_counts(gt, pred)
    assert object_counts(pred, gt) == (tp, fn, fp)
    gu = np.any(gt, axis=0) if gt else np.zeros((5, 5), bool)
    pu = np.any(pred, axis=0) if pred else np.zeros((5, 5), bool)
    assert pixel_f1(gu, pu) == pixel_f1(pu, gu)
    a = aji(gt, pred)
    assert 0.0 <= a <= 1.0
    # disjoint partitions: the greedy matching then has no ties to break by order
    if _disjoint(gt) and _disjoint(pred) and _no_iou_ties(gt, pred):
        assert aji(shuffled_gt, shuffled_pred) == pytest.approx(a, abs=1e-12)


def _disjoint(ms):
    return not ms or int(np.sum(ms, axis=0).max()) <= 1


def _no_iou_ties(gt, pred):
    vals = [_iou(a, b) for a in _sets(gt) for b in _sets(pred)]
    nz = [v for v in vals if v > 0]
    return len(nz) == len(set(nz))


def test_rule_filter_examples():
    img = np.zeros((8, 8))
    a, b = _square(0, 0, 2, 2), _square(4, 4, 2, 2)
    img[a] = 80
    img[b] = 120
    out = rule_filter([a, b], img, [100, 256, 0])
    assert len(out[100]) == 1 and out[100][0] is a
    assert len(out[256]) == 2
    assert out[0] == []


def test_rule_filter_accepts_predictions():
    img = np.zeros((16, 16))
    img[0:8, 0:8] = 50
    p = InstancePrediction((0, 0, 8, 8), np.ones((28, 28)), 0.9)
    q = InstancePrediction((8, 8, 16, 16), np.ones((28, 28)), 0.9)
    img[8:, 8:] = 200
    out = rule_filter([p, q], img, [100])
    assert out[100] == [p]


def test_resolve_overlaps_prefers_confident():
    a, b = _square(0, 0, 3, 3), _square(1, 1, 3, 3)
    lm = resolve_overlaps(np.stack([a, b]), [0.4, 0.9])
    assert lm[1, 1] == 2 and lm[0, 0] == 1
    assert int((lm == 2).sum()) == 9


def test_score_instances_modes():
    gt1 = np.stack([_square(0, 0, 2, 2)])
    pr1 = np.stack([_square(0, 0, 1, 2)])  # AJI 2/4
    gt2 = np.stack([_square(0, 0, 4, 4)])
    pr2 = np.stack([_square(0, 0, 4, 4)])  # AJI 16/16
    per = score_instances([gt1, gt2], [pr1, pr2])
    assert per.aji == pytest.approx(0.75) and per.mode == "per_image"
    pooled = score_instances([gt1, gt2], [pr1, pr2], mode="pooled")
    assert pooled.aji == pytest.approx(18 / 20)
    assert per.max_iou == pytest.approx(0.75)  # single-object images
    assert [r["aji"] for r in per.per_image] == [0.5, 1.0]
    with pytest.raises(ValueError):
        score_instances([gt1], [pr1], mode="other")
