import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eigenseg import segmentation as seg
from eigenseg.errors import ConfigError, DataError
from reference import brute_force_assignment_cost, counting_scores


# -- upsampling and argmax -------------------------------------------------------------

def test_upsample_constant():
    out = seg.upsample_bilinear(np.full((2, 3, 2), 0.7), 5, 7)
    assert out.shape == (5, 7, 2)
    np.testing.assert_allclose(out, 0.7, rtol=1e-15)


def test_upsample_1d_example():
    out = seg.upsample_bilinear(np.array([[[0.0], [1.0]]]), 1, 4)
    np.testing.assert_allclose(out[0, :, 0], [0, 0.25, 0.75, 1.0], atol=1e-15)


def test_upsample_identity_bitwise():
    x = np.random.default_rng(0).standard_normal((3, 4, 5))
    assert seg.upsample_bilinear(x, 3, 4).tobytes() == x.tobytes()


def test_upsample_rejects_shrink():
    with pytest.raises(ConfigError):
        seg.upsample_bilinear(np.zeros((4, 4, 1)), 2, 4)


def test_upsample_commutes_with_channel_permutation():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((3, 2, 5))
    perm = rng.permutation(5)
    a = seg.upsample_bilinear(x, 9, 6)[..., perm]
    b = seg.upsample_bilinear(x[..., perm], 9, 6)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(perm[seg.argmax_assign(b)], seg.argmax_assign(a[..., np.argsort(perm)]))


def test_argmax_examples():
    assert (seg.argmax_assign(np.random.default_rng(0).random((3, 3, 1))) == 0).all()
    assert seg.argmax_assign(np.array([[[0.1, 0.9, 0.3]]]))[0, 0] == 1
    assert (seg.argmax_assign(np.full((2, 2, 4), 0.5)) == 0).all()


# -- Hungarian -------------------------------------------------------------------------

def test_hungarian_example():
    a = seg.hungarian([[4, 1], [2, 3]])
    assert a.rows.tolist() == [0, 1] and a.cols.tolist() == [1, 0]
    assert a.total == 3


def test_hungarian_zero_diagonal():
    C = np.ones((4, 4)) - np.eye(4)
    a = seg.hungarian(C)
    assert a.cols.tolist() == [0, 1, 2, 3] and a.total == 0


def test_hungarian_lexicographic_ties():
    assert seg.hungarian(np.zeros((3, 3))).cols.tolist() == [0, 1, 2]
    assert seg.hungarian([[1, 1], [1, 1]]).cols.tolist() == [0, 1]


def test_hungarian_rectangular():
    wide = seg.hungarian([[5, 1, 3], [2, 9, 0]])
    assert wide.total == 1 and wide.cols.tolist() == [1, 2]
    tall = seg.hungarian([[5, 2], [1, 9], [3, 0]])
    assert tall.total == 1 and len(tall.rows) == 2
    assert sorted(zip(tall.rows.tolist(), tall.cols.tolist())) == [(1, 0), (2, 1)]


def test_hungarian_rejects_nonfinite():
    with pytest.raises(DataError):
        seg.hungarian([[0, np.inf], [1, 2]])


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(200):
        n, m = rng.integers(1, 8, size=2)
        C = rng.integers(0, 6, size=(n, m)).astype(float) if rng.random() < 0.5 else rng.random((n, m))
        assert abs(seg.hungarian(C).total - brute_force_assignment_cost(C)) <= 1e-9


# -- matching and metrics ---------------------------------------------------------------

def test_majority_vote_examples():
    conf = seg.confusion_matrix([0, 0, 0, 1, 1], [0, 0, 1, 1, 1], 2, 2)
    assert seg.majority_vote(conf).tolist() == [0, 1]
    assert seg.majority_vote(np.array([[3]])).tolist() == [0]
    tie = np.zeros((1, 8), int)
    tie[0, 2] = tie[0, 7] = 5
    assert seg.majority_vote(tie).tolist() == [2]


def test_majority_vote_empty_cluster_and_error():
    assert seg.majority_vote(np.array([[0, 0], [1, 4]])).tolist() == [0, 1]
    with pytest.raises(DataError):
        seg.majority_vote(np.zeros((2, 2), int))


def test_hungarian_match_surplus_clusters_vote():
    conf = np.array([[5, 0], [0, 4], [0, 3]])
    assert seg.hungarian_match(conf).tolist() == [0, 1, 1]


def test_score_hand_example():
    s = seg.score([0, 0, 1, 1], [0, 1, 1, 1], 2)
    assert s.accuracy == 0.75
    np.testing.assert_allclose(s.iou, [0.5, 2 / 3], rtol=1e-15)
    np.testing.assert_allclose(s.miou, 0.5833333, atol=1e-6)


def test_score_perfect_and_empty():
    s = seg.score([2, 0, 1], [2, 0, 1], 3)
    assert (s.accuracy, s.miou) == (1.0, 1.0)
    with pytest.raises(DataError, match="no scored pixels"):
        seg.score([0, 1], [255, 255], 2, ignore_index=255)


def test_score_ignores_absent_classes():
    s = seg.score([0, 0, 1], [0, 0, 1], 4)
    assert s.miou == 1.0 and np.isnan(s.iou[2:]).all()


def test_score_shape_mismatch():
    with pytest.raises(DataError):
        seg.score(np.zeros((2, 2), int), np.zeros((2, 3), int), 2)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 5), st.data())
def test_score_matches_counting_reference(n_classes, data):
    n = data.draw(st.integers(1, 60))
    labels = st.lists(st.integers(0, n_classes - 1), min_size=n, max_size=n)
    pred, gt = data.draw(labels), data.draw(labels)
    s = seg.score(pred, gt, n_classes)
    acc, miou = counting_scores(pred, gt, n_classes)
    assert abs(s.accuracy - acc) <= 1e-12 and abs(s.miou - miou) <= 1e-12
    assert 0 <= s.miou <= 1 and 0 <= s.accuracy <= 1


@pytest.mark.parametrize("match", ["vote", "hungarian"])
def test_metrics_invariant_to_cluster_relabeling(match):
    rng = np.random.default_rng(3)
    gts = [rng.integers(0, 3, (6, 6)) for _ in range(3)]
    preds = [np.where(rng.random((6, 6)) < 0.7, g, rng.integers(0, 5, (6, 6))) for g in gts]
    perm = rng.permutation(5)
    a = seg.evaluate_labels(preds, gts, 5, 3, match)
    b = seg.evaluate_labels([perm[p] for p in preds], gts, 5, 3, match)
    assert (a.accuracy, a.miou) == (b.accuracy, b.miou)


def test_evaluate_single_image_equals_score():
    pred = np.array([[1, 1], [0, 0]])
    gt = np.array([[0, 0], [1, 2]])
    res = seg.evaluate_labels([pred], [gt], 2, 3, "hungarian")
    ref = seg.score(res.mapping[pred], gt, 3)
    assert (res.accuracy, res.miou) == (ref.accuracy, ref.miou)


def test_evaluate_duplication_invariant():
    rng = np.random.default_rng(4)
    gts = [rng.integers(0, 3, (5, 5)) for _ in range(2)]
    preds = [rng.integers(0, 4, (5, 5)) for _ in range(2)]
    for match in ("vote", "hungarian"):
        a = seg.evaluate_labels(preds, gts, 4, 3, match)
        b = seg.evaluate_labels(preds * 2, gts * 2, 4, 3, match)
        assert (a.accuracy, a.miou) == (b.accuracy, b.miou)


def test_evaluate_global_matching():
    # per image each cluster would match differently; globally cluster 0 -> class 1
    preds = [np.array([0, 0, 0]), np.array([0, 1, 1])]
    gts = [np.array([1, 1, 1]), np.array([0, 0, 0])]
    res = seg.evaluate_labels(preds, gts, 2, 2, "vote")
    assert res.mapping.tolist() == [1, 0]
    np.testing.assert_allclose(res.accuracy, 5 / 6, rtol=1e-15)


def test_evaluate_errors():
    with pytest.raises(DataError):
        seg.evaluate_labels([np.zeros(3, int)], [], 1, 1)
    with pytest.raises(ConfigError):
        seg.evaluate_labels([np.zeros(3, int)], [np.zeros(3, int)], 1, 1, "best")


# -- inference protocols ----------------------------------------------------------------

def linear_logits(features):
    W = np.arange(12, dtype=float).reshape(3, 4) - 5
    return features @ W


def test_sliding_window_stride_equals_window_is_tiling():
    f = np.random.default_rng(5).standard_normal((4, 6, 3))
    out = seg.sliding_window_logits(linear_logits, f, (2, 3), (2, 3))
    np.testing.assert_allclose(out, linear_logits(f[None])[0], rtol=1e-14)


def test_sliding_window_overlap_average():
    f = np.ones((1, 3, 1))
    calls = []

    def fn(x):
        calls.append(x.shape)
        return np.full(x.shape[:3] + (1,), float(len(calls)))

    out = seg.sliding_window_logits(fn, f, (1, 2), (1, 1))
    np.testing.assert_allclose(out[0, :, 0], [1.0, 1.5, 2.0])


def test_predict_masks_protocols_agree_without_overlap():
    f = np.random.default_rng(6).standard_normal((2, 4, 4, 3))
    crop = seg.predict_masks(linear_logits, f, (8, 8))
    win = seg.predict_masks(linear_logits, f, (8, 8), "window", (2, 2), (2, 2))
    for a, b in zip(crop, win):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(ConfigError):
        seg.predict_masks(linear_logits, f, (8, 8), "window")


def test_labels_to_logits_round_trip():
    lab = np.array([[2, 0], [1, 1]])
    np.testing.assert_array_equal(seg.argmax_assign(seg.labels_to_logits(lab, 3)), lab)
