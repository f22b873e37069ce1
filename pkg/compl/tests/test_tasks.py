import itertools

import pytest
import numpy as np

import compl.tasks as tasks
from compl.autodiff import Tensor, ShapeError, grad_check


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def _brute_force_miou(pred, gt, num_classes):
    ious = []
    for c in range(num_classes):
        p = {i for i, v in enumerate(pred.reshape(-1)) if v == c}
        g = {i for i, v in enumerate(gt.reshape(-1)) if v == c}
        if p | g:
            ious.append(len(p & g) / len(p | g))
    return float(np.mean(ious)) if ious else 0.0


def test_l1_loss_value():
    loss = tasks.l1_loss(Tensor(np.array([[1.0, 2.0]])), np.array([[0.0,
                                                                      4.0]]))
    assert loss.item() == pytest.approx(1.5)


def test_semseg_ce_uniform_logits():
    logits = Tensor(np.zeros((1, 4, 3, 3)))
    labels = np.zeros((1, 3, 3), dtype=np.int64)
    assert tasks.ce_loss_semseg(logits, labels).item() == pytest.approx(
        np.log(4))


def test_semseg_ce_rejects_out_of_range_labels():
    with pytest.raises(tasks.LabelError):
        tasks.ce_loss_semseg(Tensor(np.zeros((1, 3, 2, 2))),
                             np.full((1, 2, 2), 3))


def test_semseg_ce_rejects_mismatched_labels():
    with pytest.raises(ShapeError):
        tasks.ce_loss_semseg(Tensor(np.zeros((1, 3, 2, 2))),
                             np.zeros((1, 3, 3), dtype=np.int64))


def test_weighted_bce_weights_classes():
    logits = Tensor(np.zeros((1, 1, 2)))
    pos = tasks.weighted_bce_boundary(logits, np.ones((1, 1, 2))).item()
    neg = tasks.weighted_bce_boundary(logits, np.zeros((1, 1, 2))).item()
    assert pos == pytest.approx(0.95 * np.log(2))
    assert neg == pytest.approx(0.05 * np.log(2))


def test_weighted_bce_with_equal_weights_is_half_bce(rng):
    logits = rng.normal(size=(2, 1, 4, 4))
    gt = (rng.random(size=(2, 1, 4, 4)) < 0.3).astype(float)
    sig = 1.0 / (1.0 + np.exp(-logits))
    bce = np.mean(-gt * np.log(sig) - (1 - gt) * np.log(1 - sig))
    loss = tasks.weighted_bce_boundary(Tensor(logits), gt, 0.5, 0.5).item()
    assert loss == pytest.approx(0.5 * bce, rel=1e-12)


def test_weighted_bce_is_stable_for_large_logits():
    logits = Tensor(np.array([[500.0, -500.0]]))
    loss = tasks.weighted_bce_boundary(logits, np.array([[0.0, 1.0]]))
    assert np.isfinite(loss.item())
    assert loss.item() == pytest.approx(0.5 * (0.05 * 500 + 0.95 * 500))


@pytest.mark.parametrize("loss", ["l1", "ce", "bce"])
def test_loss_gradients(loss, rng):
    if loss == "l1":
        gt = rng.normal(size=(2, 3, 3))
        x = gt + rng.choice([-1.0, 1.0], size=gt.shape) * 0.5
        f = lambda t: tasks.l1_loss(t, gt)  # noqa: E731
    elif loss == "ce":
        labels = rng.integers(0, 3, size=(2, 3, 3))
        x = rng.normal(size=(2, 3, 3, 3))
        f = lambda t: tasks.ce_loss_semseg(t, labels)  # noqa: E731
    else:
        gt = (rng.random(size=(2, 3, 3)) < 0.3).astype(float)
        x = rng.normal(size=(2, 3, 3))
        f = lambda t: tasks.weighted_bce_boundary(t, gt)  # noqa: E731
    assert grad_check(f, Tensor(x)) < 1e-4


def test_rmse_identity_and_symmetry(rng):
    a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    assert tasks.rmse(a, a) == 0.0
    assert tasks.rmse(a, b) == tasks.rmse(b, a)


def test_rmse_shape_mismatch():
    with pytest.raises(ShapeError):
        tasks.rmse(np.zeros(3), np.zeros(4))


def test_miou_matches_brute_force(rng):
    for _ in range(500):
        pred = rng.integers(0, 4, size=(8, 8))
        gt = rng.integers(0, 4, size=(8, 8))
        assert tasks.miou(pred, gt, 4) == _brute_force_miou(pred, gt, 4)


def test_miou_ignores_absent_classes():
    pred = np.array([[0, 1], [0, 1]])
    assert tasks.miou(pred, pred, 5) == 1.0


def test_confusion_matrix_rows_are_ground_truth():
    conf = tasks.confusion_matrix(np.array([1, 1]), np.array([0, 1]), 2)
    np.testing.assert_array_equal(conf, [[0, 1], [0, 1]])


def test_match_boundaries_tolerates_one_pixel():
    gt = np.zeros((5, 5), dtype=bool)
    gt[2, 1:4] = True
    pred = np.zeros_like(gt)
    pred[3, 1:4] = True
    assert tasks.match_boundaries(pred, gt) == (3, 0, 0)


def test_match_boundaries_is_one_to_one():
    gt = np.zeros((3, 3), dtype=bool)
    gt[1, 1] = True
    pred = np.zeros_like(gt)
    pred[1, 0] = pred[1, 2] = True
    assert tasks.match_boundaries(pred, gt) == (1, 1, 0)


def test_ods_perfect_and_empty_predictions(rng):
    gts = [(rng.random(size=(6, 6)) < 0.2).astype(float) for _ in range(3)]
    assert tasks.ods_fscore(gts, gts) == 1.0
    assert tasks.ods_fscore([np.zeros((6, 6))] * 3, gts) == 0.0


def test_ods_never_drops_when_thresholds_are_refined(rng):
    gts = [(rng.random(size=(8, 8)) < 0.2).astype(float) for _ in range(4)]
    probs = [np.clip(g * 0.6 + rng.random(size=(8, 8)) * 0.5, 0, 1)
             for g in gts]
    coarse = tasks.ods_fscore(probs, gts, np.array([0.2, 0.5, 0.8]))
    finer = tasks.ods_fscore(probs, gts, np.round(np.linspace(0.1, 0.9, 9),
                                                  2))
    finest = tasks.ods_fscore(probs, gts)
    assert coarse <= finer <= finest


def test_ods_length_mismatch():
    with pytest.raises(ShapeError):
        tasks.ods_fscore([np.zeros((2, 2))], [])


def test_f_measure_values():
    assert tasks.f_measure(0, 0, 0) == 0.0
    assert tasks.f_measure(1, 1, 1) == pytest.approx(0.5)


@pytest.mark.parametrize("task,metric", [("depth", "rmse"),
                                         ("semseg", "miou"),
                                         ("boundary", "ods_f")])
def test_accumulator_is_order_independent(task, metric, rng):
    channels = tasks.head_channels(task, 3)
    outputs = rng.normal(size=(4, channels, 5, 5))
    if task == "depth":
        labels = rng.normal(size=(4, 5, 5))
    elif task == "semseg":
        labels = rng.integers(0, 3, size=(4, 5, 5))
    else:
        labels = (rng.random(size=(4, 5, 5)) < 0.3).astype(np.uint8)

    forward = tasks.MetricAccumulator(task, 3)
    forward.update(outputs[:2], labels[:2])
    forward.update(outputs[2:], labels[2:])
    backward = tasks.MetricAccumulator(task, 3)
    backward.update(outputs[2:], labels[2:])
    backward.update(outputs[:2], labels[:2])

    a, b = forward.result(), backward.result()
    assert a.name == metric
    assert a.count == 4
    assert a.value == pytest.approx(b.value, abs=1e-12)


def test_target_loss_dispatch(rng):
    out = Tensor(rng.normal(size=(2, 1, 4, 4)))
    depth = rng.normal(size=(2, 4, 4))
    assert tasks.target_loss("depth", out, depth).item() == pytest.approx(
        tasks.l1_loss(out.reshape(2, 4, 4), depth).item())
    with pytest.raises(KeyError):
        tasks.target_loss("normals", out, depth)


def test_head_channels():
    assert tasks.head_channels("semseg", 6) == 6
    assert [tasks.head_channels(t, 6)
            for t in ("depth", "boundary")] == [1, 1]


def test_accumulator_depth_matches_rmse(rng):
    out = rng.normal(size=(3, 1, 4, 4))
    gt = rng.normal(size=(3, 4, 4))
    acc = tasks.MetricAccumulator("depth", 2)
    acc.update(out, gt)
    assert acc.result().value == pytest.approx(tasks.rmse(out[:, 0], gt))


def test_match_offsets_cover_neighbourhood():
    offsets = tasks._MATCH_OFFSETS
    assert len(set(offsets)) == 9
    assert set(offsets) == set(itertools.product((-1, 0, 1), repeat=2))
