"""Head wiring, target assignment, losses, decoding, NMS, and AP."""

import math

import numpy as np
import pytest

from coopbev.adapters import init_tensor
from coopbev.autodiff import ParamStore
from coopbev.detection import (DetectionError, DetectionMap, LossWeights,
                               FOCAL_ALPHA, FOCAL_GAMMA, SMOOTH_L1_BETA,
                               assign_targets, boxes_to_frame, combine_terms,
                               decode_detections, evaluate_ap,
                               evaluate_ap_pooled, head_forward, head_shapes,
                               match_scene, register_head, split_yaw,
                               total_loss)
from coopbev.geometry import GridSpec, OrientedBox, Pose, wrap_angle

from oracles import head_tensor_sizes

GRID = GridSpec(12, 51.2)


def _head_store(seed=3):
    store = ParamStore()
    register_head(store, seed)
    return store


def _perfect_map(boxes, grid=GRID, hot=12.0):
    """DetectionMap that reproduces `boxes` exactly when decoded."""
    t = assign_targets(boxes, grid)
    obj = np.where(t["pos_mask"] > 0, hot, -hot)[..., None]
    direction = np.zeros((grid.size, grid.size, 2))
    direction[..., 0] = 1.0  # canonical front half
    return DetectionMap(obj, t["reg"].copy(), direction)


# ---------------------------------------------------------------------------
# head

def test_head_shapes_match_independent_enumeration():
    sizes = {rel: int(np.prod(s)) for rel, s in head_shapes().items()}
    assert sizes == head_tensor_sizes()
    assert sum(sizes.values()) == 297


def test_head_forward_is_two_linear_branches():
    store = _head_store()
    rng = np.random.default_rng(11)
    x = rng.normal(size=(12, 12, 32))
    out = head_forward(x, store)
    assert out.objectness.shape == (12, 12, 1)
    assert out.regression.shape == (12, 12, 6)
    assert out.direction.shape == (12, 12, 2)
    cls_dir = x @ store["head/cls_dir/w"][0, 0] + store["head/cls_dir/b"]
    np.testing.assert_allclose(out.objectness, cls_dir[..., :1], atol=1e-12)
    np.testing.assert_allclose(out.direction, cls_dir[..., 1:], atol=1e-12)
    np.testing.assert_allclose(
        out.regression, x @ store["head/reg/w"][0, 0] + store["head/reg/b"],
        atol=1e-12)


def test_head_forward_validation():
    with pytest.raises(DetectionError):
        head_forward(np.zeros((12, 32)), _head_store())


def test_fresh_head_starts_at_objectness_prior():
    store = _head_store()
    out = head_forward(np.zeros((4, 4, 32)), store)
    p = 1.0 / (1.0 + np.exp(-out.objectness))
    np.testing.assert_allclose(p, 0.1, atol=1e-12)


# ---------------------------------------------------------------------------
# yaw handling

@pytest.mark.parametrize("yaw,psi,bin_", [
    (0.0, 0.0, 0),
    (0.3, 0.3, 0),
    (-math.pi / 2, -math.pi / 2, 0),
    (math.pi / 2, -math.pi / 2, 1),
    (3.0, 3.0 - math.pi, 1),
    (-3.0, math.pi - 3.0, 1),
])
def test_split_yaw_cases(yaw, psi, bin_):
    got_psi, got_bin = split_yaw(yaw)
    assert got_psi == pytest.approx(psi, abs=1e-12)
    assert got_bin == bin_
    # splitting is lossless: psi + pi * bin recovers the original heading
    assert wrap_angle(got_psi + math.pi * got_bin) == pytest.approx(
        wrap_angle(yaw), abs=1e-12)


def test_split_yaw_range():
    for yaw in np.linspace(-math.pi, math.pi, 101):
        psi, b = split_yaw(yaw)
        assert -math.pi / 2 <= psi < math.pi / 2 or psi == pytest.approx(-math.pi / 2)
        assert b in (0, 1)


# ---------------------------------------------------------------------------
# target assignment

def test_assign_targets_single_box_exact():
    box = OrientedBox(10.0, -20.0, 4.0, 8.0, 0.5)
    t = assign_targets([box], GRID)
    i, j = GRID.cell_index(10.0), GRID.cell_index(-20.0)
    assert t["n_pos"] == 1.0
    assert t["cls"][i, j] == 1.0 and t["cls"].sum() == 1.0
    np.testing.assert_allclose(
        t["reg"][i, j],
        [(10.0 - GRID.cell_center(i)) / GRID.cell,
         (-20.0 - GRID.cell_center(j)) / GRID.cell,
         math.log(4.0), math.log(8.0), math.sin(0.5), math.cos(0.5)],
        atol=1e-12)
    assert t["dir"][i, j] == 0
    np.testing.assert_array_equal(t["reg_mask"],
                                  np.repeat(t["pos_mask"][..., None], 6, -1))


def test_assign_targets_contested_cell_keeps_first():
    a = OrientedBox(1.0, 1.0, 4.0, 8.0, 0.0)
    b = OrientedBox(1.2, 1.2, 4.5, 9.0, 0.3)  # same 8.53 m cell
    t = assign_targets([a, b], GRID)
    assert t["n_pos"] == 1.0
    i, j = GRID.cell_index(1.0), GRID.cell_index(1.0)
    assert t["reg"][i, j][2] == pytest.approx(math.log(4.0))


def test_assign_targets_skips_out_of_grid():
    t = assign_targets([OrientedBox(100.0, 0.0, 4.0, 8.0, 0.0)], GRID)
    assert t["n_pos"] == 0.0
    assert t["cls"].sum() == 0.0


def test_assign_targets_offsets_bounded_by_half_cell():
    rng = np.random.default_rng(3)
    boxes = [OrientedBox(*rng.uniform(-30, 30, size=2), 4.0, 8.0, 0.0)
             for _ in range(20)]
    t = assign_targets(boxes, GRID)
    assert np.abs(t["reg"][..., :2]).max() <= 0.5 + 1e-12


# ---------------------------------------------------------------------------
# losses

def test_total_loss_matches_independent_formulas():
    rng = np.random.default_rng(19)
    boxes = [OrientedBox(5.0, 5.0, 4.0, 8.0, 0.4),
             OrientedBox(-15.0, 10.0, 3.6, 7.2, -1.0)]
    pred = DetectionMap(rng.normal(size=(12, 12, 1)),
                        rng.normal(size=(12, 12, 6)),
                        rng.normal(size=(12, 12, 2)))
    w = LossWeights()
    got = total_loss(pred, boxes, w, grid=GRID)

    t = assign_targets(boxes, GRID)
    norm = max(1.0, t["n_pos"])
    # focal: -alpha (1-p)^g log p on positives, -(1-alpha) p^g log(1-p) else
    z = pred.objectness[..., 0]
    p = 1.0 / (1.0 + np.exp(-z))
    pos = t["cls"] > 0
    focal = np.where(pos,
                     -FOCAL_ALPHA * (1 - p) ** FOCAL_GAMMA * np.log(p),
                     -(1 - FOCAL_ALPHA) * p ** FOCAL_GAMMA * np.log(1 - p))
    assert got.classification == pytest.approx(focal.sum() / norm, rel=1e-12)
    # smooth L1 on masked regression channels
    e = np.abs(pred.regression - t["reg"])
    sl1 = np.where(e < SMOOTH_L1_BETA, 0.5 * e * e / SMOOTH_L1_BETA,
                   e - 0.5 * SMOOTH_L1_BETA) * t["reg_mask"]
    assert got.regression == pytest.approx(sl1.sum() / norm, rel=1e-12)
    # cross entropy over the two direction logits at positive cells
    logits = pred.direction
    lse = np.log(np.exp(logits).sum(axis=-1))
    nll = (lse - logits[..., 0]) * t["pos_mask"]  # all targets are bin 0
    assert got.direction == pytest.approx(nll.sum() / norm, rel=1e-12)
    assert got.total == combine_terms(w, got.classification, got.regression,
                                      got.direction, got.depth)


def test_total_loss_perfect_prediction_is_smaller():
    boxes = [OrientedBox(5.0, 5.0, 4.0, 8.0, 0.4)]
    ideal = total_loss(_perfect_map(boxes), boxes, grid=GRID)
    rng = np.random.default_rng(7)
    noisy = DetectionMap(rng.normal(size=(12, 12, 1)),
                         rng.normal(size=(12, 12, 6)),
                         rng.normal(size=(12, 12, 2)))
    assert ideal.total < total_loss(noisy, boxes, grid=GRID).total
    assert ideal.regression == 0.0


def test_loss_weights_validation():
    with pytest.raises(DetectionError):
        LossWeights(lam_cls=-1.0)
    with pytest.raises(DetectionError):
        LossWeights(0.0, 0.0, 0.0, 0.0)


def test_total_loss_depth_term():
    boxes = [OrientedBox(5.0, 5.0, 4.0, 8.0, 0.4)]
    pred = _perfect_map(boxes)
    logits = np.zeros((4, 16))
    bins = np.array([3, 0, 7, 15])
    mask = np.array([1.0, 0.0, 1.0, 1.0])
    got = total_loss(pred, boxes, grid=GRID,
                     depth_pred=logits, depth_gt=(bins, mask))
    # uniform logits: each masked ray contributes log(16)
    assert got.depth == pytest.approx(math.log(16.0), rel=1e-12)
    without = total_loss(pred, boxes, grid=GRID)
    assert without.depth == 0.0


# ---------------------------------------------------------------------------
# decoding

def test_decode_recovers_assigned_boxes():
    boxes = [OrientedBox(10.0, -20.0, 4.0, 8.0, 0.5),
             OrientedBox(-12.0, 14.0, 3.6, 9.0, -1.2)]
    out = decode_detections(_perfect_map(boxes), score_threshold=0.5,
                            nms_iou=0.15, grid=GRID)
    assert len(out) == 2
    for got, want in zip(sorted(out, key=lambda b: b.cx),
                         sorted(boxes, key=lambda b: b.cx)):
        assert got.cx == pytest.approx(want.cx, abs=1e-9)
        assert got.cy == pytest.approx(want.cy, abs=1e-9)
        assert got.w == pytest.approx(want.w, rel=1e-12)
        assert got.l == pytest.approx(want.l, rel=1e-12)
        # headings match up to the box's front/back symmetry
        d = abs(got.yaw - want.yaw) % math.pi
        assert min(d, math.pi - d) == pytest.approx(0.0, abs=1e-9)
        assert got.score > 0.99


def test_decode_direction_bin_flips_heading():
    boxes = [OrientedBox(10.0, -20.0, 4.0, 8.0, 0.5)]
    pred = _perfect_map(boxes)
    flipped = pred.direction.copy()
    flipped[..., 0], flipped[..., 1] = 0.0, 1.0
    out = decode_detections(DetectionMap(pred.objectness, pred.regression,
                                         flipped), grid=GRID)
    assert out[0].yaw == pytest.approx(wrap_angle(0.5 + math.pi), abs=1e-9)


def test_decode_thresholds_filter_low_scores():
    boxes = [OrientedBox(10.0, -20.0, 4.0, 8.0, 0.5)]
    pred = _perfect_map(boxes, hot=0.1)  # sigmoid(0.1) ~ 0.52
    assert decode_detections(pred, score_threshold=0.9, grid=GRID) == []
    assert len(decode_detections(pred, score_threshold=0.5, grid=GRID)) == 1


def test_decode_nms_suppresses_duplicates():
    # two adjacent cells regress to the same physical box
    grid = GRID
    obj = np.full((12, 12, 1), -12.0)
    reg = np.zeros((12, 12, 6))
    direction = np.zeros((12, 12, 2))
    direction[..., 0] = 1.0
    i = j = 6
    target = OrientedBox(grid.cell_center(i), grid.cell_center(j), 4.0, 8.0, 0.0)
    obj[i, j, 0] = 12.0
    reg[i, j] = [0.0, 0.0, math.log(4.0), math.log(8.0), 0.0, 1.0]
    obj[i + 1, j, 0] = 6.0  # weaker duplicate from the neighboring cell
    reg[i + 1, j] = [-1.0, 0.0, math.log(4.0), math.log(8.0), 0.0, 1.0]
    out = decode_detections(DetectionMap(obj, reg, direction), grid=grid)
    assert len(out) == 1
    assert out[0].cx == pytest.approx(target.cx)
    assert out[0].score > 0.99


def test_decode_validation():
    pred = _perfect_map([])
    with pytest.raises(DetectionError):
        decode_detections(pred, score_threshold=1.5)
    with pytest.raises(DetectionError):
        decode_detections(pred, nms_iou=-0.1)


def test_boxes_to_frame_round_trip():
    from coopbev.geometry import transform_box
    rng = np.random.default_rng(23)
    frame = Pose(5.0, -3.0, 1.1)
    boxes = [OrientedBox(*rng.uniform(-20, 20, size=2), 4.0, 8.0,
                         rng.uniform(-3, 3)) for _ in range(5)]
    local = boxes_to_frame(boxes, frame)
    for b, lb in zip(boxes, local):
        back = transform_box(lb, frame)
        assert back.cx == pytest.approx(b.cx, abs=1e-9)
        assert back.cy == pytest.approx(b.cy, abs=1e-9)
        assert back.yaw == pytest.approx(b.yaw, abs=1e-9)


# ---------------------------------------------------------------------------
# matching and AP

def _box_at(x, y, score=1.0):
    return OrientedBox(x, y, 4.0, 8.0, 0.0, score=score)


def test_match_scene_greedy():
    gt = [_box_at(0.0, 0.0)]
    preds = [_box_at(0.1, 0.0, score=0.9), _box_at(0.2, 0.0, score=0.8)]
    rows = match_scene(preds, gt, 0.5)
    assert rows == [(0.9, 1), (0.8, 0)]  # second cannot reuse the matched GT


def test_match_scene_score_order_not_list_order():
    gt = [_box_at(0.0, 0.0)]
    preds = [_box_at(0.2, 0.0, score=0.5), _box_at(0.0, 0.0, score=0.9)]
    rows = match_scene(preds, gt, 0.5)
    assert rows == [(0.9, 1), (0.5, 0)]


def test_evaluate_ap_hand_cases():
    gt = [_box_at(0.0, 0.0)]
    hit = _box_at(0.05, 0.0, score=0.9)
    miss = _box_at(30.0, 30.0, score=0.8)
    assert evaluate_ap([hit], gt, 0.5) == 1.0
    assert evaluate_ap([hit, miss], gt, 0.5) == 1.0  # fp ranked below the tp
    # fp ranked above the tp caps precision at recall 1 to 1/2
    assert evaluate_ap([_box_at(30.0, 30.0, score=0.95), hit], gt, 0.5) == 0.5
    assert evaluate_ap([], gt, 0.5) == 0.0
    assert evaluate_ap([], [], 0.5) == 1.0
    assert evaluate_ap([miss], [], 0.5) == 0.0


def test_evaluate_ap_threshold_validation():
    with pytest.raises(DetectionError):
        evaluate_ap([], [], 0.0)
    with pytest.raises(DetectionError):
        evaluate_ap([], [], 1.5)


def test_evaluate_ap_pooled_across_scenes():
    gt = [_box_at(0.0, 0.0)]
    hit = _box_at(0.05, 0.0, score=0.9)
    # scene 1 solved, scene 2 undetected: recall caps at 1/2, precision 1
    assert evaluate_ap_pooled([[hit], []], [gt, gt], 0.5) == 0.5
    # pooling is not the mean of per-scene APs
    assert (evaluate_ap([hit], gt, 0.5) + evaluate_ap([], gt, 0.5)) / 2 == 0.5
