"""Anchor-free detection head, the four-term training objective, box
decoding with rotated NMS, and average precision.

Per feature cell the head emits an objectness logit, a 6-vector box
regression (dx, dy in cells, log w, log l, sin/cos of the half-wrapped
yaw), and 2 direction logits that resolve the pi ambiguity. One box is
assigned to the cell containing its center; a contested cell keeps the
first box in list order.
"""

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, OpKind, forward
from .encoders import UNIFIED_CHANNELS
from .geometry import (GridSpec, OrientedBox, Pose, relative_pose,
                       rotated_iou, transform_box, wrap_angle)
from . import kernels as K


class DetectionError(Exception):
    pass


FOCAL_ALPHA = 0.25
FOCAL_GAMMA = 2.0
SMOOTH_L1_BETA = 1.0


@dataclass(frozen=True)
class DetectionMap:
    """Raw per-cell head outputs."""
    objectness: np.ndarray  # [H', W', 1]
    regression: np.ndarray  # [H', W', 6]
    direction: np.ndarray   # [H', W', 2]


@dataclass(frozen=True)
class LossWeights:
    lam_cls: float = 1.0
    lam_reg: float = 2.0
    lam_dir: float = 0.2
    lam_depth: float = 1.0

    def __post_init__(self):
        vals = (self.lam_cls, self.lam_reg, self.lam_dir, self.lam_depth)
        if any(v < 0 for v in vals):
            raise DetectionError(f"loss weights must be nonnegative: {vals}")
        if not any(v > 0 for v in vals):
            raise DetectionError("at least one loss weight must be positive")


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    classification: float
    regression: float
    direction: float
    depth: float


def combine_terms(w, cls, reg, direction, depth):
    """The single recombination order used everywhere, so reported totals
    are bitwise identical to graph-computed ones."""
    return ((w.lam_cls * cls + w.lam_reg * reg) + w.lam_dir * direction) \
        + w.lam_depth * depth


# ---------------------------------------------------------------------------
# head

# fixed selector matrices splitting the (cls+dir) branch into its parts
_SEL_CLS = np.array([[1.0], [0.0], [0.0]])
_SEL_DIR = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])


def head_shapes(c=UNIFIED_CHANNELS):
    return {"cls_dir/w": (1, 1, c, 3), "cls_dir/b": (3,),
            "reg/w": (1, 1, c, 6), "reg/b": (6,)}


def register_head(store, seed, c=UNIFIED_CHANNELS):
    from .adapters import init_tensor
    for rel, shape in head_shapes(c).items():
        full = f"head/{rel}"
        store.add(full, init_tensor(full, shape, seed))


def build_head(g, x, sel_cls_input="sel_cls", sel_dir_input="sel_dir"):
    """Two 1x1 conv branches: (cls+dir) and reg. Returns (objectness node
    [H,W,1], direction node [H,W,2], regression node [H,W,6])."""
    p = lambda rel: g.param(f"head/{rel}")
    cls_dir = g.op(OpKind.CONV2D, x, p("cls_dir/w"), p("cls_dir/b"),
                   k=1, stride=1, pad=0)
    cls = g.op(OpKind.MATMUL, cls_dir, g.input(sel_cls_input))
    direction = g.op(OpKind.MATMUL, cls_dir, g.input(sel_dir_input))
    reg = g.op(OpKind.CONV2D, x, p("reg/w"), p("reg/b"), k=1, stride=1, pad=0)
    return cls, direction, reg


def head_selector_inputs():
    return {"sel_cls": _SEL_CLS, "sel_dir": _SEL_DIR}


def head_forward(h, store):
    """Eager head application on a fused [H', W', C] tensor."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim != 3:
        raise DetectionError(f"head expects [H, W, C], got {h.shape}")
    g = Graph()
    x = g.input("x")
    cls, direction, reg = build_head(g, x)
    g.output("cls", cls)
    g.output("dir", direction)
    g.output("reg", reg)
    out = forward(g, store, {"x": h, **head_selector_inputs()})
    return DetectionMap(out["cls"], out["reg"], out["dir"])


# ---------------------------------------------------------------------------
# target assignment

def split_yaw(yaw):
    """(half-wrapped yaw in [-pi/2, pi/2], direction bin in {0, 1})."""
    yaw = wrap_angle(yaw)
    if yaw >= math.pi / 2:
        return yaw - math.pi, 1
    if yaw < -math.pi / 2:
        return yaw + math.pi, 1
    return yaw, 0


def assign_targets(gt_boxes, grid):
    """Per-cell training targets from ego-frame GT boxes.

    Returns dict with cls [H,W], reg [H,W,6], reg_mask [H,W,6], dir [H,W],
    pos_mask [H,W], n_pos.
    """
    n = grid.size
    cls = np.zeros((n, n))
    reg = np.zeros((n, n, 6))
    dir_t = np.zeros((n, n), dtype=np.int64)
    pos = np.zeros((n, n))
    for box in gt_boxes:
        i = grid.cell_index(box.cx)
        j = grid.cell_index(box.cy)
        if i is None or j is None or pos[i, j]:
            continue
        # boxes are front/back symmetric rectangles, so only the mod-pi
        # representative is observable; train the direction bin to the
        # canonical front half rather than chasing an unidentifiable sign
        psi, _ = split_yaw(box.yaw)
        reg[i, j] = ((box.cx - grid.cell_center(i)) / grid.cell,
                     (box.cy - grid.cell_center(j)) / grid.cell,
                     math.log(box.w), math.log(box.l),
                     math.sin(psi), math.cos(psi))
        dir_t[i, j] = 0
        cls[i, j] = 1.0
        pos[i, j] = 1.0
    return {"cls": cls, "reg": reg,
            "reg_mask": np.repeat(pos[..., None], 6, axis=-1),
            "dir": dir_t, "pos_mask": pos, "n_pos": float(pos.sum())}


# ---------------------------------------------------------------------------
# loss graph and eager total

def build_losses(g, cls_node, dir_node, reg_node, targets, weights,
                 depth_terms=()):
    """Wire the loss terms onto head output nodes; returns node ids
    {total, cls, reg, dir, depth?}. `depth_terms` is a list of
    (logits_node, bins array, mask array) triples for depth agents."""
    h, w = targets["cls"].shape
    norm = max(1.0, targets["n_pos"])
    cls_flat = g.op(OpKind.RESHAPE, cls_node, shape=(h, w))
    cls_l = g.op(OpKind.FOCAL_LOSS, cls_flat, targets=targets["cls"],
                 alpha=FOCAL_ALPHA, gamma=FOCAL_GAMMA, normalizer=norm)
    reg_l = g.op(OpKind.SMOOTH_L1, reg_node, targets=targets["reg"],
                 mask=targets["reg_mask"], beta=SMOOTH_L1_BETA, normalizer=norm)
    dir_l = g.op(OpKind.CROSS_ENTROPY, dir_node, targets=targets["dir"],
                 mask=targets["pos_mask"], normalizer=norm)

    depth_l = None
    for logits, bins, mask in depth_terms:
        term = g.op(OpKind.CROSS_ENTROPY, logits, targets=bins, mask=mask,
                    normalizer=max(1.0, float(mask.sum())))
        depth_l = term if depth_l is None else g.op(OpKind.ADD, depth_l, term)
    if depth_l is not None and len(depth_terms) > 1:
        depth_l = g.op(OpKind.SCALAR_MUL, depth_l, c=1.0 / len(depth_terms))

    total = g.op(OpKind.ADD,
                 g.op(OpKind.ADD, g.op(OpKind.SCALAR_MUL, cls_l, c=weights.lam_cls),
                      g.op(OpKind.SCALAR_MUL, reg_l, c=weights.lam_reg)),
                 g.op(OpKind.SCALAR_MUL, dir_l, c=weights.lam_dir))
    if depth_l is not None:
        total = g.op(OpKind.ADD, total,
                     g.op(OpKind.SCALAR_MUL, depth_l, c=weights.lam_depth))
    nodes = {"total": total, "cls": cls_l, "reg": reg_l, "dir": dir_l}
    if depth_l is not None:
        nodes["depth"] = depth_l
    return nodes


def total_loss(pred, gt, w=None, depth_pred=None, depth_gt=None,
               grid=None):
    """Eager loss on one DetectionMap against ego-frame GT boxes.

    `depth_pred` is an [A, D] logits array and `depth_gt` a (bins, mask)
    pair; both optional. The returned breakdown recombines exactly:
    total == combine_terms(w, ...) bitwise.
    """
    if w is None:
        w = LossWeights()
    if grid is None:
        grid = GridSpec(pred.objectness.shape[0], 51.2)
    t = assign_targets(gt, grid)
    norm = max(1.0, t["n_pos"])
    cls_l, _ = K.focal_loss_fwd([pred.objectness.reshape(t["cls"].shape)],
                                {"targets": t["cls"], "alpha": FOCAL_ALPHA,
                                 "gamma": FOCAL_GAMMA, "normalizer": norm})
    reg_l, _ = K.smooth_l1_fwd([pred.regression],
                               {"targets": t["reg"], "mask": t["reg_mask"],
                                "beta": SMOOTH_L1_BETA, "normalizer": norm})
    dir_l, _ = K.cross_entropy_fwd([pred.direction],
                                   {"targets": t["dir"], "mask": t["pos_mask"],
                                    "normalizer": norm})
    depth_l = 0.0
    if depth_pred is not None and depth_gt is not None:
        bins, mask = depth_gt
        d, _ = K.cross_entropy_fwd([depth_pred],
                                   {"targets": bins, "mask": mask,
                                    "normalizer": max(1.0, float(mask.sum()))})
        depth_l = float(d)
    cls_l, reg_l, dir_l = float(cls_l), float(reg_l), float(dir_l)
    return LossBreakdown(combine_terms(w, cls_l, reg_l, dir_l, depth_l),
                         cls_l, reg_l, dir_l, depth_l)


# ---------------------------------------------------------------------------
# decoding and evaluation

def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    e = np.exp(z[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def decode_detections(pred, score_threshold=0.2, nms_iou=0.15, grid=None):
    """DetectionMap -> ego-frame boxes: sigmoid-threshold objectness,
    decode cell regressions, resolve yaw with the direction bin, then
    greedy rotated NMS (descending score, ties by row then column)."""
    if not (0.0 <= score_threshold <= 1.0 and 0.0 <= nms_iou <= 1.0):
        raise DetectionError("thresholds must lie in [0, 1]")
    if grid is None:
        grid = GridSpec(pred.objectness.shape[0], 51.2)
    prob = _sigmoid(pred.objectness[..., 0])
    cand = []
    for i, j in np.argwhere(prob >= score_threshold):
        dx, dy, lw, ll, s, c = pred.regression[i, j]
        db = int(np.argmax(pred.direction[i, j]))
        psi = math.atan2(s, c)
        box = OrientedBox(grid.cell_center(i) + dx * grid.cell,
                          grid.cell_center(j) + dy * grid.cell,
                          math.exp(lw), math.exp(ll),
                          wrap_angle(psi + math.pi * db),
                          score=float(prob[i, j]))
        cand.append(((-float(prob[i, j]), int(i), int(j)), box))
    cand.sort(key=lambda t: t[0])
    kept = []
    for _, box in cand:
        if all(rotated_iou(box, other) <= nms_iou for other in kept):
            kept.append(box)
    return kept


def boxes_to_frame(boxes, frame_pose):
    """Express world-frame boxes in the frame of `frame_pose`."""
    world_in_frame = relative_pose(Pose(0.0, 0.0, 0.0), frame_pose)
    return [transform_box(b, world_in_frame) for b in boxes]


def match_scene(preds, gts, iou_threshold):
    """Greedy per-scene matching; returns [(score, is_tp)] rows."""
    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    taken = [False] * len(gts)
    rows = []
    for i in order:
        best, best_j = 0.0, -1
        for j, gt in enumerate(gts):
            if taken[j]:
                continue
            iou = rotated_iou(preds[i], gt)
            if iou > best:
                best, best_j = iou, j
        if best_j >= 0 and best >= iou_threshold:
            taken[best_j] = True
            rows.append((preds[i].score, 1))
        else:
            rows.append((preds[i].score, 0))
    return rows


def _ap_from_rows(rows, n_gt):
    """All-point interpolated AP from pooled (score, is_tp) rows."""
    if n_gt == 0:
        return 1.0 if not rows else 0.0
    if not rows:
        return 0.0
    rows = sorted(rows, key=lambda r: -r[0])
    tp = np.cumsum([r[1] for r in rows])
    fp = np.cumsum([1 - r[1] for r in rows])
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def evaluate_ap(preds, gts, iou_threshold):
    """Single-scene all-point AP at a rotated-IoU threshold."""
    if iou_threshold <= 0 or iou_threshold > 1:
        raise DetectionError(f"bad IoU threshold {iou_threshold}")
    return _ap_from_rows(match_scene(preds, gts, iou_threshold), len(gts))


def evaluate_ap_pooled(per_scene_preds, per_scene_gts, iou_threshold):
    """AP pooled over scenes: matching stays per-scene, the PR curve is
    built from all detections together."""
    rows = []
    n_gt = 0
    for preds, gts in zip(per_scene_preds, per_scene_gts):
        rows.extend(match_scene(preds, gts, iou_threshold))
        n_gt += len(gts)
    return _ap_from_rows(rows, n_gt)
