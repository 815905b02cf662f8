"""Ego-side collaborative fusion.

Pipeline: warp every collaborator's content grid into the ego frame
(bilinear, zero outside coverage), refresh positional channels, project
each agent C+3 -> C with one shared linear map, then attend: per-cell
cross-agent attention (ego queries, all agents as keys/values), the
optional multi-cognitive adapter, and windowed spatial self-attention
with a residual.

Collaborators whose warp cannot touch the ego grid at all (fully out of
range, or dropped by the channel) are excluded from the stack at build
time, which realizes the "zero-filled collaborators act as if absent"
contract exactly.
"""

import math
from dataclasses import dataclass

import numpy as np

from .adapters import build_mc_adapter
from .autodiff import Graph, OpKind, ParamStore, forward
from .encoders import UNIFIED_CHANNELS
from .geometry import (GridSpec, affine_covers_nothing, position_channels,
                       warp_affine)
from .utils import rng_stream, write_csv
from . import kernels as K


class FusionError(Exception):
    pass


WINDOW = 4


@dataclass(frozen=True)
class AttentionParams:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray

    @staticmethod
    def from_store(store, prefix):
        return AttentionParams(*(store[f"{prefix}/{t}"]
                                 for t in ("wq", "wk", "wv", "wo")))


@dataclass(frozen=True)
class FusedStack:
    """[N, H', W', C] aligned and projected agent features, ego first."""
    data: np.ndarray
    agents: tuple


def fusion_shapes(c=UNIFIED_CHANNELS):
    shapes = {"proj/w": (c + 3, c), "proj/b": (c,)}
    for stage in ("local", "global"):
        for t in ("wq", "wk", "wv", "wo"):
            shapes[f"{stage}/{t}"] = (c, c)
    return shapes


def register_fusion(store, seed, c=UNIFIED_CHANNELS):
    from .adapters import init_tensor
    for rel, shape in fusion_shapes(c).items():
        full = f"fus/{rel}"
        store.add(full, init_tensor(full, shape, seed))


# ---------------------------------------------------------------------------
# graph builder

def build_fusion(g, contents, affines, hw, c=UNIFIED_CHANNELS, window=WINDOW,
                 mc_prefix=None, pos_input="pos"):
    """Assemble the fusion stack into `g`.

    `contents[i]` is agent i's [H', W', C] content node (ego first);
    `affines[i]` is the ego-cell -> source-cell affine (None for the ego
    itself); `hw` is the spatial extent (H', W'). Returns (fused node,
    attention-weights node [H', W', N]).
    """
    if not contents:
        raise FusionError("fusion needs at least one agent")
    if len(contents) != len(affines):
        raise FusionError("contents and affines must pair up")
    h, w = hw
    p = lambda rel: g.param(f"fus/{rel}")
    pos = g.input(pos_input)

    projected = []
    for node, affine in zip(contents, affines):
        aligned = node if affine is None else g.op(OpKind.BILINEAR_WARP, node,
                                                   affine=tuple(affine))
        full = g.op(OpKind.CONCAT, aligned, pos, axis=-1)
        proj = g.op(OpKind.ADD, g.op(OpKind.MATMUL, full, p("proj/w")),
                    p("proj/b"))
        projected.append(proj)

    # local stage: per-cell attention across agents, ego as the query
    n = len(projected)
    rows = [g.op(OpKind.RESHAPE, pr, shape=(h, w, 1, c)) for pr in projected]
    stack = rows[0] if n == 1 else g.op(OpKind.CONCAT, *rows, axis=2)
    q = g.op(OpKind.RESHAPE, g.op(OpKind.MATMUL, projected[0], p("local/wq")),
             shape=(h, w, 1, c))
    k = g.op(OpKind.MATMUL, stack, p("local/wk"))
    v = g.op(OpKind.MATMUL, stack, p("local/wv"))
    scores = g.op(OpKind.SCALAR_MUL, g.op(OpKind.MATMUL, q, k, tb=True),
                  c=1.0 / math.sqrt(c))
    att = g.op(OpKind.SOFTMAX, scores, axis=-1)
    ctx = g.op(OpKind.RESHAPE, g.op(OpKind.MATMUL, att, v), shape=(h, w, c))
    local = g.op(OpKind.MATMUL, ctx, p("local/wo"))
    att_map = g.op(OpKind.RESHAPE, att, shape=(h, w, n))

    x = local
    if mc_prefix is not None:
        x = build_mc_adapter(g, x, prefix=mc_prefix)

    fused = _build_window_attention(g, x, p, (h, w), c, window)
    return fused, att_map


def _build_window_attention(g, x, p, hw, c, window):
    """Non-overlapping window self-attention with a residual skip."""
    h, w = hw
    if h % window or w % window:
        raise FusionError(f"grid {h}x{w} not divisible by window {window}")
    nh, nw = h // window, w // window
    t = g.op(OpKind.RESHAPE, x, shape=(nh, window, nw, window, c))
    t = g.op(OpKind.TRANSPOSE, t, perm=(0, 2, 1, 3, 4))
    tokens = g.op(OpKind.RESHAPE, t, shape=(nh * nw, window * window, c))
    q = g.op(OpKind.MATMUL, tokens, p("global/wq"))
    k = g.op(OpKind.MATMUL, tokens, p("global/wk"))
    v = g.op(OpKind.MATMUL, tokens, p("global/wv"))
    scores = g.op(OpKind.SCALAR_MUL, g.op(OpKind.MATMUL, q, k, tb=True),
                  c=1.0 / math.sqrt(c))
    ctx = g.op(OpKind.MATMUL, g.op(OpKind.SOFTMAX, scores, axis=-1), v)
    out = g.op(OpKind.MATMUL, ctx, p("global/wo"))
    out = g.op(OpKind.RESHAPE, out, shape=(nh, nw, window, window, c))
    out = g.op(OpKind.TRANSPOSE, out, perm=(0, 2, 1, 3, 4))
    out = g.op(OpKind.RESHAPE, out, shape=(h, w, c))
    return g.op(OpKind.ADD, x, out)


# ---------------------------------------------------------------------------
# eager operations

def spatial_align(feature, pose_src, pose_ego, world_range=51.2):
    """Warp a BEVFeature from the src frame into the ego frame; content
    channels resample bilinearly (zero outside), positional channels are
    rebuilt for the ego grid."""
    from .encoders import BEVFeature
    data = feature.data
    h, w = data.shape[0], data.shape[1]
    if h != w:
        raise FusionError(f"square grids only, got {h}x{w}")
    content = data[..., :-3]
    grid = GridSpec(h, world_range)
    affine = warp_affine(pose_src, pose_ego, grid)
    warped, _ = K.bilinear_warp_fwd([content], {"affine": affine})
    out = np.concatenate([warped, position_channels(h, w)], axis=-1)
    return BEVFeature(out, pose_ego, feature.agent_index)


def stack_project(aligned, store):
    """Project each aligned C+3 feature to C with the shared fus/proj map
    and stack along the agent axis, ego first."""
    if not aligned:
        raise FusionError("stack_project needs at least one feature")
    shapes = {f.data.shape for f in aligned}
    if len(shapes) != 1:
        raise FusionError(f"mismatched feature shapes: {sorted(shapes)}")
    w = store["fus/proj/w"]
    b = store["fus/proj/b"]
    if aligned[0].data.shape[-1] != w.shape[0]:
        raise FusionError(f"projection expects {w.shape[0]} channels, got "
                          f"{aligned[0].data.shape[-1]}")
    data = np.stack([f.data @ w + b for f in aligned], axis=0)
    return FusedStack(data, tuple(f.agent_index for f in aligned))


def cross_agent_attention(stack, params, return_weights=False):
    """Per-cell attention over the agent axis: softmax(Q K^T / sqrt(C))
    with the ego row (index 0) as the query."""
    s = stack.data
    n, h, w, c = s.shape
    q = s[0] @ params.wq
    k = np.einsum("nhwc,cd->nhwd", s, params.wk)
    v = np.einsum("nhwc,cd->nhwd", s, params.wv)
    scores = np.einsum("hwc,nhwc->hwn", q, k) / math.sqrt(c)
    scores = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    att = e / e.sum(axis=-1, keepdims=True)
    out = np.einsum("hwn,nhwc->hwc", att, v) @ params.wo
    if return_weights:
        return out, att
    return out


def fuse(features, poses=None, params=None, mc=None, world_range=51.2,
         window=WINDOW, return_weights=False):
    """Full eager fusion of BEVFeatures (ego first) using fus/* (and
    optionally mc/*) parameters from `params` (a ParamStore)."""
    if params is None:
        raise FusionError("fuse needs a parameter store")
    if not features:
        raise FusionError("fusion needs at least one agent")
    if poses is None:
        poses = [f.pose for f in features]
    c = features[0].data.shape[-1] - 3
    h = features[0].data.shape[0]
    grid = GridSpec(h, world_range)

    contents, affines = [], []
    arrays = {}
    for i, (f, pose) in enumerate(zip(features, poses)):
        if i == 0:
            affine = None
        else:
            affine = warp_affine(pose, poses[0], grid)
            if affine_covers_nothing(affine, h, h):
                continue
        contents.append(f"agent{i}")
        affines.append(affine)
        arrays[f"agent{i}"] = f.data[..., :c]

    g = Graph()
    nodes = [g.input(nm) for nm in contents]
    mc_prefix = "mc/post_local" if mc else None
    fused, att = build_fusion(g, nodes, affines, (h, h), c=c, window=window,
                              mc_prefix=mc_prefix)
    g.output("fused", fused)
    g.output("attention", att)
    arrays["pos"] = position_channels(h, h)
    out = forward(g, params, arrays)
    if return_weights:
        return out["fused"], out["attention"]
    return out["fused"]


def attention_to_csv(weights, path):
    """Dump per-cell per-agent attention weights: row, col, then one
    column per stacked agent."""
    h, w, n = weights.shape
    header = ["row", "col"] + [f"agent_{i}" for i in range(n)]
    rows = [[i, j] + [float(weights[i, j, a]) for a in range(n)]
            for i in range(h) for j in range(w)]
    return write_csv(path, header, rows)
