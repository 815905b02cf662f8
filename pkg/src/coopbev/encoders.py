"""Per-modality encoders: heterogeneous stem -> shared-shape backbone ->
1x1 shrink to the unified width -> positional channels.

Every modality emits the same [G/4, G/4, C] content grid so downstream
fusion is modality-blind. Hetero-aware adapters slot in after each
downsampling block and once more after the shrink (the BEV-conv site).

Stems:
  Pillar/BEV  log1p return-count grid -> 3x3 conv
  Voxel       occupancy slabs -> occupancy-masked 3x3 conv
  Depth       per-azimuth MLP -> softmax range distribution -> splat of
              learned ray features onto the BEV grid (lift-splat stand-in)
"""

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .adapters import (HA_SITES, build_ha_adapter, init_tensor, site_conv_kind,
                       site_down_k)
from .autodiff import Graph, OpKind, forward
from .geometry import GridSpec, Pose, position_channels, TAU
from .scene import ModalityKind, N_RAYS, N_SLABS, Observation
from .utils import rng_stream


class EncoderError(Exception):
    pass


# desk-scale widths; paper-scale analogs are config, not code
STEM_CHANNELS = 16
UNIFIED_CHANNELS = 32
DEPTH_BINS = 16


@dataclass(frozen=True)
class BEVFeature:
    """[H', W', C+3] feature grid in the owning agent's frame."""
    data: np.ndarray
    pose: Pose
    agent_index: int


@dataclass(frozen=True)
class EncoderParams:
    """View of one agent's encoder tensors inside a ParamStore."""
    modality: ModalityKind
    agent: int
    store: object
    prefix: str
    c0: int = STEM_CHANNELS
    c: int = UNIFIED_CHANNELS
    depth_bins: int = DEPTH_BINS
    grid_size: int = 48
    world_range: float = 51.2


def block_widths(c0):
    """Channel widths after downsampling blocks 1 and 2."""
    return 2 * c0, 4 * c0


def encoder_shapes(modality, c0=STEM_CHANNELS, c=UNIFIED_CHANNELS,
                   depth_bins=DEPTH_BINS):
    """Relative tensor name -> shape for one agent's encoder."""
    modality = ModalityKind(modality)
    w1, w2 = block_widths(c0)
    shapes = {}
    if modality in (ModalityKind.PILLAR, ModalityKind.BEV):
        shapes["stem/w"] = (3, 3, 1, c0)
        shapes["stem/b"] = (c0,)
    elif modality is ModalityKind.VOXEL:
        shapes["stem/w"] = (3, 3, N_SLABS, c0)
        shapes["stem/b"] = (c0,)
    else:  # depth
        h = 2 * c0
        shapes["stem/fc1_w"] = (4, h)
        shapes["stem/fc1_b"] = (h,)
        shapes["stem/dist_w"] = (h, depth_bins)
        shapes["stem/dist_b"] = (depth_bins,)
        shapes["stem/feat_w"] = (h, c0)
        shapes["stem/feat_b"] = (c0,)
    shapes.update({
        "block1/conv1_w": (3, 3, c0, w1), "block1/conv1_b": (w1,),
        "block1/conv2_w": (3, 3, w1, w1), "block1/conv2_b": (w1,),
        "block2/conv1_w": (3, 3, w1, w2), "block2/conv1_b": (w2,),
        "block2/conv2_w": (3, 3, w2, w2), "block2/conv2_b": (w2,),
        "shrink/w": (1, 1, w2, c), "shrink/b": (c,),
    })
    return shapes


def adapter_channels(c0=STEM_CHANNELS, c=UNIFIED_CHANNELS):
    """Host channel width at each HA adapter site."""
    w1, w2 = block_widths(c0)
    return {"block1": w1, "block2": w2, "post": c}


def register_encoder(store, agent, modality, seed, c0=STEM_CHANNELS,
                     c=UNIFIED_CHANNELS, depth_bins=DEPTH_BINS):
    for rel, shape in encoder_shapes(modality, c0, c, depth_bins).items():
        full = f"enc/{agent}/{rel}"
        store.add(full, init_tensor(full, shape, seed))


@lru_cache(maxsize=8)
def depth_splat_cells(world_range, grid_size, depth_bins, n_rays=N_RAYS):
    """(azimuth, range bin) -> flattened BEV cell, for the depth stem."""
    grid = GridSpec(grid_size, world_range)
    phis = -math.pi + TAU * np.arange(n_rays) / n_rays
    r = (np.arange(depth_bins) + 0.5) * world_range / depth_bins
    x = r[None, :] * np.cos(phis)[:, None]
    y = r[None, :] * np.sin(phis)[:, None]

    def to_cell(v):
        f = (v + world_range) / grid.cell
        i = np.floor(f).astype(np.int64)
        i = np.where((f == i) & (i > 0), i - 1, i)
        return np.clip(i, 0, grid_size - 1)

    return to_cell(x) * grid_size + to_cell(y)


def depth_bin_targets(ranges, world_range, depth_bins=DEPTH_BINS):
    """True range bin per azimuth plus a finite-return mask, for the depth
    supervision term."""
    finite = np.isfinite(ranges)
    clipped = np.where(finite, np.minimum(ranges, world_range), 0.0)
    bins = np.minimum((clipped / (world_range / depth_bins)).astype(np.int64),
                      depth_bins - 1)
    return bins, finite.astype(np.float64)


def preprocess_observation(obs, world_range, grid_size=48):
    """Observation payload -> named arrays the encoder graph consumes."""
    m = obs.modality
    if m in (ModalityKind.PILLAR, ModalityKind.BEV):
        counts = obs.payload["counts"]
        return {"grid": np.log1p(counts)[..., None]}
    if m is ModalityKind.VOXEL:
        occ = obs.payload["occupancy"]
        m0 = obs.payload["mask"]
        m1 = _maxpool2(m0)
        return {"grid": occ, "mask0": m0, "mask1": m1, "mask2": _maxpool2(m1)}
    ranges = obs.payload["ranges"]
    n = len(ranges)
    finite = np.isfinite(ranges)
    rn = np.where(finite, np.minimum(ranges, world_range), world_range)
    phis = -math.pi + TAU * np.arange(n, dtype=np.float64) / n
    feats = np.stack([rn / world_range, finite.astype(np.float64),
                      np.sin(phis), np.cos(phis)], axis=-1)
    return {"rays": feats}


def _maxpool2(m):
    h, w, c = m.shape
    return m.reshape(h // 2, 2, w // 2, 2, c).max(axis=(1, 3))


def build_encoder(g, prefix, modality, input_name, c0=STEM_CHANNELS,
                  c=UNIFIED_CHANNELS, depth_bins=DEPTH_BINS, grid_size=48,
                  world_range=51.2, ha_prefix=None):
    """Assemble one agent's encoder into graph `g`.

    `input_name(rel)` maps a payload key ("grid", "mask0", "rays", ...) to
    the graph-input name for this agent. Returns (content node [G/4,G/4,C],
    depth-logits node or None).
    """
    modality = ModalityKind(modality)
    p = lambda rel: g.param(f"{prefix}/{rel}")
    masks = {}
    depth_logits = None

    if modality in (ModalityKind.PILLAR, ModalityKind.BEV):
        x = g.input(input_name("grid"))
        x = g.op(OpKind.RELU, g.op(OpKind.CONV2D, x, p("stem/w"), p("stem/b"),
                                   k=3, stride=1, pad=1))
    elif modality is ModalityKind.VOXEL:
        x = g.input(input_name("grid"))
        masks["block1"] = g.input(input_name("mask1"))
        masks["block2"] = g.input(input_name("mask2"))
        m0 = g.input(input_name("mask0"))
        x = g.op(OpKind.RELU,
                 g.op(OpKind.MASKED_SPARSE_CONV, x, m0, p("stem/w"),
                      p("stem/b"), k=3, pad=1))
    else:  # depth
        rays = g.input(input_name("rays"))
        h = g.op(OpKind.RELU,
                 g.op(OpKind.ADD, g.op(OpKind.MATMUL, rays, p("stem/fc1_w")),
                      p("stem/fc1_b")))
        depth_logits = g.op(OpKind.ADD, g.op(OpKind.MATMUL, h, p("stem/dist_w")),
                            p("stem/dist_b"))
        dist = g.op(OpKind.SOFTMAX, depth_logits, axis=-1)
        feat = g.op(OpKind.ADD, g.op(OpKind.MATMUL, h, p("stem/feat_w")),
                    p("stem/feat_b"))
        cells = depth_splat_cells(world_range, grid_size, depth_bins)
        x = g.op(OpKind.RAY_SPLAT, dist, feat, cells=cells,
                 grid=(grid_size, grid_size))

    for block in ("block1", "block2"):
        x = g.op(OpKind.RELU, g.op(OpKind.CONV2D, x, p(f"{block}/conv1_w"),
                                   p(f"{block}/conv1_b"), k=3, stride=2, pad=1))
        x = g.op(OpKind.RELU, g.op(OpKind.CONV2D, x, p(f"{block}/conv2_w"),
                                   p(f"{block}/conv2_b"), k=3, stride=1, pad=1))
        if ha_prefix is not None:
            x = build_ha_adapter(g, x, f"{ha_prefix}/{block}",
                                 site_conv_kind(modality, block),
                                 down_k=site_down_k(block),
                                 mask=masks.get(block))
    x = g.op(OpKind.CONV2D, x, p("shrink/w"), p("shrink/b"), k=1, stride=1, pad=0)
    if ha_prefix is not None:
        x = build_ha_adapter(g, x, f"{ha_prefix}/post",
                             site_conv_kind(modality, "post"),
                             down_k=site_down_k("post"))
    return x, depth_logits


def append_position_channels(feature, pose=None):
    """Concatenate the 3 positional channels (normalized cell-center x and
    y, constant 1). Grids are agent-frame by construction so the channels
    are pose-independent; `pose` is accepted for interface symmetry."""
    h, w = feature.shape[0], feature.shape[1]
    return np.concatenate([feature, position_channels(h, w)], axis=-1)


def encode_agent(obs, params, adapters=None, pose=None):
    """Run one agent's encoder eagerly: Observation -> BEVFeature.

    `adapters` names the HA parameter prefix (e.g. "ha/2") to apply, or is
    None for the bare encoder. Raises on modality mismatch and on any
    non-finite intermediate.
    """
    if not isinstance(obs, Observation):
        raise EncoderError(f"expected an Observation, got {type(obs).__name__}")
    if obs.modality is not ModalityKind(params.modality):
        raise EncoderError(f"observation modality {obs.modality.value} does not "
                           f"match encoder modality "
                           f"{ModalityKind(params.modality).value}")
    arrays = preprocess_observation(obs, params.world_range, params.grid_size)
    g = Graph()
    content, _ = build_encoder(
        g, params.prefix, params.modality, lambda rel: rel,
        c0=params.c0, c=params.c, depth_bins=params.depth_bins,
        grid_size=params.grid_size, world_range=params.world_range,
        ha_prefix=adapters)
    g.output("content", content)
    out = forward(g, params.store, arrays)["content"]
    if pose is None:
        pose = Pose(0.0, 0.0, 0.0)
    return BEVFeature(append_position_channels(out), pose, params.agent)
