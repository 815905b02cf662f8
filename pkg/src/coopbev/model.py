"""End-to-end model assembly for the staged collaboration pipeline.

A *roster* maps scene agent slots to parameter namespaces: which encoder
prefix a slot reads (shared `enc/0` for homogeneous fleets, per-agent
`enc/<a>` after adaptation) and whether a hetero-aware adapter set
`ha/<a>` is threaded through it. On top of a roster this module builds
the full per-scene training graph (observations -> encoders -> warp +
fusion -> head -> losses) and runs the eager detection pipeline used for
evaluation.
"""

from dataclasses import dataclass, field

import numpy as np

from .adapters import (init_tensor, register_ha_adapters, register_mc_adapter)
from .autodiff import Graph, OpKind, ParamStore
from .detection import (LossWeights, assign_targets, boxes_to_frame,
                        build_head, build_losses, decode_detections,
                        head_selector_inputs, head_forward, register_head)
from .encoders import (DEPTH_BINS, STEM_CHANNELS, UNIFIED_CHANNELS,
                       EncoderParams, adapter_channels, build_encoder,
                       depth_bin_targets, encode_agent, encoder_shapes,
                       preprocess_observation, register_encoder)
from .fusion import WINDOW, build_fusion, fuse, register_fusion
from .geometry import GridSpec, affine_covers_nothing, position_channels, warp_affine
from .scene import ModalityKind, Observation, ground_truth_boxes, render_observation


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class AgentSlot:
    """One scene agent's binding to parameter namespaces."""
    index: int              # position in scene.agents
    modality: ModalityKind
    enc: str                # encoder prefix, e.g. "enc/0"
    ha: str = None          # HA adapter prefix, e.g. "ha/2", or None


@dataclass(frozen=True)
class ModelConfig:
    c0: int = STEM_CHANNELS
    c: int = UNIFIED_CHANNELS
    r: int = 4
    depth_bins: int = DEPTH_BINS
    grid_size: int = 48
    world_range: float = 51.2
    window: int = WINDOW
    weights: LossWeights = field(default_factory=LossWeights)
    score_threshold: float = 0.2
    nms_iou: float = 0.15

    def feature_grid(self):
        return GridSpec(self.grid_size // 4, self.world_range)


def shared_roster(n_agents, modality):
    """Homogeneous fleet, every slot reading the shared base encoder."""
    m = ModalityKind(modality)
    return tuple(AgentSlot(i, m, "enc/0") for i in range(n_agents))


def staged_roster(modalities):
    """Slot 0 keeps the base encoder; each later slot gets its adapted
    per-agent encoder and HA adapter namespace."""
    slots = [AgentSlot(0, ModalityKind(modalities[0]), "enc/0")]
    for i, m in enumerate(modalities[1:], start=1):
        slots.append(AgentSlot(i, ModalityKind(m), f"enc/{i}", f"ha/{i}"))
    return tuple(slots)


def roster_modalities(roster):
    return [slot.modality.value for slot in roster]


# ---------------------------------------------------------------------------
# stage parameter management

def init_base_params(cfg, seed, modality):
    """Fresh parameters for the base stage: one shared encoder, fusion,
    head."""
    store = ParamStore()
    register_encoder(store, 0, modality, seed, cfg.c0, cfg.c, cfg.depth_bins)
    register_fusion(store, seed, cfg.c)
    register_head(store, seed, cfg.c)
    return store


def derive_agent_params(store, cfg, agent, modality, base_modality, seed,
                        base_prefix="enc/0"):
    """Materialize enc/<agent> from the base encoder and register its HA
    adapters. Backbone and shrink tensors are copied; the stem is copied
    only when the modality matches the base, otherwise freshly
    initialized (its shape differs). Returns the prefixes that the
    adaptation stage trains."""
    modality = ModalityKind(modality)
    if agent == 0:
        raise ModelError("agent 0 is the base encoder; pick a new slot id")
    fresh_stem = modality is not ModalityKind(base_modality)
    for rel, shape in encoder_shapes(modality, cfg.c0, cfg.c,
                                     cfg.depth_bins).items():
        full = f"enc/{agent}/{rel}"
        if rel.startswith("stem/") and fresh_stem:
            store.add(full, init_tensor(full, shape, seed))
        else:
            store.add(full, store[f"{base_prefix}/{rel}"].copy())
    register_ha_adapters(store, agent, modality,
                         adapter_channels(cfg.c0, cfg.c), cfg.r, seed)
    trainable = [f"ha/{agent}/"]
    if fresh_stem:
        trainable.append(f"enc/{agent}/stem/")
    return tuple(trainable)


def add_mc_params(store, cfg, seed):
    """Register the multi-cognitive adapter for the collaborative
    fine-tuning stage (identity at init)."""
    register_mc_adapter(store, cfg.c, cfg.r, seed)
    return ("mc/",)


# ---------------------------------------------------------------------------
# per-scene training graph

def scene_inputs(scene, roster, cfg, poses=None):
    """Render and preprocess every roster agent; returns (arrays keyed
    a<slot>/<payload>, observations by slot index, poses used)."""
    if poses is None:
        poses = [scene.agents[slot.index][1] for slot in roster]
    arrays, observations = {}, {}
    for slot, pose in zip(roster, poses):
        spec = scene.agents[slot.index][0]
        if spec.modality is not slot.modality:
            raise ModelError(
                f"scene agent {slot.index} is {spec.modality.value}, roster "
                f"says {slot.modality.value}")
        obs = render_observation(scene, slot.index, pose=pose,
                                 grid_size=cfg.grid_size)
        observations[slot.index] = obs
        payload = preprocess_observation(obs, cfg.world_range, cfg.grid_size)
        for key, arr in payload.items():
            arrays[f"a{slot.index}/{key}"] = arr
    return arrays, observations, list(poses)


def build_scene_graph(scene, cfg, store, roster, ego=0, gt_mode="collab",
                      use_mc=False):
    """Assemble one scene's full differentiable pass.

    `ego` is a roster position (not a scene index). Returns (graph,
    inputs dict, targets dict); the graph exposes outputs "loss", "cls",
    "reg", "dir", and "depth" when any depth agent is present.
    """
    if not (0 <= ego < len(roster)):
        raise ModelError(f"ego position {ego} outside roster of {len(roster)}")
    if gt_mode not in ("single", "collab"):
        raise ModelError(f"unknown gt mode {gt_mode!r}")
    order = [roster[ego]] + [s for i, s in enumerate(roster) if i != ego]
    arrays, observations, _ = scene_inputs(scene, order, cfg)
    poses = [scene.agents[slot.index][1] for slot in order]
    fgrid = cfg.feature_grid()
    h = fgrid.size

    g = Graph()
    contents, affines, depth_terms = [], [], []
    for k, slot in enumerate(order):
        if k == 0:
            affine = None
        else:
            affine = warp_affine(poses[k], poses[0], fgrid)
            if affine_covers_nothing(affine, h, h):
                continue
        content, depth_logits = build_encoder(
            g, slot.enc, slot.modality,
            lambda key, i=slot.index: f"a{i}/{key}",
            c0=cfg.c0, c=cfg.c, depth_bins=cfg.depth_bins,
            grid_size=cfg.grid_size, world_range=cfg.world_range,
            ha_prefix=slot.ha)
        contents.append(content)
        affines.append(affine)
        if depth_logits is not None:
            bins, mask = depth_bin_targets(
                observations[slot.index].payload["ranges"], cfg.world_range,
                cfg.depth_bins)
            depth_terms.append((depth_logits, bins, mask))

    mc_prefix = "mc/post_local" if use_mc else None
    fused, att = build_fusion(g, contents, affines, (h, h), c=cfg.c,
                              window=cfg.window, mc_prefix=mc_prefix)
    cls, direction, reg = build_head(g, fused)

    agent_index = None if gt_mode == "collab" else order[0].index
    gt_world = ground_truth_boxes(scene, agent_index)
    targets = assign_targets(boxes_to_frame(gt_world, poses[0]), fgrid)
    nodes = build_losses(g, cls, direction, reg, targets, cfg.weights,
                         depth_terms)
    for name, node in nodes.items():
        g.output("loss" if name == "total" else name, node)
    g.output("attention", att)

    arrays["pos"] = position_channels(h, h)
    arrays.update(head_selector_inputs())
    return g, arrays, targets


# ---------------------------------------------------------------------------
# eager detection pipeline

@dataclass(frozen=True)
class AgentView:
    """One agent's contribution to an evaluation pass: its observation
    and the pose it claims to be at (poses may be channel-degraded)."""
    slot: AgentSlot
    observation: Observation
    pose: object


def scene_views(scene, roster, cfg):
    """Clean views: every roster agent rendered at its true pose."""
    return [AgentView(slot, render_observation(scene, slot.index,
                                               grid_size=cfg.grid_size),
                      scene.agents[slot.index][1])
            for slot in roster]


def detect(cfg, store, views, ego=0, use_mc=False, return_weights=False):
    """Views -> ego-frame detections. `views[ego]` is the fusing agent;
    the others are collaborators (already channel-filtered: a dropped
    agent is simply absent from the list)."""
    if not views:
        raise ModelError("detection needs at least the ego view")
    if not (0 <= ego < len(views)):
        raise ModelError(f"ego position {ego} outside {len(views)} views")
    order = [views[ego]] + [v for i, v in enumerate(views) if i != ego]
    features, poses = [], []
    for view in order:
        slot = view.slot
        params = EncoderParams(slot.modality, slot.index, store, slot.enc,
                               cfg.c0, cfg.c, cfg.depth_bins, cfg.grid_size,
                               cfg.world_range)
        features.append(encode_agent(view.observation, params,
                                     adapters=slot.ha, pose=view.pose))
        poses.append(view.pose)
    out = fuse(features, poses, params=store, mc=use_mc,
               world_range=cfg.world_range, window=cfg.window,
               return_weights=return_weights)
    fused, weights = out if return_weights else (out, None)
    boxes = decode_detections(head_forward(fused, store),
                              cfg.score_threshold, cfg.nms_iou,
                              grid=cfg.feature_grid())
    if return_weights:
        return boxes, weights
    return boxes


def ego_ground_truth(scene, roster, cfg, ego=0, mode="collab"):
    """Scene GT expressed in the ego agent's frame."""
    slot = roster[ego]
    agent_index = None if mode == "collab" else slot.index
    return boxes_to_frame(ground_truth_boxes(scene, agent_index),
                          scene.agents[slot.index][1])
