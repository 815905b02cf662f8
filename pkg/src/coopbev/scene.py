"""Synthetic multi-agent BEV world: scene sampling, occlusion-aware ray-cast
observations per sensor modality, and visibility-based ground truth.

Everything is keyed by (seed, arguments): identical calls produce identical
scenes, observations, and ground truth, byte for byte.
"""

import json
import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import GridSpec, OrientedBox, Pose, rotated_iou, wrap_angle, TAU
from .utils import rng_stream


class SceneError(Exception):
    pass


class ModalityKind(Enum):
    PILLAR = "pillar"
    VOXEL = "voxel"
    DEPTH = "depth"
    BEV = "bev"


@dataclass(frozen=True)
class AgentSpec:
    modality: ModalityKind


@dataclass(frozen=True)
class Scene:
    seed: int
    world_range: float
    agents: tuple  # of (AgentSpec, Pose)
    objects: tuple  # of OrientedBox


@dataclass(frozen=True)
class Observation:
    modality: ModalityKind
    payload: dict  # modality-specific arrays, see render_observation


# rejection-sampling caps and physical constants
_MAX_ATTEMPTS = 1000
_MIN_AGENT_SPACING = 10.0
_BOX_MARGIN = 1.0  # per-side inflation used during placement rejection

# desk-scale sensor defaults
N_RAYS = 360
N_SLABS = 4
GRID_SIZE = 48


def generate_scene(seed, n_agents, n_objects, world_range, modalities=None):
    """Sample a reproducible scene: agents spread near the center, truck-scale
    oriented boxes with guaranteed pairwise clearance (BEV IoU exactly 0)."""
    if not (1 <= n_agents <= 8):
        raise SceneError(f"n_agents must be in [1, 8], got {n_agents}")
    if not (0 <= n_objects <= 64):
        raise SceneError(f"n_objects must be in [0, 64], got {n_objects}")
    if world_range <= 0:
        raise SceneError(f"world_range must be positive, got {world_range}")
    if modalities is None:
        modalities = [ModalityKind.PILLAR] * n_agents
    modalities = [ModalityKind(m) if not isinstance(m, ModalityKind) else m
                  for m in modalities]
    if len(modalities) != n_agents:
        raise SceneError(f"{len(modalities)} modalities for {n_agents} agents")

    rng = rng_stream(seed, "scene")
    agents = []
    for k in range(n_agents):
        for _ in range(_MAX_ATTEMPTS):
            x, y = rng.uniform(-0.3 * world_range, 0.3 * world_range, size=2)
            yaw = rng.uniform(-math.pi, math.pi)
            if all((x - p.x) ** 2 + (y - p.y) ** 2 >= _MIN_AGENT_SPACING ** 2
                   for _, p in agents):
                agents.append((AgentSpec(modalities[k]), Pose(x, y, yaw)))
                break
        else:
            raise SceneError(
                f"agent placement infeasible: could not keep agent {k} at "
                f">= {_MIN_AGENT_SPACING} m from the others within "
                f"{_MAX_ATTEMPTS} attempts")

    agent_pts = np.array([[p.x, p.y] for _, p in agents])
    objects = []
    inflated = []
    for k in range(n_objects):
        for _ in range(_MAX_ATTEMPTS):
            cx, cy = rng.uniform(-0.6 * world_range, 0.6 * world_range, size=2)
            w = rng.uniform(3.5, 5.0)
            l = rng.uniform(7.0, 10.0)
            # rectangles are front/back symmetric, so a yaw beyond +-pi/2
            # describes the same box; keep labels in the identifiable half
            yaw = rng.uniform(-math.pi / 2, math.pi / 2)
            cand = OrientedBox(cx, cy, w + 2 * _BOX_MARGIN, l + 2 * _BOX_MARGIN, yaw)
            if bool(cand.contains(agent_pts).any()):
                continue
            if any(rotated_iou(cand, other) > 0.0 for other in inflated):
                continue
            objects.append(OrientedBox(cx, cy, w, l, yaw))
            inflated.append(cand)
            break
        else:
            raise SceneError(
                f"object placement infeasible: could not place object {k} "
                f"without overlap (margin {_BOX_MARGIN} m) within "
                f"{_MAX_ATTEMPTS} attempts")

    return Scene(seed=int(seed), world_range=float(world_range),
                 agents=tuple(agents), objects=tuple(objects))


def _slabs_of(obj_index):
    """Deterministic fake height: number of occupied slabs for an object."""
    return 1 + (obj_index * 2654435761) % N_SLABS


def ray_cast(scene, pose, n_rays=N_RAYS, sensor_range=None):
    """First-hit ray cast from `pose` over evenly spaced agent-frame azimuths.

    Returns (t, obj_idx): ranges (inf for no return) and hit object index
    (-1 for none). Azimuth a points along angle -pi + 2*pi*a/n in the agent
    frame, so bin n/2 is exactly forward.
    """
    if sensor_range is None:
        sensor_range = scene.world_range
    phis = -math.pi + TAU * np.arange(n_rays, dtype=np.float64) / n_rays
    # world-frame ray directions
    ang = phis + pose.yaw
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=-1)
    t_best = np.full(n_rays, np.inf)
    idx_best = np.full(n_rays, -1, dtype=np.int64)
    for oi, box in enumerate(scene.objects):
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        ox = c * (pose.x - box.cx) + s * (pose.y - box.cy)
        oy = -s * (pose.x - box.cx) + c * (pose.y - box.cy)
        dx = c * dirs[:, 0] + s * dirs[:, 1]
        dy = -s * dirs[:, 0] + c * dirs[:, 1]
        lo = np.full(n_rays, -np.inf)
        hi = np.full(n_rays, np.inf)
        for o, d, half in ((ox, dx, box.l / 2.0), (oy, dy, box.w / 2.0)):
            with np.errstate(divide="ignore", invalid="ignore"):
                t0 = (-half - o) / d
                t1 = (half - o) / d
            para_in = abs(o) <= half
            axis_lo = np.where(d != 0.0, np.minimum(t0, t1),
                               np.where(para_in, -np.inf, np.inf))
            axis_hi = np.where(d != 0.0, np.maximum(t0, t1),
                               np.where(para_in, np.inf, -np.inf))
            lo = np.maximum(lo, axis_lo)
            hi = np.minimum(hi, axis_hi)
        t_enter = np.where(lo >= 1e-6, lo, np.where(hi >= 1e-6, hi, np.inf))
        hit = (hi >= lo) & np.isfinite(t_enter) & (t_enter <= sensor_range)
        closer = hit & (t_enter < t_best)
        t_best = np.where(closer, t_enter, t_best)
        idx_best = np.where(closer, oi, idx_best)
    return t_best, idx_best


def visible_object_indices(scene, agent_index, pose=None):
    """Objects with at least one unoccluded first-hit ray from the agent."""
    if pose is None:
        pose = scene.agents[agent_index][1]
    _, idx = ray_cast(scene, pose)
    return sorted(int(i) for i in np.unique(idx) if i >= 0)


def render_observation(scene, agent_index, pose=None, grid_size=GRID_SIZE):
    """Ray-cast the scene from one agent and format its modality payload.

    Payloads (agent-frame grids):
      Pillar/BEV: {"counts": [G, G]} return counts per cell
      Voxel:      {"occupancy": [G, G, Z], "mask": [G, G, 1]}
      Depth:      {"ranges": [A]} first-hit range per azimuth, inf = none
    """
    if not (0 <= agent_index < len(scene.agents)):
        raise SceneError(f"agent index {agent_index} out of range")
    spec, own_pose = scene.agents[agent_index]
    if pose is None:
        pose = own_pose
    t, idx = ray_cast(scene, pose)
    if spec.modality is ModalityKind.DEPTH:
        return Observation(spec.modality, {"ranges": t})

    grid = GridSpec(grid_size, scene.world_range)
    hit = np.isfinite(t)
    phis = -math.pi + TAU * np.arange(len(t), dtype=np.float64) / len(t)
    px = t[hit] * np.cos(phis[hit])
    py = t[hit] * np.sin(phis[hit])
    obj = idx[hit]

    def to_cell(x):
        f = (x + scene.world_range) / grid.cell
        i = np.floor(f).astype(np.int64)
        i = np.where((f == i) & (i > 0), i - 1, i)
        return np.clip(i, 0, grid_size - 1)

    ci, cj = to_cell(px), to_cell(py)
    if spec.modality in (ModalityKind.PILLAR, ModalityKind.BEV):
        counts = np.zeros((grid_size, grid_size))
        np.add.at(counts, (ci, cj), 1.0)
        return Observation(spec.modality, {"counts": counts})

    # voxel: binary occupancy over fake-height slabs
    occ = np.zeros((grid_size, grid_size, N_SLABS))
    slab_count = np.array([_slabs_of(int(o)) for o in obj], dtype=np.int64) \
        if len(obj) else np.zeros(0, dtype=np.int64)
    for z in range(N_SLABS):
        sel = slab_count > z
        occ[ci[sel], cj[sel], z] = 1.0
    mask = (occ.sum(axis=-1, keepdims=True) > 0).astype(np.float64)
    return Observation(spec.modality, {"occupancy": occ, "mask": mask})


def ground_truth_boxes(scene, agent_index=None):
    """Visibility-based GT: one agent's view (agent_index) or the
    collaborative union over all agents (agent_index=None)."""
    if agent_index is None:
        seen = set()
        for a in range(len(scene.agents)):
            seen.update(visible_object_indices(scene, a))
    else:
        seen = set(visible_object_indices(scene, agent_index))
    return [scene.objects[i] for i in sorted(seen)]


# ---------------------------------------------------------------------------
# lossless JSON round trip

def scene_to_json(scene):
    doc = {
        "seed": scene.seed,
        "world_range_m": scene.world_range,
        "agents": [{"modality": spec.modality.value,
                    "pose": {"x_m": p.x, "y_m": p.y, "yaw_rad": p.yaw}}
                   for spec, p in scene.agents],
        "objects": [{"cx_m": b.cx, "cy_m": b.cy, "w_m": b.w, "l_m": b.l,
                     "yaw_rad": b.yaw, "score": b.score}
                    for b in scene.objects],
    }
    return json.dumps(doc, indent=2, sort_keys=True, allow_nan=False)


def scene_from_json(text):
    doc = json.loads(text)
    agents = tuple(
        (AgentSpec(ModalityKind(a["modality"])),
         Pose(a["pose"]["x_m"], a["pose"]["y_m"], a["pose"]["yaw_rad"]))
        for a in doc["agents"])
    objects = tuple(
        OrientedBox(o["cx_m"], o["cy_m"], o["w_m"], o["l_m"], o["yaw_rad"],
                    o["score"])
        for o in doc["objects"])
    return Scene(seed=doc["seed"], world_range=doc["world_range_m"],
                 agents=agents, objects=objects)
