"""Simulated V2X channel between agents: claimed-pose noise, message
drops, and latency, plus the robustness sweep built on top of them.

Latency model: agents advance along their heading at 1 m per frame. At a
latency of L frames the fusing agent perceives from its stamp-L pose
while collaborator messages still carry their stamp-0 render and the
truthful stamp-0 pose — stale but honestly stamped. At L=0 and zero
noise the channel is a bitwise no-op.

Pose noise adds N(0, var) to the claimed x and y and N(0, 0.1*var) to
the claimed yaw (re-normalized); the render itself is unaffected, so the
receiver warps real features with a wrong transform. Variance 0 draws
nothing at all from the stream.
"""

import math
from dataclasses import dataclass

import numpy as np

from .detection import boxes_to_frame, evaluate_ap_pooled
from .geometry import Pose
from .model import AgentView, detect, scene_views
from .orchestration import scene_pool
from .scene import render_observation, visible_object_indices
from .utils import rng_stream, write_csv


class ChannelError(Exception):
    pass


AGENT_SPEED = 1.0  # meters per frame along heading

SWEEP_HEADER = ("variance", "latency_frames", "iou_threshold", "ap",
                "n_scenes", "seed")
SWEEP_VARIANCES = (0.0, 0.2, 0.4, 0.6, 0.8)
SWEEP_LATENCIES = (0, 1, 2)


@dataclass(frozen=True)
class ChannelConfig:
    pose_noise_var: float = 0.0
    drop_rate: float = 0.0
    latency: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.pose_noise_var < 0:
            raise ChannelError(f"negative noise variance {self.pose_noise_var}")
        if not (0.0 <= self.drop_rate <= 1.0):
            raise ChannelError(f"drop rate {self.drop_rate} outside [0, 1]")
        if self.latency < 0 or int(self.latency) != self.latency:
            raise ChannelError(f"latency must be a whole number of frames, "
                               f"got {self.latency}")


def pose_at_stamp(pose, stamp, speed=AGENT_SPEED):
    """Linear motion track: advance along the heading."""
    if stamp == 0:
        return pose
    return Pose(pose.x + stamp * speed * math.cos(pose.yaw),
                pose.y + stamp * speed * math.sin(pose.yaw), pose.yaw)


def apply_pose_noise(pose, var, rng):
    """Noisy claimed pose; exact passthrough (no draws) at variance 0."""
    if var == 0.0:
        return pose
    std = math.sqrt(var)
    dx, dy = rng.normal(0.0, std, size=2)
    dyaw = rng.normal(0.0, math.sqrt(0.1 * var))
    return Pose(pose.x + dx, pose.y + dy, pose.yaw + dyaw)


def broadcast(scene, roster, channel, scene_index, cfg):
    """One communication round: the fusing agent's fresh view plus each
    collaborator's (possibly dropped) stale message. Returns AgentViews
    with the ego first; dropped collaborators are simply absent.

    The per-message stream is keyed (seed, "channel", scene, agent,
    stamp): the drop decision is drawn first, then the pose noise."""
    ego_slot = roster[0]
    ego_pose = pose_at_stamp(scene.agents[ego_slot.index][1], channel.latency)
    views = [AgentView(ego_slot,
                       render_observation(scene, ego_slot.index,
                                          pose=ego_pose,
                                          grid_size=cfg.grid_size),
                       ego_pose)]
    for slot in roster[1:]:
        true_pose = scene.agents[slot.index][1]
        rng = rng_stream(channel.seed, "channel", scene_index, slot.index, 0)
        if channel.drop_rate > 0.0 and rng.uniform() < channel.drop_rate:
            continue
        claimed = apply_pose_noise(true_pose, channel.pose_noise_var, rng)
        views.append(AgentView(slot,
                               render_observation(scene, slot.index,
                                                  grid_size=cfg.grid_size),
                               claimed))
    return views


def channel_ground_truth(scene, roster, channel):
    """What the fused view is accountable for under this channel: the
    ego's visibility at its current pose plus every collaborator's
    stamp-0 visibility, in the ego's current frame. Drops do not shrink
    the GT — a lost message is a miss, not an excuse."""
    ego_slot = roster[0]
    ego_pose = pose_at_stamp(scene.agents[ego_slot.index][1], channel.latency)
    seen = set(visible_object_indices(scene, ego_slot.index, pose=ego_pose))
    for slot in roster[1:]:
        seen.update(visible_object_indices(scene, slot.index))
    boxes = [scene.objects[i] for i in sorted(seen)]
    return boxes_to_frame(boxes, ego_pose)


def run_cell(cfg, store, roster, scenes, channel, use_mc=False,
             iou_thresholds=(0.5, 0.7)):
    """Pooled AP over `scenes` for one channel setting, at each IoU
    threshold. Returns {threshold: ap}."""
    preds, gts = [], []
    for k, scene in enumerate(scenes):
        views = broadcast(scene, roster, channel, k, cfg)
        preds.append(detect(cfg, store, views, use_mc=use_mc))
        gts.append(channel_ground_truth(scene, roster, channel))
    return {t: evaluate_ap_pooled(preds, gts, t) for t in iou_thresholds}


def robustness_sweep(cfg, store, roster, seed, n_scenes=10,
                     variances=SWEEP_VARIANCES, latencies=SWEEP_LATENCIES,
                     use_mc=False, iou_thresholds=(0.5, 0.7)):
    """The variance x latency grid; two rows (IoU 0.5, 0.7) per cell."""
    scenes = scene_pool(seed, n_scenes, max(s.index for s in roster) + 1,
                        [s.modality.value for s in roster], cfg.world_range,
                        tag="sweep")
    rows = []
    for var in variances:
        for lat in latencies:
            channel = ChannelConfig(var, 0.0, lat, seed)
            aps = run_cell(cfg, store, roster, scenes, channel, use_mc,
                           iou_thresholds)
            for thr in iou_thresholds:
                rows.append((var, lat, thr, aps[thr], n_scenes, seed))
    return rows


def sweep_to_csv(rows, path):
    return write_csv(path, SWEEP_HEADER, rows)
