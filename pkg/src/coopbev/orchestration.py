"""Stage orchestration: prefix freeze masks, fixed-budget SGD loops for
the three training stages, and the binary checkpoint format.

Checkpoint wire format: magic "HEATCKPT", u32 LE version (=1), u64 LE
header length, UTF-8 JSON header {"tensors": [{name, shape, trainable}],
"provenance": [...]}, then each tensor's float64 little-endian C-order
payload in header order. Loaders honor whatever order the header declares.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import NonFiniteError, ParamStore, backward, forward, sgd_step
from .model import (AgentSlot, build_scene_graph, derive_agent_params,
                    add_mc_params, init_base_params, roster_modalities,
                    shared_roster)
from .scene import ModalityKind, SceneError, generate_scene
from .utils import rng_stream


class OrchestrationError(Exception):
    pass


class PreconditionError(OrchestrationError):
    """A stage's structural precondition is not met (e.g. collaborative
    fine-tuning without collaborators)."""


class DivergenceError(OrchestrationError):
    """Training produced a non-finite loss; carries the failing step."""

    def __init__(self, stage, step, detail):
        super().__init__(f"stage {stage!r} diverged at step {step}: {detail}")
        self.stage = stage
        self.step = step


STAGE_LOG_HEADER = ("step", "stage", "total", "cls", "reg", "dir", "depth")
DEFAULT_BATCH = 4
DEFAULT_LR = 1e-2
GRAD_CLIP_NORM = 10.0
BASE_STEPS = 200
LHFT_STEPS = 150
GCFT_STEPS = 150


# ---------------------------------------------------------------------------
# freeze masks

def _prefix_matches(prefix, name):
    if prefix.endswith("/"):
        return name.startswith(prefix)
    return name == prefix or name.startswith(prefix + "/")


@dataclass(frozen=True)
class FreezeMask:
    """Names the parameter prefixes that stay trainable; everything else
    is frozen. A prefix matches whole path segments only, so "ha/2"
    covers ha/2/* but never ha/22/*."""
    train: tuple

    def __post_init__(self):
        if not self.train:
            raise OrchestrationError("freeze mask needs at least one prefix")

    def matches(self, name):
        return any(_prefix_matches(p, name) for p in self.train)

    def apply(self, store):
        """Set trainable flags on `store`; every prefix must match at
        least one tensor."""
        hit = {p: 0 for p in self.train}
        for name in store.names():
            on = False
            for p in self.train:
                if _prefix_matches(p, name):
                    hit[p] += 1
                    on = True
            store.set_trainable(name, on)
        dead = [p for p, n in hit.items() if n == 0]
        if dead:
            raise OrchestrationError(
                f"freeze prefixes match no parameters: {dead}")
        return store


BASE_MASK = FreezeMask(("enc/0", "fus", "head"))


def lhft_mask(prefixes):
    return FreezeMask(tuple(prefixes))


GCFT_MASK = FreezeMask(("mc/",))


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"HEATCKPT"
CKPT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointCollisionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    tensors: dict            # name -> float64 array
    trainable: dict          # name -> bool
    provenance: list = field(default_factory=list)

    def to_store(self):
        store = ParamStore()
        for name in sorted(self.tensors):
            store.add(name, self.tensors[name].copy(),
                      trainable=self.trainable[name])
        return store

    @staticmethod
    def from_store(store, provenance=()):
        return Checkpoint({n: store[n].copy() for n in store.names()},
                          {n: store.trainable(n) for n in store.names()},
                          list(provenance))


def save_checkpoint(path, ckpt):
    names = sorted(ckpt.tensors)
    header = {
        "tensors": [{"name": n, "shape": list(ckpt.tensors[n].shape),
                     "trainable": bool(ckpt.trainable[n])} for n in names],
        "provenance": list(ckpt.provenance),
    }
    blob = json.dumps(header, sort_keys=True,
                      separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for n in names:
            fh.write(np.ascontiguousarray(ckpt.tensors[n],
                                          dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CKPT_MAGIC) + 12 or not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    off = len(CKPT_MAGIC)
    (version,) = struct.unpack_from("<I", raw, off)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(
            f"unsupported checkpoint version {version} (expected {CKPT_VERSION})")
    (hlen,) = struct.unpack_from("<Q", raw, off + 4)
    off += 12
    if off + hlen > len(raw):
        raise CheckpointTruncatedError(
            f"header declares {hlen} bytes, file has {len(raw) - off}")
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen

    tensors, trainable = {}, {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if name in tensors:
            raise CheckpointCollisionError(f"duplicate tensor {name!r}")
        nbytes = int(np.prod(shape, dtype=np.int64)) * 8
        if off + nbytes > len(raw):
            raise CheckpointTruncatedError(
                f"payload for {name!r} runs past end of file")
        flat = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=off)
        tensors[name] = flat.reshape(shape).astype(np.float64)
        trainable[name] = bool(entry["trainable"])
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{len(raw) - off} unexpected trailing bytes")
    return Checkpoint(tensors, trainable, list(header.get("provenance", [])))


def count_trainable_params(ckpt, prefixes, strict=True):
    """Total element count of checkpoint tensors matched by the mask
    prefixes. With strict=True a prefix that matches nothing is an error;
    with strict=False it simply contributes zero."""
    total = 0
    for name, t in sorted(ckpt.tensors.items()):
        if any(_prefix_matches(p, name) for p in prefixes):
            total += t.size
    if strict:
        for p in prefixes:
            if not any(_prefix_matches(p, n) for n in ckpt.tensors):
                raise OrchestrationError(
                    f"mask prefix {p!r} matches no checkpoint tensors")
    return total


# ---------------------------------------------------------------------------
# scene pools and the shared training loop

def scene_pool(seed, n_scenes, n_agents, modalities, world_range,
               min_objects=6, max_objects=12, tag="pool"):
    """Deterministic list of training scenes; infeasible draws are
    skipped by advancing the derived seed."""
    scenes = []
    i = 0
    attempt = 0
    while len(scenes) < n_scenes:
        if attempt > 50 * n_scenes:
            raise OrchestrationError("scene pool generation keeps failing")
        rng = rng_stream(seed, tag, i)
        scene_seed = int(rng.integers(0, 2**31))
        n_objects = int(rng.integers(min_objects, max_objects + 1))
        try:
            scenes.append(generate_scene(scene_seed, n_agents, n_objects,
                                         world_range, modalities=modalities))
        except SceneError:
            pass
        i += 1
        attempt += 1
    return scenes


@dataclass(frozen=True)
class TrainPlan:
    stage: str
    steps: int
    batch: int = DEFAULT_BATCH
    lr: float = DEFAULT_LR
    n_scenes: int = 24

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1 or self.n_scenes < 1:
            raise OrchestrationError(f"bad plan {self}")


def clip_grads(grads, max_norm=GRAD_CLIP_NORM):
    """Scale the whole gradient dict so its global L2 norm is at most
    max_norm. The norm is accumulated in sorted-name order so the value
    is reproducible run to run."""
    sq = 0.0
    for name in sorted(grads):
        g = grads[name]
        sq += float(np.dot(g.ravel(), g.ravel()))
    norm = np.sqrt(sq)
    if norm <= max_norm:
        return grads
    factor = max_norm / norm
    return {n: v * factor for n, v in grads.items()}


def run_stage(cfg, store, roster, plan, seed, gt_mode, use_mc=False, ego=0):
    """The one SGD loop every stage shares. Scenes cycle round-robin;
    per-step gradients are summed over the batch in scene order then
    scaled by 1/batch. Returns stage-log rows."""
    scenes = scene_pool(seed, plan.n_scenes, max(s.index for s in roster) + 1,
                        roster_modalities(roster), cfg.world_range,
                        tag=f"{plan.stage}-pool")
    cache = {}
    rows = []
    for step in range(plan.steps):
        total = {"total": 0.0, "cls": 0.0, "reg": 0.0, "dir": 0.0,
                 "depth": 0.0}
        acc = None
        for j in range(plan.batch):
            k = (step * plan.batch + j) % len(scenes)
            if k not in cache:
                cache[k] = build_scene_graph(scenes[k], cfg, store, roster,
                                             ego=ego, gt_mode=gt_mode,
                                             use_mc=use_mc)
            g, inputs, _ = cache[k]
            try:
                grads = backward(g, store, inputs, "loss")
                out = forward(g, store, inputs)
            except NonFiniteError as exc:
                raise DivergenceError(plan.stage, step, str(exc)) from exc
            if not np.isfinite(out["loss"]):
                raise DivergenceError(plan.stage, step,
                                      f"loss={out['loss']!r}")
            for key in total:
                total[key] += float(out.get(key if key != "total" else "loss",
                                            0.0))
            if acc is None:
                acc = {n: v.copy() for n, v in grads.items()}
            else:
                for n, v in grads.items():
                    acc[n] += v
        scale = 1.0 / plan.batch
        mean = {n: v * scale for n, v in acc.items()}
        sgd_step(store, clip_grads(mean), plan.lr)
        rows.append((step, plan.stage, total["total"] * scale,
                     total["cls"] * scale, total["reg"] * scale,
                     total["dir"] * scale, total["depth"] * scale))
    return rows


# ---------------------------------------------------------------------------
# the three stages

def train_base(cfg, seed, modality="pillar", steps=BASE_STEPS,
               batch=DEFAULT_BATCH, lr=DEFAULT_LR, n_scenes=24, n_agents=2):
    """Stage 1: train shared encoder + fusion + head on a homogeneous
    fleet sharing enc/0."""
    store = init_base_params(cfg, seed, modality)
    BASE_MASK.apply(store)
    roster = shared_roster(n_agents, modality)
    plan = TrainPlan("base", steps, batch, lr, n_scenes)
    rows = run_stage(cfg, store, roster, plan, seed, gt_mode="collab")
    prov = {"stage": "base", "seed": seed, "steps": steps,
            "modality": modality, "n_agents": n_agents}
    return store, rows, prov


def run_lhft(cfg, store, agent, modality, base_modality, seed,
             steps=LHFT_STEPS, batch=DEFAULT_BATCH, lr=DEFAULT_LR,
             n_scenes=24):
    """Stage 2 for one new agent: derive its encoder from the base,
    freeze everything except its adapters (and fresh stem), train on its
    own single-agent view."""
    trainable = derive_agent_params(store, cfg, agent, modality,
                                    base_modality, seed)
    lhft_mask(trainable).apply(store)
    roster = (AgentSlot(0, ModalityKind(modality), f"enc/{agent}",
                        f"ha/{agent}"),)
    plan = TrainPlan(f"lhft-{agent}", steps, batch, lr, n_scenes)
    rows = run_stage(cfg, store, roster, plan, seed, gt_mode="single")
    prov = {"stage": "lhft", "agent": agent, "seed": seed, "steps": steps,
            "modality": roster[0].modality.value,
            "fresh_stem": any(p.startswith("enc/") for p in trainable)}
    return rows, prov


def run_gcft(cfg, store, roster, seed, steps=GCFT_STEPS, batch=DEFAULT_BATCH,
             lr=DEFAULT_LR, n_scenes=24):
    """Stage 3: insert the multi-cognitive adapter (identity at init) and
    train only it on collaborative scenes."""
    if len(roster) < 2:
        raise PreconditionError(
            f"collaborative fine-tuning needs at least 2 agents, got "
            f"{len(roster)}")
    trainable = add_mc_params(store, cfg, seed)
    FreezeMask(trainable).apply(store)
    plan = TrainPlan("gcft", steps, batch, lr, n_scenes)
    rows = run_stage(cfg, store, roster, plan, seed, gt_mode="collab",
                     use_mc=True)
    prov = {"stage": "gcft", "seed": seed, "steps": steps,
            "modalities": roster_modalities(roster)}
    return rows, prov
