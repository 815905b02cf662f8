"""Adapter families for parameter-efficient fine-tuning.

Hetero-aware adapters: bottleneck down -> ReLU -> up with a residual skip,
where the convolution flavor is dispatched on the host agent's modality
(dense 1x1, occupancy-masked, depthwise-separable, or BEV conv). Up-path
weights and biases start at exactly zero, so inserting a fresh adapter is
bitwise invisible to the host network.

Multi-cognitive adapter: LayerNorm -> 1x1 down -> parallel depthwise
branches (kernels 3/5/7) -> mean -> 1x1 aggregate with an inner skip ->
GeLU -> zero-initialized 1x1 up -> outer residual.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .autodiff import Graph, OpKind, ParamStore, forward
from .scene import ModalityKind
from .utils import rng_stream


class ConvKind(Enum):
    CONV = "conv"
    SPARSE_CONV = "sparse_conv"
    DS_CONV = "ds_conv"
    BEV_CONV = "bev_conv"


# adapter insertion points inside each encoder, in pipeline order
HA_SITES = ("block1", "block2", "post")

_INTERNAL_KIND = {
    ModalityKind.PILLAR: ConvKind.CONV,
    ModalityKind.VOXEL: ConvKind.SPARSE_CONV,
    ModalityKind.DEPTH: ConvKind.DS_CONV,
    ModalityKind.BEV: ConvKind.BEV_CONV,
}


def select_modality_conv(modality, site):
    """Adapter convolution flavor for a modality at a site
    ("encoder_internal" or "post_encoder")."""
    if site == "post_encoder":
        return ConvKind.BEV_CONV
    if site == "encoder_internal":
        return _INTERNAL_KIND[ModalityKind(modality)]
    raise ValueError(f"unknown adapter site {site!r}")


def site_conv_kind(modality, site):
    """ConvKind for one of the three named HA sites."""
    return select_modality_conv(
        modality, "post_encoder" if site == "post" else "encoder_internal")


def site_down_k(site):
    """Spatial kernel of the down conv: the post-encoder BEV conv mixes
    space with a 3x3; internal dense sites stay 1x1 to hold the <10%
    parameter-economy line for every modality."""
    return 3 if site == "post" else 1


def bottleneck(c, r):
    if r < 2:
        raise ValueError(f"bottleneck ratio must be >= 2, got {r}")
    return max(1, c // r)


def ha_shapes(kind, c, r, down_k=1):
    """Relative tensor name -> shape for one hetero-aware adapter. The up
    conv is always 1x1; `down_k` applies to the dense flavors only."""
    cb = bottleneck(c, r)
    kind = ConvKind(kind)
    if kind is ConvKind.DS_CONV:
        return {"down_dw": (3, 3, c), "down_pw": (c, cb), "down_b": (cb,),
                "up_dw": (3, 3, cb), "up_pw": (cb, c), "up_b": (c,)}
    if kind is ConvKind.SPARSE_CONV:
        down_k = 1  # masked convs stay pointwise
    return {"down_w": (down_k, down_k, c, cb), "down_b": (cb,),
            "up_w": (1, 1, cb, c), "up_b": (c,)}


def mc_shapes(c, r):
    cb = bottleneck(c, r)
    return {"ln_g": (c,), "ln_b": (c,),
            "down_w": (1, 1, c, cb), "down_b": (cb,),
            "br3_w": (3, 3, cb), "br3_b": (cb,),
            "br5_w": (5, 5, cb), "br5_b": (cb,),
            "br7_w": (7, 7, cb), "br7_b": (cb,),
            "agg_w": (1, 1, cb, cb), "agg_b": (cb,),
            "up_w": (1, 1, cb, c), "up_b": (c,)}


def _fan_in(rel, shape):
    if len(shape) == 4:  # conv [k, k, cin, cout]
        return shape[0] * shape[1] * shape[2]
    if len(shape) == 3:  # depthwise [k, k, c]
        return shape[0] * shape[1]
    if len(shape) == 2:  # linear [in, out]
        return shape[0]
    raise ValueError(f"cannot infer fan-in for {rel} {shape}")


# sigmoid(OBJECTNESS_PRIOR_LOGIT) is the expected positive-cell rate, so
# the focal loss starts near its constant-prediction optimum instead of
# burning steps on the base rate
OBJECTNESS_PRIOR = 0.1


def init_tensor(full_name, shape, seed):
    """Deterministic per-tensor init keyed by the full parameter name:
    zero for up-path tensors and biases, one for layernorm gain, He-scaled
    uniform +-sqrt(6/fan_in) otherwise (magnitude-preserving through the
    ReLU stacks). The objectness logit bias starts at its prior."""
    rel = full_name.rsplit("/", 1)[-1]
    if rel.startswith("up_"):
        return np.zeros(shape)
    # the window self-attention is a residual branch; starting its output
    # projection at zero makes that branch an exact identity at init
    if full_name == "fus/global/wo":
        return np.zeros(shape)
    if rel in ("ln_g", "gamma"):
        return np.ones(shape)
    if rel.endswith("_b") or rel in ("b", "beta", "ln_b"):
        b = np.zeros(shape)
        if full_name == "head/cls_dir/b":
            b[0] = -np.log((1.0 - OBJECTNESS_PRIOR) / OBJECTNESS_PRIOR)
        return b
    # detection-head convs start near zero so early training is driven by
    # the classification prior rather than random logits
    bound = 0.01 if full_name.startswith("head/") \
        else np.sqrt(6.0 / _fan_in(rel, shape))
    return rng_stream(seed, "init", full_name).uniform(-bound, bound, size=shape)


def init_adapter(kind, widths, seed, down_k=1):
    """Standalone adapter parameter set: {relative name: tensor}.

    `kind` is a ConvKind (or its value string) for hetero-aware adapters,
    or "mc" for the multi-cognitive adapter; `widths` is (channels, ratio).
    """
    c, r = widths
    shapes = mc_shapes(c, r) if kind == "mc" else ha_shapes(kind, c, r, down_k)
    return {name: init_tensor(name, shape, seed) for name, shape in shapes.items()}


def register_tensors(store, prefix, shapes, seed):
    for rel, shape in shapes.items():
        full = f"{prefix}/{rel}" if prefix else rel
        store.add(full, init_tensor(full, shape, seed))


def register_ha_adapters(store, agent, modality, channels_by_site, r, seed):
    """Register all three adapter sites for one agent as ha/<agent>/<site>/*."""
    modality = ModalityKind(modality)
    for site in HA_SITES:
        kind = site_conv_kind(modality, site)
        shapes = ha_shapes(kind, channels_by_site[site], r, site_down_k(site))
        register_tensors(store, f"ha/{agent}/{site}", shapes, seed)


def register_mc_adapter(store, c, r, seed, site="post_local"):
    register_tensors(store, f"mc/{site}", mc_shapes(c, r), seed)


# ---------------------------------------------------------------------------
# graph builders

def build_ha_adapter(g, x, prefix, kind, down_k=1, mask=None):
    """Append one hetero-aware adapter after node `x`; returns the output
    node. `mask` is the occupancy-mask node required by the sparse flavor.
    Shape-preserving; equals x bitwise while the up tensors are zero."""
    kind = ConvKind(kind)
    p = lambda rel: g.param(f"{prefix}/{rel}" if prefix else rel)
    if kind is ConvKind.SPARSE_CONV:
        if mask is None:
            raise ValueError("sparse adapter needs an occupancy mask node")
        down = g.op(OpKind.MASKED_SPARSE_CONV, x, mask, p("down_w"), p("down_b"),
                    k=1, pad=0)
        up = g.op(OpKind.MASKED_SPARSE_CONV, g.op(OpKind.RELU, down), mask,
                  p("up_w"), p("up_b"), k=1, pad=0)
    elif kind is ConvKind.DS_CONV:
        down = g.op(OpKind.DSCONV, x, p("down_dw"), p("down_pw"), p("down_b"),
                    k=3, pad=1)
        up = g.op(OpKind.DSCONV, g.op(OpKind.RELU, down), p("up_dw"),
                  p("up_pw"), p("up_b"), k=3, pad=1)
    else:
        down = g.op(OpKind.CONV2D, x, p("down_w"), p("down_b"),
                    k=down_k, stride=1, pad=down_k // 2)
        up = g.op(OpKind.CONV2D, g.op(OpKind.RELU, down), p("up_w"), p("up_b"),
                  k=1, stride=1, pad=0)
    return g.op(OpKind.ADD, x, up)


def build_mc_adapter(g, x, prefix="mc/post_local"):
    """Append the multi-cognitive adapter after node `x`."""
    p = lambda rel: g.param(f"{prefix}/{rel}" if prefix else rel)
    ln = g.op(OpKind.LAYERNORM, x, p("ln_g"), p("ln_b"), axis=-1)
    fa = g.op(OpKind.CONV2D, ln, p("down_w"), p("down_b"), k=1, stride=1, pad=0)
    b3 = g.op(OpKind.DWCONV, fa, p("br3_w"), p("br3_b"), k=3, pad=1)
    b5 = g.op(OpKind.DWCONV, fa, p("br5_w"), p("br5_b"), k=5, pad=2)
    b7 = g.op(OpKind.DWCONV, fa, p("br7_w"), p("br7_b"), k=7, pad=3)
    fb = g.op(OpKind.ADD, g.op(OpKind.ADD, b3, b5), b7)
    fc = g.op(OpKind.ADD,
              g.op(OpKind.CONV2D, g.op(OpKind.SCALAR_MUL, fb, c=1.0 / 3.0),
                   p("agg_w"), p("agg_b"), k=1, stride=1, pad=0),
              fa)
    up = g.op(OpKind.CONV2D, g.op(OpKind.GELU, fc), p("up_w"), p("up_b"),
              k=1, stride=1, pad=0)
    return g.op(OpKind.ADD, x, up)


# ---------------------------------------------------------------------------
# eager wrappers (tests and inspection)

@dataclass(frozen=True)
class HAAdapterParams:
    conv_kind: ConvKind
    r: int
    tensors: dict  # relative name -> array

    @staticmethod
    def create(kind, c, r, seed, down_k=1):
        kind = ConvKind(kind)
        return HAAdapterParams(kind, r, init_adapter(kind, (c, r), seed, down_k))


@dataclass(frozen=True)
class MCAdapterParams:
    r: int
    tensors: dict

    @staticmethod
    def create(c, r, seed):
        return MCAdapterParams(r, init_adapter("mc", (c, r), seed))


def _check_host_shape(x, p):
    c = p.tensors["up_b"].shape[0]
    if x.ndim != 3 or x.shape[2] != c:
        raise ValueError(f"adapter expects [H, W, {c}], got {x.shape}")


def ha_adapter_forward(x, p, mask=None):
    """Eager adapter application on one [H, W, C] tensor."""
    x = np.asarray(x, dtype=np.float64)
    _check_host_shape(x, p)
    g = Graph()
    store = ParamStore()
    for rel, v in p.tensors.items():
        store.add(rel, v)
    inputs = {"x": x}
    xn = g.input("x")
    mn = None
    if p.conv_kind is ConvKind.SPARSE_CONV:
        inputs["mask"] = np.ones(x.shape[:2] + (1,)) if mask is None else mask
        mn = g.input("mask")
    down_k = p.tensors["down_w"].shape[0] if "down_w" in p.tensors else 1
    g.output("y", build_ha_adapter(g, xn, "", p.conv_kind, down_k, mn))
    return forward(g, store, inputs)["y"]


def mc_adapter_forward(x, p):
    x = np.asarray(x, dtype=np.float64)
    _check_host_shape(x, p)
    g = Graph()
    store = ParamStore()
    for rel, v in p.tensors.items():
        store.add(rel, v)
    xn = g.input("x")
    g.output("y", build_mc_adapter(g, xn, prefix=""))
    return forward(g, store, {"x": x})["y"]
