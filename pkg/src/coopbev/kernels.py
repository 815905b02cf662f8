"""Numpy forward/backward kernels for every graph op.

All kernels take and return float64 arrays. Each op is a pair of functions:

    fwd(args, attrs)                      -> (out, ctx)
    bwd(gout, args, out, ctx, attrs, need) -> [grad or None per arg]

`args` concatenates the op's data inputs and its parameter tensors, in the
order fixed by the op registry in `autodiff`. `need[i]` is False when the
i-th argument does not require a gradient; kernels may skip that work and
must return None in that slot. Masks and index maps never receive gradients.

Convolutions use an im2col layout: kernels are stored [k, k, Cin, Cout] and
features are channel-last [H, W, C]. Spatial attention and projections go
through MATMUL. Everything is deterministic for a fixed-size BLAS pool
(pinned to one thread at package import).
"""

import numpy as np
from scipy.special import erf, expit

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)

# Sampling coordinates this close to a grid point are snapped onto it, so
# identity and quarter-turn warps land exactly (criterion: bilinear is exact
# at grid points).
_WARP_SNAP = 1e-9


def _pad2d(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((pad, pad), (pad, pad), (0, 0)))


def _windows(x, k, stride, pad):
    """[H, W, C] -> [Ho, Wo, C, k, k] sliding windows (view into padded copy)."""
    xp = _pad2d(x, pad)
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(0, 1))
    return win[::stride, ::stride]


def _im2col(x, k, stride, pad):
    """[H, W, C] -> cols [Ho*Wo, k*k*C] matching kernel layout [k,k,C,Cout]."""
    win = _windows(x, k, stride, pad)  # [Ho, Wo, C, k, k]
    ho, wo = win.shape[0], win.shape[1]
    cols = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, -1)
    return cols, ho, wo


def _col2im(dcols, x_shape, k, stride, pad, ho, wo):
    """Scatter-add column gradients back to the input layout."""
    h, w, c = x_shape
    dxp = np.zeros((h + 2 * pad, w + 2 * pad, c))
    d = dcols.reshape(ho, wo, k, k, c)
    for ki in range(k):
        for kj in range(k):
            dxp[ki:ki + ho * stride:stride, kj:kj + wo * stride:stride] += d[:, :, ki, kj]
    return dxp[pad:pad + h, pad:pad + w]


# ---------------------------------------------------------------------------
# convolutions

def conv2d_fwd(args, attrs):
    x, w, b = args
    k, stride, pad = attrs["k"], attrs["stride"], attrs["pad"]
    cols, ho, wo = _im2col(x, k, stride, pad)
    y = cols @ w.reshape(-1, w.shape[-1]) + b
    return y.reshape(ho, wo, -1), (cols, ho, wo)


def conv2d_bwd(g, args, out, ctx, attrs, need):
    x, w, b = args
    k, stride, pad = attrs["k"], attrs["stride"], attrs["pad"]
    cols, ho, wo = ctx
    gm = g.reshape(ho * wo, -1)
    dx = dw = db = None
    if need[0]:
        dcols = gm @ w.reshape(-1, w.shape[-1]).T
        dx = _col2im(dcols, x.shape, k, stride, pad, ho, wo)
    if need[1]:
        dw = (cols.T @ gm).reshape(w.shape)
    if need[2]:
        db = gm.sum(axis=0)
    return [dx, dw, db]


def _depthwise_fwd(x, kern, pad):
    win = _windows(x, kern.shape[0], 1, pad)  # [H, W, C, k, k]
    return np.einsum("hwckl,klc->hwc", win, kern), win


def _depthwise_bwd(g, x_shape, kern, win, pad, need_x, need_k):
    k = kern.shape[0]
    h, w, c = x_shape
    dk = np.einsum("hwckl,hwc->klc", win, g) if need_k else None
    dx = None
    if need_x:
        dxp = np.zeros((h + 2 * pad, w + 2 * pad, c))
        for ki in range(k):
            for kj in range(k):
                dxp[ki:ki + h, kj:kj + w] += g * kern[ki, kj][None, None, :]
        dx = dxp[pad:pad + h, pad:pad + w]
    return dx, dk


def dwconv_fwd(args, attrs):
    x, kern, b = args
    y, win = _depthwise_fwd(x, kern, attrs["pad"])
    return y + b, win


def dwconv_bwd(g, args, out, ctx, attrs, need):
    x, kern, b = args
    dx, dk = _depthwise_bwd(g, x.shape, kern, ctx, attrs["pad"], need[0], need[1])
    db = g.sum(axis=(0, 1)) if need[2] else None
    return [dx, dk, db]


def dsconv_fwd(args, attrs):
    """Depthwise k x k followed by a pointwise 1x1 projection."""
    x, dkern, pw, b = args
    t, win = _depthwise_fwd(x, dkern, attrs["pad"])
    y = t @ pw + b
    return y, (t, win)


def dsconv_bwd(g, args, out, ctx, attrs, need):
    x, dkern, pw, b = args
    t, win = ctx
    dpw = np.tensordot(t, g, axes=([0, 1], [0, 1])) if need[2] else None
    db = g.sum(axis=(0, 1)) if need[3] else None
    dx = ddk = None
    if need[0] or need[1]:
        dt = g @ pw.T
        dx, ddk = _depthwise_bwd(dt, x.shape, dkern, win, attrs["pad"], need[0], need[1])
    return [dx, ddk, dpw, db]


def masked_conv_fwd(args, attrs):
    """Dense conv gated by an occupancy mask: no dilation into empty cells,
    outputs (bias included) forced to zero wherever the mask is zero."""
    x, mask, w, b = args
    xg = x * mask
    cols, ho, wo = _im2col(xg, attrs["k"], 1, attrs["pad"])
    y = (cols @ w.reshape(-1, w.shape[-1]) + b).reshape(ho, wo, -1)
    return y * mask, (cols, ho, wo)


def masked_conv_bwd(g, args, out, ctx, attrs, need):
    x, mask, w, b = args
    cols, ho, wo = ctx
    gg = g * mask
    gm = gg.reshape(ho * wo, -1)
    dx = dw = db = None
    if need[0]:
        dcols = gm @ w.reshape(-1, w.shape[-1]).T
        dx = _col2im(dcols, x.shape, attrs["k"], 1, attrs["pad"], ho, wo) * mask
    if need[2]:
        dw = (cols.T @ gm).reshape(w.shape)
    if need[3]:
        db = gm.sum(axis=0)
    return [dx, None, dw, db]


# ---------------------------------------------------------------------------
# linear algebra and pointwise

def _resolve_t(a, flag):
    return a.swapaxes(-1, -2) if flag else a


def _reduce_to(grad, shape):
    """Sum a broadcast gradient back down to `shape`."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def matmul_fwd(args, attrs):
    a, b = args
    y = _resolve_t(a, attrs.get("ta", False)) @ _resolve_t(b, attrs.get("tb", False))
    return y, None


def matmul_bwd(g, args, out, ctx, attrs, need):
    a, b = args
    ta, tb = attrs.get("ta", False), attrs.get("tb", False)
    at, bt = _resolve_t(a, ta), _resolve_t(b, tb)
    da = db = None
    if need[0]:
        d = g @ bt.swapaxes(-1, -2)
        d = _resolve_t(d, ta)
        da = _reduce_to(d, a.shape).reshape(a.shape)
    if need[1]:
        d = at.swapaxes(-1, -2) @ g
        d = _resolve_t(d, tb)
        db = _reduce_to(d, b.shape).reshape(b.shape)
    return [da, db]


def softmax_fwd(args, attrs):
    x = args[0]
    ax = attrs["axis"]
    z = x - x.max(axis=ax, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=ax, keepdims=True), None


def softmax_bwd(g, args, out, ctx, attrs, need):
    ax = attrs["axis"]
    return [out * (g - (g * out).sum(axis=ax, keepdims=True))]


def layernorm_fwd(args, attrs):
    x, gamma, beta = args
    ax = attrs["axis"]
    eps = attrs.get("eps", 1e-5)
    mu = x.mean(axis=ax, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=ax, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    return xhat * gamma + beta, (xhat, inv)


def layernorm_bwd(g, args, out, ctx, attrs, need):
    x, gamma, beta = args
    ax = attrs["axis"]
    xhat, inv = ctx
    red = tuple(i for i in range(g.ndim) if i != (ax % g.ndim))
    dgamma = (g * xhat).sum(axis=red) if need[1] else None
    dbeta = g.sum(axis=red) if need[2] else None
    dx = None
    if need[0]:
        gh = g * gamma
        dx = inv * (gh - gh.mean(axis=ax, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=ax, keepdims=True))
    return [dx, dgamma, dbeta]


def gelu_fwd(args, attrs):
    x = args[0]
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2)), None


def gelu_bwd(g, args, out, ctx, attrs, need):
    x = args[0]
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    dens = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return [g * (phi + x * dens)]


def relu_fwd(args, attrs):
    return np.maximum(args[0], 0.0), None


def relu_bwd(g, args, out, ctx, attrs, need):
    return [g * (args[0] > 0)]


def add_fwd(args, attrs):
    return args[0] + args[1], None


def add_bwd(g, args, out, ctx, attrs, need):
    return [_reduce_to(g, a.shape).reshape(a.shape) if need[i] else None
            for i, a in enumerate(args)]


def mul_fwd(args, attrs):
    return args[0] * args[1], None


def mul_bwd(g, args, out, ctx, attrs, need):
    a, b = args
    da = _reduce_to(g * b, a.shape).reshape(a.shape) if need[0] else None
    db = _reduce_to(g * a, b.shape).reshape(b.shape) if need[1] else None
    return [da, db]


def scalar_mul_fwd(args, attrs):
    return attrs["c"] * args[0], None


def scalar_mul_bwd(g, args, out, ctx, attrs, need):
    return [attrs["c"] * g]


def _norm_axes(attrs, ndim):
    ax = attrs.get("axis")
    if ax is None:
        return tuple(range(ndim))
    if isinstance(ax, int):
        ax = (ax,)
    return tuple(a % ndim for a in ax)


def sum_fwd(args, attrs):
    return args[0].sum(axis=_norm_axes(attrs, args[0].ndim),
                       keepdims=attrs.get("keepdims", False)), None


def sum_bwd(g, args, out, ctx, attrs, need):
    x = args[0]
    axes = _norm_axes(attrs, x.ndim)
    if not attrs.get("keepdims", False):
        g = np.expand_dims(g, axes)
    return [np.broadcast_to(g, x.shape).copy()]


def mean_fwd(args, attrs):
    return args[0].mean(axis=_norm_axes(attrs, args[0].ndim),
                        keepdims=attrs.get("keepdims", False)), None


def mean_bwd(g, args, out, ctx, attrs, need):
    x = args[0]
    axes = _norm_axes(attrs, x.ndim)
    n = np.prod([x.shape[a] for a in axes])
    if not attrs.get("keepdims", False):
        g = np.expand_dims(g, axes)
    return [np.broadcast_to(g / n, x.shape).copy()]


def concat_fwd(args, attrs):
    return np.concatenate(args, axis=attrs["axis"]), None


def concat_bwd(g, args, out, ctx, attrs, need):
    ax = attrs["axis"]
    splits = np.cumsum([a.shape[ax] for a in args])[:-1]
    return list(np.split(g, splits, axis=ax))


def reshape_fwd(args, attrs):
    return args[0].reshape(attrs["shape"]), None


def reshape_bwd(g, args, out, ctx, attrs, need):
    return [g.reshape(args[0].shape)]


def transpose_fwd(args, attrs):
    return args[0].transpose(attrs["perm"]).copy(), None


def transpose_bwd(g, args, out, ctx, attrs, need):
    return [g.transpose(np.argsort(attrs["perm"]))]


# ---------------------------------------------------------------------------
# geometry

def bilinear_warp_fwd(args, attrs):
    """Pull-warp: output cell (i, j) samples the input at affine * (i, j, 1).

    Out-of-range samples contribute zero. Coordinates within _WARP_SNAP of a
    grid point resolve to that point exactly.
    """
    x = args[0]
    m = np.asarray(attrs["affine"], dtype=np.float64).reshape(2, 3)
    h, w = x.shape[0], x.shape[1]
    ii, jj = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    si = m[0, 0] * ii + m[0, 1] * jj + m[0, 2]
    sj = m[1, 0] * ii + m[1, 1] * jj + m[1, 2]
    ri, rj = np.rint(si), np.rint(sj)
    si = np.where(np.abs(si - ri) < _WARP_SNAP, ri, si)
    sj = np.where(np.abs(sj - rj) < _WARP_SNAP, rj, sj)

    i0 = np.floor(si).astype(np.int64)
    j0 = np.floor(sj).astype(np.int64)
    fi, fj = si - i0, sj - j0
    y = np.zeros_like(x)
    corners = []
    for di, dj, wgt in ((0, 0, (1 - fi) * (1 - fj)), (0, 1, (1 - fi) * fj),
                        (1, 0, fi * (1 - fj)), (1, 1, fi * fj)):
        ci, cj = i0 + di, j0 + dj
        ok = (ci >= 0) & (ci < h) & (cj >= 0) & (cj < w) & (wgt != 0.0)
        cic, cjc = np.clip(ci, 0, h - 1), np.clip(cj, 0, w - 1)
        wv = np.where(ok, wgt, 0.0)
        y += wv[..., None] * x[cic, cjc]
        corners.append((cic, cjc, wv, ok))
    return y, corners


def bilinear_warp_bwd(g, args, out, ctx, attrs, need):
    if not need[0]:
        return [None]
    x = args[0]
    dx = np.zeros_like(x)
    for cic, cjc, wv, ok in ctx:
        contrib = wv[..., None] * g
        np.add.at(dx, (cic[ok], cjc[ok]), contrib[ok])
    return [dx]


def ray_splat_fwd(args, attrs):
    """Lift-splat: per-ray depth distribution x per-ray features scattered
    onto BEV cells along each ray. `cells` maps (azimuth, depth bin) to a
    flattened grid cell."""
    dist, feat = args
    cells = attrs["cells"]  # [A, D] int64
    h, w = attrs["grid"]
    a, d = dist.shape
    contrib = dist[:, :, None] * feat[:, None, :]
    y = np.zeros((h * w, feat.shape[1]))
    np.add.at(y, cells.reshape(-1), contrib.reshape(a * d, -1))
    return y.reshape(h, w, feat.shape[1]), None


def ray_splat_bwd(g, args, out, ctx, attrs, need):
    dist, feat = args
    cells = attrs["cells"]
    gflat = g.reshape(-1, g.shape[-1])
    gcell = gflat[cells]  # [A, D, C]
    ddist = (gcell * feat[:, None, :]).sum(axis=2) if need[0] else None
    dfeat = (gcell * dist[:, :, None]).sum(axis=1) if need[1] else None
    return [ddist, dfeat]


# ---------------------------------------------------------------------------
# losses (each reduces to a scalar; targets/masks live in attrs)

def _softplus(z):
    return np.log1p(np.exp(-np.abs(z))) + np.maximum(z, 0.0)


def focal_loss_fwd(args, attrs):
    z = args[0]
    t = attrs["targets"]
    alpha, gamma = attrs["alpha"], attrs["gamma"]
    p = expit(z)
    log_p = -_softplus(-z)
    log_q = -_softplus(z)
    l_pos = -alpha * (1.0 - p) ** gamma * log_p
    l_neg = -(1.0 - alpha) * p ** gamma * log_q
    total = (t * l_pos + (1.0 - t) * l_neg).sum() / attrs["normalizer"]
    return np.asarray(total), p


def focal_loss_bwd(g, args, out, ctx, attrs, need):
    t = attrs["targets"]
    alpha, gamma = attrs["alpha"], attrs["gamma"]
    z = args[0]
    p = ctx
    log_p = -_softplus(-z)
    log_q = -_softplus(z)
    d_pos = alpha * gamma * p * (1.0 - p) ** gamma * log_p - alpha * (1.0 - p) ** (gamma + 1.0)
    d_neg = (1.0 - alpha) * p ** (gamma + 1.0) - (1.0 - alpha) * gamma * (1.0 - p) * p ** gamma * log_q
    dz = (t * d_pos + (1.0 - t) * d_neg) / attrs["normalizer"]
    return [float(g) * dz]


def smooth_l1_fwd(args, attrs):
    d = args[0] - attrs["targets"]
    beta = attrs["beta"]
    ad = np.abs(d)
    l = np.where(ad < beta, 0.5 * d * d / beta, ad - 0.5 * beta)
    return np.asarray((attrs["mask"] * l).sum() / attrs["normalizer"]), d


def smooth_l1_bwd(g, args, out, ctx, attrs, need):
    d = ctx
    dd = np.clip(d / attrs["beta"], -1.0, 1.0)
    return [float(g) * attrs["mask"] * dd / attrs["normalizer"]]


def cross_entropy_fwd(args, attrs):
    z = args[0]
    idx = attrs["targets"]
    zmax = z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z - zmax).sum(axis=-1)) + zmax[..., 0]
    picked = np.take_along_axis(z, idx[..., None], axis=-1)[..., 0]
    total = (attrs["mask"] * (lse - picked)).sum() / attrs["normalizer"]
    return np.asarray(total), None


def cross_entropy_bwd(g, args, out, ctx, attrs, need):
    z = args[0]
    idx = attrs["targets"]
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    sm = e / e.sum(axis=-1, keepdims=True)
    onehot = np.zeros_like(z)
    np.put_along_axis(onehot, idx[..., None], 1.0, axis=-1)
    dz = attrs["mask"][..., None] * (sm - onehot) / attrs["normalizer"]
    return [float(g) * dz]
