"""Cross-branch interaction blocks.

Three modules couple the frame (ANN) and event (SNN) branches:

* the adaptive temporal-weighting injector pools the spike tensor, runs a
  bottleneck adaptor to score timesteps per channel, collapses time with
  the softmaxed scores and injects the result into the frame features via
  single-head deformable cross-attention with a residual, zero-initialized
  output projection;
* the event-driven sparse injector projects frame features into the spike
  feature space and, at event-anchored reference points only, mixes
  bilinear samples of both branches at learned offset locations back into
  the spike stream;
* channel-selection fusion gates each branch by a global channel score and
  sums the two gated maps.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .tensor import Tensor, constant, narrow0, stack
from .voxel import ReferencePointSet


@dataclass
class ATWParams:
    w_down: Tensor          # (C, C/r) bottleneck reduce
    w_up: Tensor            # (C/r, C) bottleneck expand
    q_w: Tensor             # (C, C, 1, 1) query projection
    q_b: Tensor
    off_w: Tensor           # (2K, C, 1, 1) offset head, K (dy, dx) pairs
    off_b: Tensor
    attw_w: Tensor          # (K, C, 1, 1) attention-weight head
    attw_b: Tensor
    out_w: Tensor           # (C, C, 1, 1) output projection, zero at init
    out_b: Tensor

    @property
    def k_points(self):
        return self.off_w.shape[0] // 2


@dataclass
class EDSParams:
    off_w: Tensor           # (2K, C_snn, 1, 1) shared offset head
    off_b: Tensor
    attw_w: Tensor          # (K, C_snn, 1, 1)
    attw_b: Tensor
    proj_w: Tensor          # (C_snn, C_ann, 1, 1) frame-to-spike projection
    proj_b: Tensor

    @property
    def k_points(self):
        return self.off_w.shape[0] // 2


@dataclass
class CSFParams:
    w: Tensor               # (C, C, 1, 1) gate convolution
    b: Tensor


def _uniform(rng, shape, fan_in):
    limit = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def _zeros(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


def init_atw_params(c, reduction, k_points, rng) -> ATWParams:
    if c % reduction:
        raise ValueError(f"channels {c} not divisible by reduction {reduction}")
    cr = c // reduction
    return ATWParams(
        w_down=_uniform(rng, (c, cr), c),
        w_up=_uniform(rng, (cr, c), cr),
        q_w=_uniform(rng, (c, c, 1, 1), c),
        q_b=_zeros(c),
        off_w=_uniform(rng, (2 * k_points, c, 1, 1), c),
        off_b=_zeros(2 * k_points),
        attw_w=_uniform(rng, (k_points, c, 1, 1), c),
        attw_b=_zeros(k_points),
        out_w=_zeros((c, c, 1, 1)),
        out_b=_zeros(c))


def init_eds_params(c_snn, c_ann, k_points, rng) -> EDSParams:
    return EDSParams(
        off_w=_uniform(rng, (2 * k_points, c_snn, 1, 1), c_snn),
        off_b=_zeros(2 * k_points),
        attw_w=_uniform(rng, (k_points, c_snn, 1, 1), c_snn),
        attw_b=_zeros(k_points),
        proj_w=_uniform(rng, (c_snn, c_ann, 1, 1), c_ann),
        proj_b=_zeros(c_snn))


def init_csf_params(c, rng) -> CSFParams:
    return CSFParams(w=_uniform(rng, (c, c, 1, 1), c), b=_zeros(c))


# -- adaptive temporal weighting ---------------------------------------------


def atw_temporal_weights(f_snn, params: ATWParams):
    """Per-channel convex weights over time: N*T*C*H*W -> alpha N*T*C.

    Spatially pools the spike tensor, scores it with the bottleneck
    adaptor and softmaxes over the T axis independently per (n, c).
    """
    f_snn = constant(f_snn)
    n, t, c, h, w = f_snn.shape
    if t == 0:
        raise ValueError("temporal weighting needs at least one timestep")
    pool = ops.global_avg_pool(f_snn.reshape((n * t, c, h, w))).reshape((n, t, c))
    hidden = ops.linear(pool, params.w_down).relu()
    scores = ops.linear(hidden, params.w_up)
    return ops.softmax_axis(scores, axis=1)


def atw_collapse(f_snn, alpha):
    """Weighted sum over time: (N*T*C*H*W, N*T*C) -> N*C*H*W."""
    f_snn, alpha = constant(f_snn), constant(alpha)
    n, t, c = alpha.shape
    if f_snn.shape[:3] != (n, t, c):
        raise ValueError("alpha and spike tensor disagree on N*T*C")
    return (f_snn * alpha.reshape((n, t, c, 1, 1))).sum(axis=1)


def _base_grid(h, w, k):
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    pts = np.stack([ys.reshape(-1), xs.reshape(-1)], axis=1)     # (H*W, 2)
    return np.repeat(pts, k, axis=0)                             # (H*W*K, 2)


def atw_inject(f_ann, f_snn_w, params: ATWParams):
    """Deformable cross-attention from the collapsed spike map into the
    frame features, with a residual zero-initialized projection.

    Every frame location queries K learned offsets around itself, samples
    the collapsed spike map there and adds the projected attended value.
    """
    f_ann, f_snn_w = constant(f_ann), constant(f_snn_w)
    if f_ann.shape != f_snn_w.shape:
        raise ValueError("frame and collapsed spike maps must share a shape")
    n, c, h, w = f_ann.shape
    k = params.k_points
    q = ops.conv2d(f_ann, params.q_w, params.q_b)
    off = ops.conv2d(q, params.off_w, params.off_b)              # (N, 2K, H, W)
    attw = ops.softmax_axis(ops.conv2d(q, params.attw_w, params.attw_b), axis=1)
    pts = constant(_base_grid(h, w, k)) + \
        off.reshape((n, k, 2, h, w)).transpose((0, 3, 4, 1, 2)) \
           .reshape((n, h * w * k, 2))
    samples = ops.bilinear_sample_many(f_snn_w, pts)             # (N, H*W*K, C)
    wts = attw.transpose((0, 2, 3, 1)).reshape((n, h * w * k, 1))
    mixed = (samples * wts).reshape((n, h * w, k, c)).sum(axis=2)
    attended = mixed.reshape((n, h, w, c)).transpose((0, 3, 1, 2))
    out = ops.conv2d(attended, params.out_w, params.out_b)
    return f_ann + out


def atw_apply(f_ann, f_snn, params: ATWParams):
    """Full injector: temporal weights -> collapse -> attention."""
    alpha = atw_temporal_weights(f_snn, params)
    return atw_inject(f_ann, atw_collapse(f_snn, alpha), params)


# -- event-driven sparse injection -------------------------------------------


def eds_offsets(f_snn, params: EDSParams):
    """Shared heads over every location and timestep.

    Returns (offsets, weights): offsets N*T*K*2*H*W in feature-scale
    pixels, weights N*T*K*H*W softmax-normalized over K.
    """
    f_snn = constant(f_snn)
    n, t, c, h, w = f_snn.shape
    k = params.k_points
    flat = f_snn.reshape((n * t, c, h, w))
    off = ops.conv2d(flat, params.off_w, params.off_b).reshape((n, t, k, 2, h, w))
    attw = ops.softmax_axis(ops.conv2d(flat, params.attw_w, params.attw_b), axis=1)
    return off, attw.reshape((n, t, k, h, w))


def eds_inject(f_snn, f_ann, refs, params: EDSParams):
    """Mix projected frame features into the spike stream at reference
    points only; all other locations pass through unchanged.

    refs is one ReferencePointSet (batch of 1) or a list with one set per
    sample. The update at reference point r and timestep t is
    sum_k A_k * (proj(F_ann)[r + dr_k] * F_snn[t, r + dr_k]) with both
    factors sampled bilinearly at the offset position.
    """
    f_snn, f_ann = constant(f_snn), constant(f_ann)
    n, t, c, h, w = f_snn.shape
    if f_ann.shape[0] != n or f_ann.shape[2:] != (h, w):
        raise ValueError("frame features must match the spike tensor batch/geometry")
    if isinstance(refs, ReferencePointSet):
        refs = [refs] * n
    if len(refs) != n:
        raise ValueError("need one reference set per sample")
    for r in refs:
        if len(r) and (r.ys.max() >= h or r.xs.max() >= w or
                       r.ys.min() < 0 or r.xs.min() < 0):
            raise ValueError("reference point outside the feature geometry")
    if all(len(r) == 0 for r in refs):
        return f_snn

    k = params.k_points
    off, attw = eds_offsets(f_snn, params)
    proj = ops.conv2d(f_ann, params.proj_w, params.proj_b)
    deltas = []
    for i in range(n):
        r = refs[i]
        p = len(r)
        if p == 0:
            deltas.append(constant(np.zeros((t, c, h, w))))
            continue
        base = np.repeat(np.stack([r.ys, r.xs], axis=1).astype(np.float64),
                         k, axis=0)                                # (P*K, 2)
        dr = ops.gather_pixels_many(
            narrow0(off, i).reshape((t, k * 2, h, w)), r.ys, r.xs)  # (T, P, K*2)
        pts = constant(base) + dr.reshape((t, p * k, 2))
        a = ops.gather_pixels_many(narrow0(attw, i), r.ys, r.xs)    # (T, P, K)
        s_snn = ops.bilinear_sample_many(narrow0(f_snn, i), pts)    # (T, P*K, C)
        # the projected frame map is shared across timesteps
        s_ann = ops.bilinear_sample(narrow0(proj, i),
                                    pts.reshape((t * p * k, 2))).reshape((t, p * k, c))
        mixed = ((s_ann * s_snn).reshape((t, p, k, c)) *
                 a.reshape((t, p, k, 1))).sum(axis=2)               # (T, P, C)
        deltas.append(ops.scatter_points_many(mixed, r.ys, r.xs, (h, w)))
    return f_snn + stack(deltas, axis=0)


# -- channel selection fusion -------------------------------------------------


def csf_select(x, params: CSFParams):
    """Gate a map by the spatial average of a 1x1 conv on its sigmoid:
    s = x * AvgPool(Conv(Sigmoid(x))), broadcast per channel."""
    x = constant(x)
    n, c = x.shape[:2]
    gate = ops.global_avg_pool(ops.conv2d(x.sigmoid(), params.w, params.b))
    s = x * gate.reshape((n, c, 1, 1))
    # + 0.0 canonicalizes -0.0 so a silent branch stays bit-exact under
    # the later fusion add
    return s + 0.0


def csf_fuse(f_ann_o, f_snn_o, params_ann: CSFParams, params_snn: CSFParams):
    """Sum the gated frame map and the gated time-collapsed spike map."""
    f_ann_o, f_snn_o = constant(f_ann_o), constant(f_snn_o)
    n, c, h, w = f_ann_o.shape
    if f_snn_o.shape[0] != n or f_snn_o.shape[2:] != (c, h, w):
        raise ValueError("fusion inputs disagree on N*C*H*W")
    x_snn = f_snn_o.sum(axis=1)
    return csf_select(f_ann_o, params_ann) + csf_select(x_snn, params_snn)
