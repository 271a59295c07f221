"""The two-branch encoder: frame stages with temporal-weighting injection,
spiking stages with sparse injection, channel-selection fusion per scale
and a small multi-scale segmentation head.

Frame stages are conv3x3 -> single-group normalization -> ReLU; spiking
stages are a conv3x3 shared across timesteps followed by LIF neurons. At
each scale the spike tensor is injected into the frame features, the
frame features are injected back into the spike stream at event-anchored
reference points, and the two branches are fused. Fused maps from every
scale are projected to a common width, upsampled to the finest scale,
summed and classified by a 1x1 convolution.

With no event input the spiking side is skipped entirely and, for a
freshly built network (zero-initialized injector projections), the output
is bit-for-bit the same as with an all-zero voxel.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from . import fusion, ops
from .spiking import LIFConfig, lif_forward_seq, spike_rate
from .tensor import Tensor, constant, no_grad, take_axis
from .voxel import VoxelGrid, downsample_voxel, extract_reference_points, znorm

CHECKPOINT_MAGIC = b"HESS"
CHECKPOINT_VERSION = 1


@dataclass
class NetworkConfig:
    input_channels: int = 1
    bins: int = 5
    timesteps: int = 5
    scales: tuple = ((2, 16), (4, 32), (8, 64))
    num_classes: int = 3
    k_points: int = 4
    adaptor_ratio: int = 4
    atw_on: bool = True
    eds_on: bool = True
    csf_on: bool = True
    seed: int = 0
    tau: float = 2.0
    v_threshold: float = 1.0
    surrogate_alpha: float = 4.0

    def __post_init__(self):
        self.scales = tuple(tuple(s) for s in self.scales)
        if self.timesteps < 1 or self.bins < 1:
            raise ValueError("timesteps and bins must be >= 1")
        if not self.scales:
            raise ValueError("need at least one scale")
        prev = 1
        for factor, channels in self.scales:
            if factor <= prev and prev != 1:
                raise ValueError("scale factors must be strictly increasing")
            if factor % prev:
                raise ValueError("each scale factor must be a multiple of the previous")
            if channels < 1:
                raise ValueError("channel widths must be positive")
            prev = factor
        if self.atw_on:
            for _, channels in self.scales:
                if channels % self.adaptor_ratio:
                    raise ValueError("channel widths must be divisible by the adaptor ratio")

    def lif(self):
        return LIFConfig(tau=self.tau, v_threshold=self.v_threshold,
                         surrogate_alpha=self.surrogate_alpha)


@dataclass
class _Stage:
    ann_w: Tensor
    ann_b: Tensor
    gamma: Tensor
    beta: Tensor
    snn_w: Tensor
    snn_b: Tensor
    stride: int


@dataclass
class HybridNetwork:
    config: NetworkConfig
    stages: list = field(default_factory=list)
    atw: list = field(default_factory=list)
    eds: list = field(default_factory=list)
    csf: list = field(default_factory=list)      # (frame params, spike params)
    lateral: list = field(default_factory=list)  # (w, b) per scale
    cls_w: Tensor = None
    cls_b: Tensor = None
    params: dict = field(default_factory=dict)   # name -> Tensor, declaration order

    def parameters(self):
        return list(self.params.values())

    def param_count(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def build(config: NetworkConfig) -> HybridNetwork:
    """Deterministically initialize a network from config.seed.

    Conv/linear weights use uniform fan-in scaling; biases, injector
    output projections and offset-head biases start at zero.
    """
    rng = np.random.default_rng(config.seed)
    net = HybridNetwork(config)
    reg = net.params

    def uniform(name, shape, fan_in):
        t = Tensor(rng.uniform(-1.0 / np.sqrt(fan_in), 1.0 / np.sqrt(fan_in),
                               size=shape), requires_grad=True)
        reg[name] = t
        return t

    def zeros(name, shape):
        t = Tensor(np.zeros(shape), requires_grad=True)
        reg[name] = t
        return t

    def ones(name, shape):
        t = Tensor(np.ones(shape), requires_grad=True)
        reg[name] = t
        return t

    prev_factor = 1
    ann_cin = config.input_channels
    snn_cin = 1   # one voxel bin per timestep
    for i, (factor, c) in enumerate(config.scales):
        stride = factor // prev_factor
        stage = _Stage(
            ann_w=uniform(f"stage{i}.ann.w", (c, ann_cin, 3, 3), ann_cin * 9),
            ann_b=zeros(f"stage{i}.ann.b", (c,)),
            gamma=ones(f"stage{i}.norm.gamma", (c,)),
            beta=zeros(f"stage{i}.norm.beta", (c,)),
            snn_w=uniform(f"stage{i}.snn.w", (c, snn_cin, 3, 3), snn_cin * 9),
            snn_b=zeros(f"stage{i}.snn.b", (c,)),
            stride=stride)
        net.stages.append(stage)
        if config.atw_on:
            p = fusion.init_atw_params(c, config.adaptor_ratio, config.k_points, rng)
            p.out_w.data[:] = 0.0
            p.out_b.data[:] = 0.0
            for suffix, t in (("w_down", p.w_down), ("w_up", p.w_up),
                              ("q.w", p.q_w), ("q.b", p.q_b),
                              ("off.w", p.off_w), ("off.b", p.off_b),
                              ("attw.w", p.attw_w), ("attw.b", p.attw_b),
                              ("out.w", p.out_w), ("out.b", p.out_b)):
                reg[f"atw{i}.{suffix}"] = t
            net.atw.append(p)
        if config.eds_on:
            p = fusion.init_eds_params(c, c, config.k_points, rng)
            for suffix, t in (("off.w", p.off_w), ("off.b", p.off_b),
                              ("attw.w", p.attw_w), ("attw.b", p.attw_b),
                              ("proj.w", p.proj_w), ("proj.b", p.proj_b)):
                reg[f"eds{i}.{suffix}"] = t
            net.eds.append(p)
        if config.csf_on:
            pa = fusion.init_csf_params(c, rng)
            ps = fusion.init_csf_params(c, rng)
            reg[f"csf{i}.frame.w"] = pa.w
            reg[f"csf{i}.frame.b"] = pa.b
            reg[f"csf{i}.spike.w"] = ps.w
            reg[f"csf{i}.spike.b"] = ps.b
            net.csf.append((pa, ps))
        prev_factor = factor
        ann_cin = c
        snn_cin = c

    c_head = config.scales[0][1]
    for i, (_, c) in enumerate(config.scales):
        w = uniform(f"head.lateral{i}.w", (c_head, c, 1, 1), c)
        b = zeros(f"head.lateral{i}.b", (c_head,))
        net.lateral.append((w, b))
    net.cls_w = uniform("head.cls.w", (config.num_classes, c_head, 1, 1), c_head)
    net.cls_b = zeros("head.cls.b", (config.num_classes,))
    return net


def _voxel_batch(voxel, h, w):
    """Normalize the accepted voxel inputs into an (N, B, H, W) array."""
    if isinstance(voxel, VoxelGrid):
        arr = voxel.data[None]
    elif isinstance(voxel, np.ndarray):
        arr = (voxel[None] if voxel.ndim == 3 else voxel).astype(np.float64)
    else:
        arr = np.stack([g.data for g in voxel])
    if arr.ndim != 4 or arr.shape[2:] != (h, w):
        raise ValueError("voxel spatial size must equal the frame size")
    return arr


def forward(net: HybridNetwork, frames, voxel=None, smooth=False, probe=None):
    """Segmentation logits N*num_classes*H*W.

    frames: N*Cin*H*W array (or Tensor). voxel: a VoxelGrid, a list of
    them, or a raw (N, B, H, W) array; None runs the frame branch alone.
    Z-scoring of the voxel and reference-point extraction happen here,
    from the raw grid. smooth swaps the LIF Heaviside for its sigmoid
    surrogate (gradient verification only). probe, when given, collects
    per-layer cost records.
    """
    cfg = net.config
    frames = constant(frames)
    if frames.ndim != 4 or frames.shape[1] != cfg.input_channels:
        raise ValueError("frames must be N*Cin*H*W with configured input channels")
    n, _, h, w = frames.shape
    max_factor = cfg.scales[-1][0]
    if h % max_factor or w % max_factor:
        raise ValueError(f"input size must be divisible by {max_factor}")

    events_on = voxel is not None
    snn_inputs = None
    refs_per_scale = None
    if events_on:
        raw = _voxel_batch(voxel, h, w)
        if raw.shape[0] != n:
            raise ValueError("voxel batch size must match frames")
        if raw.shape[1] != cfg.bins:
            raise ValueError(f"voxel has {raw.shape[1]} bins, config says {cfg.bins}")
        if cfg.bins != cfg.timesteps:
            raise ValueError("bins must equal timesteps (one bin per step)")
        normed = np.stack([_znorm_arr(raw[i]) for i in range(n)])
        snn_inputs = [constant(normed[:, t][:, None]) for t in range(cfg.timesteps)]
        refs_per_scale = []
        for factor, _ in cfg.scales:
            refs = []
            for i in range(n):
                g = downsample_voxel(VoxelGrid(raw[i], 0, 1), factor)
                refs.append(extract_reference_points(g, scale=factor))
            refs_per_scale.append(refs)

    ann = frames
    fused_maps = []
    for i, (stage, (factor, c)) in enumerate(zip(net.stages, cfg.scales)):
        a_pre = ops.conv2d(ann, stage.ann_w, stage.ann_b, stride=stage.stride, pad=1)
        _probe_conv(probe, f"stage{i}.ann", "ann", ann, stage.ann_w, a_pre)
        a = ops.group_norm(a_pre, stage.gamma, stage.beta).relu()
        if events_on:
            currents = [ops.conv2d(x, stage.snn_w, stage.snn_b,
                                   stride=stage.stride, pad=1) for x in snn_inputs]
            if probe is not None:
                _probe_snn(probe, f"stage{i}.snn", snn_inputs, stage.snn_w, currents[0])
            spikes = lif_forward_seq(currents, cfg.lif(), smooth=smooth)
            if cfg.atw_on:
                a = fusion.atw_apply(a, spikes, net.atw[i])
                if probe is not None:
                    _probe_atw(probe, f"atw{i}", net.atw[i], a, cfg)
            if cfg.eds_on:
                sn = fusion.eds_inject(spikes, a, refs_per_scale[i], net.eds[i])
                if probe is not None:
                    _probe_eds(probe, f"eds{i}", net.eds[i], spikes,
                               refs_per_scale[i], cfg)
            else:
                sn = spikes
            if cfg.csf_on:
                pa, ps = net.csf[i]
                fused = fusion.csf_fuse(a, sn, pa, ps)
                _probe_csf(probe, f"csf{i}", a)
            else:
                fused = a + sn.sum(axis=1)
            snn_inputs = [take_axis(sn, 1, t) for t in range(cfg.timesteps)]
        else:
            if cfg.csf_on:
                pa, _ = net.csf[i]
                fused = fusion.csf_select(a, pa)
                _probe_csf(probe, f"csf{i}", a, frame_only=True)
            else:
                fused = a
        ann = a
        fused_maps.append(fused)

    h0, w0 = fused_maps[0].shape[2:]
    acc = None
    for i, f in enumerate(fused_maps):
        wl, bl = net.lateral[i]
        lat = ops.conv2d(f, wl, bl)
        _probe_conv(probe, f"head.lateral{i}", "ann", f, wl, lat)
        up = ops.interp_resize(lat, h0, w0)
        acc = up if acc is None else acc + up
    logits = ops.conv2d(acc, net.cls_w, net.cls_b)
    _probe_conv(probe, "head.cls", "ann", acc, net.cls_w, logits)
    return ops.interp_resize(logits, h, w)


def _znorm_arr(grid):
    std = grid.std()
    return (grid - grid.mean()) / max(float(std), 1e-8)


def loss(logits, labels, ignore_index=255):
    """Mean softmax cross-entropy over non-ignored pixels."""
    return ops.cross_entropy(logits, labels, ignore_index=ignore_index)


def predict(net, frames, voxel=None):
    """Hard label map N*H*W (argmax; ties go to the lower class id)."""
    with no_grad():
        logits = forward(net, frames, voxel)
    return np.argmax(logits.data, axis=1)


# -- per-layer cost probing ---------------------------------------------------


def _conv_macs(x_shape, w_shape, out_shape):
    cout, cin, kh, kw = w_shape
    return int(cout * out_shape[2] * out_shape[3] * cin * kh * kw)


def _probe_conv(probe, name, kind, x, w, out):
    if probe is None:
        return
    probe.append({"name": name, "kind": kind,
                  "macs": _conv_macs(x.shape, w.shape, out.shape),
                  "rate": None, "timesteps": 1})


def _probe_snn(probe, name, inputs, w, out0):
    stacked = np.stack([x.data for x in inputs], axis=1)
    rate = float(np.count_nonzero(stacked) / stacked.size)
    probe.append({"name": name, "kind": "snn",
                  "macs": _conv_macs(inputs[0].shape, w.shape, out0.shape),
                  "rate": rate, "timesteps": len(inputs)})


def _probe_atw(probe, name, p, a, cfg):
    n, c, h, w = a.shape
    k = cfg.k_points
    t = cfg.timesteps
    # query/offset/weight/output 1x1 convs, the bottleneck adaptor and the
    # 4-corner sampling with its K-point mix
    conv_macs = h * w * (c * c + c * 2 * k + c * k + c * c)
    adaptor = t * 2 * c * (c // cfg.adaptor_ratio)
    sampling = h * w * k * 5 * c
    probe.append({"name": name, "kind": "ann",
                  "macs": int(conv_macs + adaptor + sampling),
                  "rate": None, "timesteps": 1})


def _probe_eds(probe, name, p, spikes, refs, cfg):
    n, t, c, h, w = spikes.shape
    k = cfg.k_points
    heads = t * h * w * (c * 2 * k + c * k)
    proj = h * w * c * c
    pts = sum(len(r) for r in refs) / max(len(refs), 1)
    sampling = int(t * pts * k * 9 * c)
    probe.append({"name": name, "kind": "ann",
                  "macs": int(heads + proj + sampling),
                  "rate": None, "timesteps": 1})


def _probe_csf(probe, name, a, frame_only=False):
    if probe is None:
        return
    n, c, h, w = a.shape
    branches = 1 if frame_only else 2
    probe.append({"name": name, "kind": "ann",
                  "macs": int(branches * h * w * c * c),
                  "rate": None, "timesteps": 1})


# -- checkpointing ------------------------------------------------------------


def save_checkpoint(net: HybridNetwork, path, optimizer_state=None):
    """Binary checkpoint: magic, version, config JSON, parameter tensors
    in declaration order, then optional optimizer moments. Little-endian."""
    cfg_json = json.dumps(asdict(net.config), sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(cfg_json)))
        f.write(cfg_json)
        f.write(struct.pack("<Q", len(net.params)))
        for name, p in net.params.items():
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", p.data.ndim))
            for d in p.data.shape:
                f.write(struct.pack("<I", d))
            f.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        if optimizer_state is None:
            f.write(struct.pack("<B", 0))
        else:
            f.write(struct.pack("<B", 1))
            f.write(struct.pack("<Q", optimizer_state["step"]))
            for name in net.params:
                for key in ("m", "v"):
                    f.write(np.ascontiguousarray(
                        optimizer_state[key][name], dtype="<f8").tobytes())


def load_checkpoint(path):
    """Rebuild (network, optimizer_state_or_None) from a checkpoint."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, cfg_len = struct.unpack_from("<II", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 12
    cfg_dict = json.loads(raw[pos:pos + cfg_len].decode())
    pos += cfg_len
    net = build(NetworkConfig(**cfg_dict))
    (n_params,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if n_params != len(net.params):
        raise ValueError(f"{path}: parameter count mismatch")
    for name, p in net.params.items():
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        fname = raw[pos:pos + nlen].decode()
        pos += nlen
        if fname != name:
            raise ValueError(f"{path}: expected parameter {name}, found {fname}")
        (ndim,) = struct.unpack_from("<B", raw, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        stored = np.frombuffer(raw, dtype="<f8", count=count,
                               offset=pos).reshape(shape)
        p.data = np.ascontiguousarray(stored, dtype=p.data.dtype)
        pos += 8 * count
    (has_optim,) = struct.unpack_from("<B", raw, pos)
    pos += 1
    optim = None
    if has_optim:
        (step,) = struct.unpack_from("<Q", raw, pos)
        pos += 8
        optim = {"step": step, "m": {}, "v": {}}
        for name, p in net.params.items():
            for key in ("m", "v"):
                optim[key][name] = np.frombuffer(
                    raw, dtype="<f8", count=p.size,
                    offset=pos).reshape(p.data.shape).copy()
                pos += 8 * p.size
    return net, optim
