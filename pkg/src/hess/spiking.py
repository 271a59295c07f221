"""Leaky integrate-and-fire dynamics with hard reset and a sigmoid
surrogate gradient.

Membrane update per step: H = V + (X - V)/tau, spike S = [H >= theta],
then V resets to v_reset where S fired and keeps H elsewhere. The
membrane is stored as a compensated pair (hi, lo): a long sub-threshold
approach must not falsely cross the threshold just because the rounded
sum lands on theta, so the update uses an exact two-sum and the spike
comparison includes the compensation term.

Backward follows the standard surrogate convention: the Heaviside is
differentiated as alpha * sigmoid'(alpha * (H - theta)) and the reset
mask is treated as a constant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, constant, record_op, stack


@dataclass(frozen=True)
class LIFConfig:
    tau: float = 2.0
    v_threshold: float = 1.0
    v_reset: float = 0.0
    surrogate_alpha: float = 4.0

    def __post_init__(self):
        if not self.tau > 1.0:
            raise ValueError("tau must be > 1")
        if not self.v_threshold > self.v_reset:
            raise ValueError("v_threshold must exceed v_reset")


@dataclass
class LIFState:
    """Membrane potential per neuron, as a compensated (v, lo) pair.

    The represented potential is v + lo with |lo| below one ulp of v.
    """

    v: np.ndarray
    lo: np.ndarray

    @classmethod
    def zeros(cls, shape, cfg: LIFConfig, dtype=np.float64):
        return cls(np.full(shape, cfg.v_reset, dtype=dtype),
                   np.zeros(shape, dtype=dtype))


def _two_sum(a, b):
    s = a + b
    ap = s - b
    bp = s - ap
    return s, (a - ap) + (b - bp)


def _step_arrays(state: LIFState, x, cfg: LIFConfig):
    """Raw membrane update. Returns (h, h_lo, spike_mask, next_state)."""
    d = ((x - state.v) - state.lo) / cfg.tau
    y = state.lo + d
    h, h_lo = _two_sum(state.v, y)
    spike = ((h - cfg.v_threshold) + h_lo) >= 0.0
    v_next = np.where(spike, cfg.v_reset, h)
    lo_next = np.where(spike, 0.0, h_lo)
    return h, h_lo, spike, LIFState(v_next, lo_next)


def lif_step(state: LIFState, x, cfg: LIFConfig):
    """One LIF update on plain arrays: (spikes, new state)."""
    x = np.asarray(x, dtype=np.float64)
    if not np.isfinite(x).all():
        raise ValueError("LIF input current must be finite")
    _, _, spike, nxt = _step_arrays(state, x, cfg)
    return spike.astype(np.float64), nxt


def surrogate_grad(h, cfg: LIFConfig):
    """Surrogate dS/dH: alpha * sigmoid'(alpha * (H - theta))."""
    a = cfg.surrogate_alpha
    h = np.asarray(h)
    if h.dtype not in (np.float32, np.float64):
        h = h.astype(np.float64)
    z = a * (h - cfg.v_threshold)
    e = np.exp(-np.abs(z))
    sig = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return a * sig * (1.0 - sig)


def lif_forward_seq(inputs, cfg: LIFConfig, smooth=False):
    """Run a LIF layer over a sequence of input currents.

    inputs: list of T same-shaped Tensors (one per timestep). The state
    starts at v_reset. Returns the spike tensor stacked on a new axis 1
    (inputs of shape N*C*H*W give N*T*C*H*W).

    With smooth=True the spike output is the scaled sigmoid itself
    instead of the Heaviside (the reset still uses the hard threshold);
    this makes the layer finite-difference checkable and its backward is
    identical to the surrogate convention used in hard mode.
    """
    if len(inputs) == 0:
        raise ValueError("lif_forward_seq needs at least one timestep")
    inputs = [constant(x) for x in inputs]
    shape = inputs[0].shape
    for x in inputs:
        if x.shape != shape:
            raise ValueError("all timestep inputs must share a shape")
    state = LIFState.zeros(shape, cfg, dtype=inputs[0].data.dtype)
    v_node = constant(np.full(shape, cfg.v_reset))
    spikes = []
    for x in inputs:
        if not np.isfinite(x.data).all():
            raise ValueError("LIF input current must be finite")
        s_node, v_node, state = _lif_step_op(v_node, x, state, cfg, smooth)
        spikes.append(s_node)
    return stack(spikes, axis=1)


def _lif_step_op(v_in: Tensor, x: Tensor, state: LIFState, cfg: LIFConfig, smooth):
    h, _, spike, nxt = _step_arrays(state, x.data, cfg)
    if smooth:
        a = cfg.surrogate_alpha
        z = a * (h - cfg.v_threshold)
        az = np.abs(z)
        s_data = np.where(z >= 0, 1.0 / (1.0 + np.exp(-az)),
                          np.exp(-az) / (1.0 + np.exp(-az)))
    else:
        s_data = spike.astype(np.float64)
    s_out = Tensor(s_data)
    v_out = Tensor(nxt.v)
    keep = ~spike
    surr = surrogate_grad(h, cfg)
    inv_tau = 1.0 / cfg.tau

    def backward(g_s, g_v):
        # dH aggregates the spike path (surrogate) and the carried
        # membrane (reset mask detached)
        dh = 0.0
        if g_s is not None:
            dh = dh + g_s * surr
        if g_v is not None:
            dh = dh + g_v * keep
        return dh * (1.0 - inv_tau), dh * inv_tau

    record_op([s_out, v_out], [v_in, x], backward)
    return s_out, v_out, nxt


def spike_rate(s):
    """Mean firing rate of a strictly binary spike tensor."""
    data = s.data if isinstance(s, Tensor) else np.asarray(s, dtype=np.float64)
    if data.size == 0:
        raise ValueError("empty spike tensor")
    if not np.all((data == 0.0) | (data == 1.0)):
        raise ValueError("spike tensor must be strictly binary")
    return float(data.mean())


def constant_input_trajectory(x_const, cfg: LIFConfig, steps):
    """Membrane values after each of ``steps`` updates under a constant
    scalar input, stopping early at the first spike.

    Returns (membrane H per executed step, index of first spike or None).
    The simulation also stops once the compensated state reaches a fixed
    point, since the trajectory is constant from there on; the returned
    array is then truncated (no spike can ever follow).
    """
    state = LIFState.zeros((1,), cfg)
    x = np.full((1,), float(x_const))
    hs = []
    prev = None
    for i in range(steps):
        h, _, spike, nxt = _step_arrays(state, x, cfg)
        hs.append(h[0])
        if spike[0]:
            return np.array(hs), i
        cur = (nxt.v[0], nxt.lo[0])
        if cur == prev:
            break
        prev = cur
        state = nxt
    return np.array(hs), None
