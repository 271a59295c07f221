"""AdamW with a warmup + polynomial-decay schedule, and the training loop."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import HybridNetwork, forward, loss


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 1e-4
    total_iterations: int = 2000
    warmup_iterations: int = 100
    poly_power: float = 0.9
    batch_size: int = 4
    seed: int = 0
    ignore_index: int = 255
    augment_flip: bool = False   # random horizontal flip per visit

    def __post_init__(self):
        if self.warmup_iterations > self.total_iterations:
            raise ValueError("warmup must not exceed total iterations")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


def lr_at(cfg: TrainConfig, iteration):
    """base * iter/warmup while warming up, then poly decay
    base * (1 - iter/total)^power."""
    base = cfg.learning_rate
    if cfg.warmup_iterations and iteration < cfg.warmup_iterations:
        return base * iteration / cfg.warmup_iterations
    return base * (1.0 - iteration / cfg.total_iterations) ** cfg.poly_power


class AdamW:
    """Decoupled weight-decay Adam (beta1=0.9, beta2=0.999, eps=1e-8)."""

    def __init__(self, params: dict, weight_decay=0.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.weight_decay = weight_decay
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.step_count = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr):
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            p.data -= lr * (update + self.weight_decay * p.data)

    def state(self):
        return {"step": self.step_count, "m": self.m, "v": self.v}

    def load_state(self, state):
        self.step_count = int(state["step"])
        for name in self.params:
            self.m[name] = state["m"][name].copy()
            self.v[name] = state["v"][name].copy()


def prepare_batches(samples, bins):
    """Precompute per-sample model inputs: frames, raw voxels, labels."""
    frames = np.stack([s.frame_input() for s in samples])
    voxels = np.stack([s.voxel(bins).data for s in samples])
    labels = np.stack([s.labels.astype(np.int64) for s in samples])
    return frames, voxels, labels


def train(net: HybridNetwork, samples, cfg: TrainConfig, log_every=0):
    """Train in place; returns (net, per-iteration loss array).

    Batches follow one seeded shuffle of the dataset, then cycle in that
    fixed order, so runs are bit-reproducible for fixed seeds.
    """
    if not samples:
        raise ValueError("empty training dataset")
    frames, voxels, labels = prepare_batches(samples, net.config.bins)
    order = np.random.default_rng(cfg.seed).permutation(len(samples))
    aug_rng = np.random.default_rng(cfg.seed + 0x5E5)
    optimizer = AdamW(net.params, weight_decay=cfg.weight_decay)
    losses = np.zeros(cfg.total_iterations)
    cursor = 0
    for it in range(cfg.total_iterations):
        idx = order[[(cursor + j) % len(samples) for j in range(cfg.batch_size)]]
        cursor = (cursor + cfg.batch_size) % len(samples)
        f, v, l = frames[idx], voxels[idx], labels[idx]
        if cfg.augment_flip:
            flip = aug_rng.random(len(idx)) < 0.5
            f = np.where(flip[:, None, None, None], f[..., ::-1], f)
            v = np.where(flip[:, None, None, None], v[..., ::-1], v)
            l = np.where(flip[:, None, None], l[..., ::-1], l)
        net.zero_grad()
        logits = forward(net, f, v)
        out = loss(logits, l, ignore_index=cfg.ignore_index)
        value = out.item()
        if not np.isfinite(value):
            raise FloatingPointError(
                f"non-finite loss {value} at iteration {it}; aborting")
        out.backward()
        optimizer.step(lr_at(cfg, it))
        losses[it] = value
        if log_every and (it + 1) % log_every == 0:
            recent = losses[max(0, it - log_every + 1):it + 1].mean()
            print(f"iter {it + 1:5d}/{cfg.total_iterations}  "
                  f"loss {recent:.4f}  lr {lr_at(cfg, it):.5f}")
    return net, losses
