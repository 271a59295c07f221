"""Synthetic moving-shapes scenes: frames, label maps and event streams.

Rectangles with class-specific gray levels drift over a constant
background and bounce off the borders. Events are produced by differencing
consecutive micro-step renderings: a pixel whose normalized intensity
changes by more than the contrast threshold fires one event with the sign
of the change. Everything is deterministic given the seed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .events import EventStream, make_stream, read_events, write_events
from .imgio import read_pgm, write_pgm
from .voxel import VoxelGrid, voxelize

BACKGROUND_LEVEL = 0.45
CONTRAST_THRESHOLD = 0.15
# gray levels assigned to class ids 1, 2, ... (cycled); all at least 0.2
# away from the background so edges always clear the contrast threshold
CLASS_LEVELS = (0.85, 0.10, 0.70, 0.25, 0.95)


@dataclass
class SynthConfig:
    width: int = 64
    height: int = 64
    duration_us: int = 100_000
    num_shapes: int = 3
    num_classes: int = 3
    frame_count: int = 50
    micro_steps: int = 4          # event-sampling substeps per frame interval
    min_size: int = 10
    max_size: int = 22

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("scene geometry must be at least 16x16")
        if self.num_classes < 2:
            raise ValueError("need at least background plus one shape class")
        if self.frame_count < 1 or self.micro_steps < 1:
            raise ValueError("frame_count and micro_steps must be >= 1")


@dataclass
class _Shape:
    class_id: int
    level: float
    half_h: float
    half_w: float
    y0: float
    x0: float
    vy: float      # px per microsecond
    vx: float


@dataclass
class Scene:
    config: SynthConfig
    shapes: list[_Shape] = field(default_factory=list)

    def _positions(self, t):
        for s in self.shapes:
            y = _reflect(s.y0 + s.vy * t, s.half_h, self.config.height - 1 - s.half_h)
            x = _reflect(s.x0 + s.vx * t, s.half_w, self.config.width - 1 - s.half_w)
            yield s, y, x

    def render(self, t):
        """Normalized grayscale image at time t (float in [0, 1])."""
        cfg = self.config
        img = np.full((cfg.height, cfg.width), BACKGROUND_LEVEL)
        yy = np.arange(cfg.height)[:, None]
        xx = np.arange(cfg.width)[None, :]
        for s, y, x in self._positions(t):
            inside = (np.abs(yy - y) <= s.half_h) & (np.abs(xx - x) <= s.half_w)
            img[inside] = s.level
        return img

    def labels(self, t):
        """Class-id map at time t (background is 0; later shapes on top)."""
        cfg = self.config
        lab = np.zeros((cfg.height, cfg.width), dtype=np.uint8)
        yy = np.arange(cfg.height)[:, None]
        xx = np.arange(cfg.width)[None, :]
        for s, y, x in self._positions(t):
            inside = (np.abs(yy - y) <= s.half_h) & (np.abs(xx - x) <= s.half_w)
            lab[inside] = s.class_id
        return lab


def _reflect(pos, lo, hi):
    if hi <= lo:
        return lo
    span = hi - lo
    z = (pos - lo) % (2.0 * span)
    return lo + (z if z <= span else 2.0 * span - z)


def build_scene(seed, config: SynthConfig) -> Scene:
    g = np.random.default_rng(seed)
    scene = Scene(config)
    us_per_frame = config.duration_us / config.frame_count
    # shapes must fit the scene with room to move
    hi = min(config.max_size, min(config.width, config.height) - 6)
    lo = min(config.min_size, hi)
    for i in range(config.num_shapes):
        cls = 1 + i % (config.num_classes - 1)
        half_h = g.uniform(lo, hi) / 2.0
        half_w = g.uniform(lo, hi) / 2.0
        y0 = g.uniform(half_h, config.height - 1 - half_h)
        x0 = g.uniform(half_w, config.width - 1 - half_w)
        # 0.5 .. 1.5 px per frame, random direction
        speed = g.uniform(0.5, 1.5) / us_per_frame
        angle = g.uniform(0, 2 * np.pi)
        scene.shapes.append(_Shape(
            class_id=cls,
            level=CLASS_LEVELS[(cls - 1) % len(CLASS_LEVELS)],
            half_h=half_h, half_w=half_w, y0=y0, x0=x0,
            vy=speed * np.sin(angle), vx=speed * np.cos(angle)))
    return scene


def gen_synthetic(seed, config: SynthConfig):
    """Scene from seed -> (event stream, frames, label maps, frame times)."""
    return render_sequence(build_scene(seed, config), config)


def render_sequence(scene: Scene, config: SynthConfig):
    """Render a scene: (event stream, frames, label maps, frame timestamps).

    Frames are uint8 renderings at uniform timestamps k/frame_count *
    duration (k = 1..frame_count); events come from micro-step
    differencing between them.
    """
    cfg = config
    total_steps = cfg.frame_count * cfg.micro_steps
    step_times = [int(round((m + 1) * cfg.duration_us / total_steps))
                  for m in range(total_steps)]
    frame_times = [step_times[(k + 1) * cfg.micro_steps - 1]
                   for k in range(cfg.frame_count)]

    xs, ys, ts, ps = [], [], [], []
    prev = scene.render(0)
    frames, labels = [], []
    for m, t in enumerate(step_times):
        cur = scene.render(t)
        diff = cur - prev
        fy, fx = np.nonzero(np.abs(diff) > CONTRAST_THRESHOLD)
        if len(fy):
            xs.append(fx)
            ys.append(fy)
            ts.append(np.full(len(fy), t, dtype=np.int64))
            ps.append(np.sign(diff[fy, fx]).astype(np.int64))
        prev = cur
        if (m + 1) % cfg.micro_steps == 0:
            frames.append(np.round(cur * 255).astype(np.uint8))
            labels.append(scene.labels(t))

    if xs:
        stream = make_stream(cfg.width, cfg.height,
                             np.concatenate(xs), np.concatenate(ys),
                             np.concatenate(ts), np.concatenate(ps))
    else:
        stream = EventStream(cfg.width, cfg.height)
    return stream, frames, labels, frame_times


# -- dataset assembly --------------------------------------------------------


@dataclass
class SegSample:
    """One training/eval record: a frame, its label map and the event
    window that precedes the frame."""

    frame: np.ndarray          # (H, W) uint8
    labels: np.ndarray         # (H, W) uint8 class ids
    events: EventStream
    t_lo: int
    t_hi: int

    def frame_input(self):
        return (self.frame.astype(np.float64) / 255.0)[None]   # (1, H, W)

    def voxel(self, bins) -> VoxelGrid:
        if len(self.events):
            t0 = int(self.events.ts[0])
            t1 = int(self.events.ts[-1])
            if t1 <= t0:
                t1 = t0 + 1   # degenerate single-instant window
            return voxelize(self.events, bins, t0, t1)
        return VoxelGrid(np.zeros((bins, self.frame.shape[0], self.frame.shape[1])),
                         self.t_lo, max(self.t_hi, self.t_lo + 1))


def make_samples(seed, config: SynthConfig, max_events=6400):
    """Generate a scene and cut one sample per frame.

    Each sample's window is the inter-frame interval, capped at the most
    recent max_events events.
    """
    stream, frames, labels, frame_times = gen_synthetic(seed, config)
    ts = stream.events["t"]
    samples = []
    t_prev = 0
    for k, t_k in enumerate(frame_times):
        start = int(np.searchsorted(ts, t_prev, side="right"))
        stop = int(np.searchsorted(ts, t_k, side="right"))
        start = max(start, stop - max_events)
        samples.append(SegSample(frames[k], labels[k],
                                 stream.slice(start, stop), t_prev, t_k))
        t_prev = t_k
    return samples


def save_dataset(samples, out_dir, meta=None):
    os.makedirs(out_dir, exist_ok=True)
    for i, s in enumerate(samples):
        write_pgm(s.frame, os.path.join(out_dir, f"frame_{i:04d}.pgm"))
        write_pgm(s.labels, os.path.join(out_dir, f"label_{i:04d}.pgm"))
        write_events(s.events, os.path.join(out_dir, f"events_{i:04d}.evt1"))
    info = {"samples": len(samples),
            "height": int(samples[0].frame.shape[0]) if samples else 0,
            "width": int(samples[0].frame.shape[1]) if samples else 0,
            "windows": [[int(s.t_lo), int(s.t_hi)] for s in samples]}
    if meta:
        info.update(meta)
    with open(os.path.join(out_dir, "meta.json"), "w") as f:
        json.dump(info, f, indent=1)


def load_dataset(in_dir):
    with open(os.path.join(in_dir, "meta.json")) as f:
        info = json.load(f)
    samples = []
    for i in range(info["samples"]):
        frame = read_pgm(os.path.join(in_dir, f"frame_{i:04d}.pgm"))
        labels = read_pgm(os.path.join(in_dir, f"label_{i:04d}.pgm"))
        events = read_events(os.path.join(in_dir, f"events_{i:04d}.evt1"))
        t_lo, t_hi = info["windows"][i]
        samples.append(SegSample(frame, labels, events, t_lo, t_hi))
    return samples, info
