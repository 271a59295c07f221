"""Event-stream records and file I/O.

Streams carry (x, y, t, p) camera events sorted by timestamp. Two file
formats are supported:

* EVT1 binary, little-endian: magic ``EVT1``, u32 width, u32 height,
  u64 event count, then per event u16 x, u16 y, u64 t (microseconds),
  i8 polarity (-1/+1), i8 padding (0).
* CSV with header line ``x,y,t,p``.

Round trips are bit-exact; malformed files are rejected with the index of
the offending record.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"EVT1"
_HEADER = struct.Struct("<4sIIQ")
_EVENT_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u8"),
                         ("p", "i1"), ("pad", "i1")])


@dataclass(frozen=True)
class Event:
    """A single brightness-change event."""

    x: int
    y: int
    t: int
    p: int


@dataclass
class EventStream:
    """Events plus the sensor geometry they were recorded on."""

    width: int
    height: int
    events: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=_EVENT_DTYPE))

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError("sensor geometry must be positive")
        self.events = np.asarray(self.events, dtype=_EVENT_DTYPE)
        self.validate()

    def __len__(self):
        return len(self.events)

    @property
    def xs(self):
        return self.events["x"].astype(np.int64)

    @property
    def ys(self):
        return self.events["y"].astype(np.int64)

    @property
    def ts(self):
        return self.events["t"].astype(np.int64)

    @property
    def ps(self):
        return self.events["p"].astype(np.int64)

    def __getitem__(self, i):
        e = self.events[i]
        return Event(int(e["x"]), int(e["y"]), int(e["t"]), int(e["p"]))

    def validate(self):
        ev = self.events
        if len(ev) == 0:
            return
        bad = np.nonzero((ev["x"] >= self.width) | (ev["y"] >= self.height))[0]
        if len(bad):
            raise ValueError(f"event {bad[0]} outside sensor geometry "
                             f"{self.width}x{self.height}")
        bad = np.nonzero(~np.isin(ev["p"], (-1, 1)))[0]
        if len(bad):
            raise ValueError(f"event {bad[0]} has polarity {ev['p'][bad[0]]}, expected -1 or +1")
        dec = np.nonzero(np.diff(ev["t"].astype(np.int64)) < 0)[0]
        if len(dec):
            raise ValueError(f"event {dec[0] + 1} has decreasing timestamp")

    def slice(self, start, stop):
        return EventStream(self.width, self.height, self.events[start:stop].copy())


def make_stream(width, height, xs, ys, ts, ps):
    """Assemble a stream from parallel coordinate arrays."""
    n = len(xs)
    ev = np.zeros(n, dtype=_EVENT_DTYPE)
    ev["x"] = xs
    ev["y"] = ys
    ev["t"] = ts
    ev["p"] = ps
    return EventStream(width, height, ev)


def write_events(stream: EventStream, path):
    path = str(path)
    if path.endswith(".csv"):
        with open(path, "w") as f:
            f.write("x,y,t,p\n")
            for e in stream.events:
                f.write(f"{e['x']},{e['y']},{e['t']},{e['p']}\n")
        return
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, stream.width, stream.height, len(stream.events)))
        f.write(stream.events.tobytes())


def read_events(path) -> EventStream:
    path = str(path)
    if path.endswith(".csv"):
        return _read_csv(path)
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header")
    magic, width, height, count = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    body = raw[_HEADER.size:]
    if len(body) != count * _EVENT_DTYPE.itemsize:
        got = len(body) // _EVENT_DTYPE.itemsize
        raise ValueError(f"{path}: truncated at record {got} of {count}")
    ev = np.frombuffer(body, dtype=_EVENT_DTYPE).copy()
    bad = np.nonzero(ev["pad"] != 0)[0]
    if len(bad):
        raise ValueError(f"{path}: record {bad[0]} has nonzero padding")
    return EventStream(width, height, ev)


def _read_csv(path):
    with open(path) as f:
        header = f.readline().strip()
        if header != "x,y,t,p":
            raise ValueError(f"{path}: expected header 'x,y,t,p', got {header!r}")
        rows = []
        for i, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"{path}: record {i} malformed")
            rows.append(tuple(int(v) for v in parts))
    if not rows:
        # CSV carries no geometry header; an empty file gives a 1x1 sensor
        return EventStream(1, 1)
    arr = np.array(rows, dtype=np.int64)
    width = int(arr[:, 0].max()) + 1
    height = int(arr[:, 1].max()) + 1
    return make_stream(width, height, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])


def last_window(stream: EventStream, t_end, max_events):
    """The trailing window of at most max_events events with t <= t_end."""
    ts = stream.events["t"]
    stop = int(np.searchsorted(ts, t_end, side="right"))
    start = max(0, stop - max_events)
    return stream.slice(start, stop)
