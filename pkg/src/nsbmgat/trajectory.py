"""Trajectory episodes, neighbor roles, minimum remaining distance and block maxima."""

from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

import numpy as np

TAU = 0.1
NO_NEIGHBOR = math.inf  # MRD when no neighbor exists

ROLES = ("lead_left", "lead_same", "lead_right", "lag_left", "lag_same", "lag_right")

CSV_HEADER = ["sample_id", "label", "subject_id", "t", "vehicle_id", "x", "y", "speed",
              "accel", "heading", "lane", "length", "width"]


def tick(t: float, tau: float = TAU) -> int:
    return int(round(t / tau))


@dataclass(frozen=True)
class VehicleState:
    vehicle_id: object
    t: float
    x: float
    y: float
    speed: float
    accel: float
    heading: float
    lane: int
    length: float = 4.5
    width: float = 1.8

    def __post_init__(self):
        if self.speed < 0:
            raise ValueError(f"negative speed for vehicle {self.vehicle_id}")
        if not (self.length > 0 and self.width > 0):
            raise ValueError(f"non-positive dimensions for vehicle {self.vehicle_id}")


@dataclass
class TrajectorySample:
    sample_id: str
    label: str  # "crash" or "non_crash"
    subject_id: object
    frames: dict[int, list[VehicleState]] = field(default_factory=dict)  # keyed by tick
    crash_time: float | None = None

    @property
    def is_crash(self) -> bool:
        return self.label == "crash"

    @property
    def ticks(self) -> list[int]:
        return sorted(self.frames)

    def frame(self, t: float) -> list[VehicleState]:
        return self.frames[tick(t)]

    def subject_at(self, k: int) -> VehicleState:
        for v in self.frames[k]:
            if v.vehicle_id == self.subject_id:
                return v
        raise KeyError("subject not in frame")


class NeighborSet(dict):
    """Role -> vehicle_id for the six surrounding positions; absent roles are missing."""

    def ids(self) -> list:
        return [self[r] for r in ROLES if r in self]


class BlockMax(NamedTuple):
    t: float
    z: float
    block_index: int


@dataclass(frozen=True)
class ExtremeEvent:
    sample_id: str
    t: float
    z: float
    block_index: int


def identify_neighbors(frame: Iterable[VehicleState], subject_id, n_lanes: int | None = None
                       ) -> NeighborSet:
    """Nearest vehicle ahead and behind in the left, same and right lanes.

    Lane 1 is the leftmost lane, so "left" means ``lane - 1``.
    """
    frame = list(frame)
    subj = next((v for v in frame if v.vehicle_id == subject_id), None)
    if subj is None:
        raise ValueError("subject not in frame")
    out = NeighborSet()
    for side, dl in (("left", -1), ("same", 0), ("right", 1)):
        lane = subj.lane + dl
        if lane < 1 or (n_lanes is not None and lane > n_lanes):
            continue
        ahead, behind = [], []
        for v in frame:
            if v.vehicle_id == subject_id or v.lane != lane:
                continue
            dx = v.x - subj.x
            (ahead if dx > 0 else behind).append((abs(dx), v.vehicle_id))
        if ahead:
            out[f"lead_{side}"] = min(ahead)[1]
        if behind:
            out[f"lag_{side}"] = min(behind)[1]
    return out


def rect_corners(x, y, heading, length, width) -> np.ndarray:
    """Corners (..., 4, 2) of oriented rectangles, counter-clockwise."""
    x, y, heading, length, width = np.broadcast_arrays(*(np.asarray(a, dtype=float)
                                                         for a in (x, y, heading, length, width)))
    c, s = np.cos(heading), np.sin(heading)
    hl, hw = length / 2.0, width / 2.0
    loc = np.array([[1.0, -1.0], [1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0]])
    lx = loc[:, 0] * hl[..., None]
    ly = loc[:, 1] * hw[..., None]
    px = x[..., None] + c[..., None] * lx - s[..., None] * ly
    py = y[..., None] + s[..., None] * lx + c[..., None] * ly
    return np.stack([px, py], axis=-1)


def _separated(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Separating-axis test for convex quads; True where a separating axis exists."""
    sep = np.zeros(a.shape[:-2], dtype=bool)
    for poly in (a, b):
        for i in range(2):
            edge = poly[..., i + 1, :] - poly[..., i, :]
            ax, ay = -edge[..., 1:2], edge[..., 0:1]
            pa = a[..., 0] * ax + a[..., 1] * ay
            pb = b[..., 0] * ax + b[..., 1] * ay
            sep |= (pa.max(-1) < pb.min(-1)) | (pb.max(-1) < pa.min(-1))
    return sep


def _corner_edge_dist(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Smallest distance from any corner of ``p`` to any edge of ``q``."""
    s0 = q[..., None, :, :]                       # (..., 1, 4, 2)
    d = np.roll(q, -1, axis=-2)[..., None, :, :] - s0
    pt = p[..., :, None, :]                       # (..., 4, 1, 2)
    dd = np.maximum((d * d).sum(-1), 1e-300)
    u = np.clip(((pt - s0) * d).sum(-1) / dd, 0.0, 1.0)
    r = pt - (s0 + u[..., None] * d)
    return np.sqrt((r * r).sum(-1)).min(axis=(-2, -1))


def rect_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Minimal distance between oriented rectangles given as corner arrays; 0 on overlap."""
    a, b = np.broadcast_arrays(a, b)
    best = np.minimum(_corner_edge_dist(a, b), _corner_edge_dist(b, a))
    return np.where(_separated(a, b), best, 0.0)


def _corners_of(v: VehicleState) -> np.ndarray:
    return rect_corners(v.x, v.y, v.heading, v.length, v.width)


def compute_mrd(subject: VehicleState, neighbors: Iterable[VehicleState]) -> float:
    """Smallest bounding-box gap to any neighbor; ``NO_NEIGHBOR`` if there are none."""
    neighbors = list(neighbors)
    if not neighbors:
        return NO_NEIGHBOR
    cs = _corners_of(subject)
    cn = rect_corners([v.x for v in neighbors], [v.y for v in neighbors],
                      [v.heading for v in neighbors], [v.length for v in neighbors],
                      [v.width for v in neighbors])
    return float(rect_distance(cs[None], cn).min())


def frame_mrd(frame: list[VehicleState], subject_id, n_lanes: int | None = None) -> float:
    nb = identify_neighbors(frame, subject_id, n_lanes)
    ids = set(nb.ids())
    subj = next(v for v in frame if v.vehicle_id == subject_id)
    return compute_mrd(subj, [v for v in frame if v.vehicle_id in ids])


def window_ticks(sample: TrajectorySample, T: float, start: float | None = None,
                 tau: float = TAU) -> list[int]:
    n = int(round(T / tau))
    if abs(n * tau - T) > 1e-9:
        raise ValueError("T must be a multiple of tau")
    if sample.is_crash:
        k0 = -n
    else:
        k0 = tick(start, tau) if start is not None else min(sample.frames)
    ks = list(range(k0, k0 + n + 1))
    missing = [k for k in ks if k not in sample.frames]
    if missing:
        raise ValueError(f"window not covered by frames of sample {sample.sample_id}")
    return ks


def danger_series(sample: TrajectorySample, T: float, start: float | None = None,
                  tau: float = TAU, n_lanes: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Negated-MRD series over the lead-time window; ``-inf`` where no neighbor exists."""
    ks = window_ticks(sample, T, start, tau)
    ts = np.array([k * tau for k in ks])
    xs = np.array([-frame_mrd(sample.frames[k], sample.subject_id, n_lanes) for k in ks])
    return np.round(ts, 10), xs


def block_maxima(t, x, w: float, tau: float = TAU) -> list[BlockMax]:
    """Maximum of each complete, non-overlapping block (earliest frame on ties)."""
    m = int(round(w / tau))
    if abs(m * tau - w) > 1e-9 or m < 2:
        raise ValueError("block size must be a multiple of tau and at least 2 samples")
    t = np.asarray(t, dtype=float)
    x = np.asarray(x, dtype=float)
    out = []
    for k in range(len(x) // m):
        blk = x[k * m:(k + 1) * m]
        if np.all(np.isneginf(blk)):
            continue
        j = int(np.argmax(blk))
        out.append(BlockMax(float(t[k * m + j]), float(blk[j]), k))
    return out


def filter_and_pool(per_sample_maxima: dict, Q: float | None) -> list[ExtremeEvent]:
    """Keep block maxima with MRD below ``Q`` (z > -Q) across samples.

    ``Q=None`` keeps every finite maximum.
    """
    if Q is not None and not Q > 0:
        raise ValueError("Q must be positive")
    events = []
    for sid in per_sample_maxima:
        for bm in per_sample_maxima[sid]:
            if not np.isfinite(bm.z):
                continue
            if Q is None or bm.z > -Q:
                events.append(ExtremeEvent(sid, bm.t, bm.z, bm.block_index))
    return events


# --- CSV io -----------------------------------------------------------------

def _parse_id(s: str):
    try:
        return int(s)
    except ValueError:
        return s


def write_csv(samples: Iterable[TrajectorySample], path, tau: float = TAU,
              comment: str | None = None) -> None:
    """Write samples in the trajectory CSV format; ``comment`` becomes a leading ``#`` line."""
    with open(path, "w", newline="") as fh:
        if comment:
            fh.write(f"# {comment}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in samples:
            for k in sorted(s.frames):
                for v in sorted(s.frames[k], key=lambda v: str(v.vehicle_id)):
                    w.writerow([s.sample_id, s.label, s.subject_id, f"{k * tau:.1f}", v.vehicle_id,
                                f"{v.x:.4f}", f"{v.y:.4f}", f"{v.speed:.4f}", f"{v.accel:.4f}",
                                f"{v.heading:.6f}", v.lane, f"{v.length:.3f}", f"{v.width:.3f}"])


def read_csv(path, tau: float = TAU) -> list[TrajectorySample]:
    samples: dict[str, TrajectorySample] = {}
    frames: dict[str, dict[int, list]] = defaultdict(lambda: defaultdict(list))
    with open(path, newline="") as fh:
        r = csv.DictReader(line for line in fh if not line.startswith("#"))
        missing = set(CSV_HEADER) - set(r.fieldnames or [])
        if missing:
            raise ValueError(f"trajectory CSV missing columns: {sorted(missing)}")
        for row in r:
            sid = row["sample_id"]
            if sid not in samples:
                label = row["label"]
                if label not in ("crash", "non_crash"):
                    raise ValueError(f"bad label {label!r}")
                samples[sid] = TrajectorySample(sid, label, _parse_id(row["subject_id"]),
                                                crash_time=0.0 if label == "crash" else None)
            t = float(row["t"])
            frames[sid][tick(t, tau)].append(VehicleState(
                _parse_id(row["vehicle_id"]), round(t, 10), float(row["x"]), float(row["y"]),
                float(row["speed"]), float(row["accel"]), float(row["heading"]),
                int(row["lane"]), float(row["length"]), float(row["width"])))
    for sid, s in samples.items():
        s.frames = dict(frames[sid])
    return list(samples.values())
