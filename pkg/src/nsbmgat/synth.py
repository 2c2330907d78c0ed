"""Seeded synthetic traffic streams with injected rear-end and sideswipe crashes.

Each stream is a multi-lane platoon on a straight road driven by the
intelligent driver model (IDM) plus acceleration noise. Background drivers
perform safe lane changes and occasional braking pulses. A crash is injected
either by a distracted follower behind a braking leader (rear-end) or by a
lane change into an occupied, longitudinally overlapping slot (sideswipe).
Non-crash windows come from the same stream before the injection, so crash
and non-crash samples share traffic conditions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .trajectory import TAU, TrajectorySample, VehicleState, frame_mrd, rect_corners, \
    rect_distance

log = logging.getLogger(__name__)

CRASH_TYPES = ("rear_end", "sideswipe")
REGIMES = {
    # desired speed (m/s), time headway (s), initial spacing (m)
    "congested": {"v0": (10.0, 16.0), "headway": (1.0, 1.5), "spacing": (14.0, 24.0)},
    "free": {"v0": (24.0, 32.0), "headway": (1.2, 2.0), "spacing": (35.0, 70.0)},
}
A_MIN = -9.0  # hardest deceleration any controller may request (m/s^2)


class SynthError(RuntimeError):
    pass


@dataclass
class SynthConfig:
    n_crash: int = 40
    n_noncrash: int = 200
    lanes: int = 3
    lane_width: float = 3.5
    segment_length: float = 400.0
    crash_mix: dict = field(default_factory=lambda: {"rear_end": 0.25, "sideswipe": 0.75})
    regimes: dict = field(default_factory=lambda: {"congested": 0.5, "free": 0.5})
    lc_duration: tuple = (1.5, 3.0)        # injected lane changes (aggressive)
    safe_lc_duration: tuple = (3.0, 5.0)   # background lane changes
    lc_rate: float = 0.03                  # background lane changes per vehicle per second
    brake_rate: float = 0.02               # braking pulses per vehicle per second
    accel_noise: float = 0.2               # m/s^2
    history: float = 5.0                   # seconds of pre-crash history
    noncrash_duration: float = 5.0
    record_radius: float = 60.0
    noncrash_min_mrd: float = 1.0
    max_retries: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.n_crash < 0 or self.n_noncrash < 0:
            raise ValueError("sample counts must be nonnegative")
        if self.lanes < 2:
            raise ValueError("need at least two lanes")
        if set(self.crash_mix) - set(CRASH_TYPES):
            raise ValueError(f"unknown crash types {sorted(set(self.crash_mix) - set(CRASH_TYPES))}")
        if set(self.regimes) - set(REGIMES):
            raise ValueError("unknown traffic regime")
        if self.n_crash > 0 and sum(self.crash_mix.values()) <= 0:
            raise ValueError("crash mix must have positive weight")


def smoothstep(s):
    """Quintic sigmoid on [0, 1] with zero slope and curvature at both ends."""
    s = np.clip(s, 0.0, 1.0)
    return s**3 * (10.0 - 15.0 * s + 6.0 * s**2)


def smoothstep_rate(s):
    s = np.clip(s, 0.0, 1.0)
    return 30.0 * s**2 * (1.0 - s) ** 2


class Stream:
    """Vectorized state of one traffic stream."""

    def __init__(self, cfg: SynthConfig, rng: np.random.Generator, regime: str):
        self.cfg, self.rng, self.regime = cfg, rng, regime
        r = REGIMES[regime]
        xs, lanes = [], []
        for lane in range(1, cfg.lanes + 1):
            x = rng.uniform(0, r["spacing"][1])
            while x < cfg.segment_length:
                xs.append(x)
                lanes.append(lane)
                x += rng.uniform(*r["spacing"])
        n = len(xs)
        self.n = n
        self.length = rng.uniform(4.2, 4.9, n)
        self.width = rng.uniform(1.7, 1.9, n)
        self.v0 = rng.uniform(*r["v0"], n)
        self.T = rng.uniform(*r["headway"], n)
        self.amax = rng.uniform(1.0, 2.0, n)
        self.b = rng.uniform(1.5, 2.5, n)
        self.s0 = np.full(n, 2.0)
        self.x = np.array(xs)
        self.lane_from = np.array(lanes)
        self.lane_to = self.lane_from.copy()
        self.lc_t0 = np.zeros(n)
        self.lc_dur = np.ones(n)
        self.changing = np.zeros(n, dtype=bool)
        self.y = self.lane_center(self.lane_from)
        self.vy = np.zeros(n)
        # start close to equilibrium for the initial spacing
        self.v = np.clip(np.array([rng.uniform(*r["spacing"]) for _ in range(n)]) / self.T * 0.5,
                         2.0, self.v0 * 0.95)
        self.a = np.zeros(n)
        self.forced_a = np.full(n, np.nan)   # scripted acceleration
        self.forced_until = np.zeros(n)
        self.frozen = np.zeros(n, dtype=bool)    # distracted: no reaction at all
        self.blind = np.zeros(n, dtype=bool)     # ignores target-lane traffic while changing
        self.t = 0.0
        self.rec: list[dict] = []

    def lane_center(self, lane):
        return (self.cfg.lanes - np.asarray(lane) + 0.5) * self.cfg.lane_width

    def lane_index(self):
        k = np.rint(self.cfg.lanes + 0.5 - self.y / self.cfg.lane_width).astype(int)
        return np.clip(k, 1, self.cfg.lanes)

    def heading(self):
        return np.arctan2(self.vy, np.maximum(self.v, 1e-9))

    def occupies(self):
        """(n, lanes) bool: lanes each vehicle blocks for followers."""
        occ = np.zeros((self.n, self.cfg.lanes + 1), dtype=bool)
        idx = np.arange(self.n)
        occ[idx, self.lane_index()] = True
        occ[idx[self.changing], self.lane_from[self.changing]] = True
        occ[idx[self.changing], self.lane_to[self.changing]] = True
        return occ

    def gaps_to_leaders(self):
        """Bumper gap and speed of each vehicle's leader in the lanes it watches."""
        occ = self.occupies()
        watch = np.zeros_like(occ)
        idx = np.arange(self.n)
        watch[idx, self.lane_index()] = True
        watch[idx, self.lane_from] |= self.changing
        aware = self.changing & ~self.blind
        watch[idx[aware], self.lane_to[aware]] = True
        dx = self.x[None, :] - self.x[:, None]
        gap = dx - 0.5 * (self.length[:, None] + self.length[None, :])
        shares = (watch.astype(int) @ occ.T.astype(int)) > 0
        cand = shares & (dx > 0)
        np.fill_diagonal(cand, False)
        g = np.where(cand, gap, np.inf)
        j = np.argmin(g, axis=1)
        s = g[idx, j]
        return s, np.where(np.isfinite(s), self.v[j], self.v)

    def idm(self):
        s, vl = self.gaps_to_leaders()
        dv = self.v - vl
        s_star = self.s0 + np.maximum(0.0, self.v * self.T + self.v * dv / (2 * np.sqrt(self.amax * self.b)))
        inter = np.where(np.isfinite(s), (s_star / np.maximum(s, 0.1)) ** 2, 0.0)
        a = self.amax * (1.0 - (self.v / self.v0) ** 4 - inter)
        return a

    def background_events(self):
        cfg, rng = self.cfg, self.rng
        p_lc = cfg.lc_rate * TAU
        p_br = cfg.brake_rate * TAU
        lanes = self.lane_index()
        for i in np.flatnonzero(rng.random(self.n) < p_lc):
            if self.changing[i] or self.frozen[i] or self.v[i] < 3.0:
                continue
            target = lanes[i] + rng.choice((-1, 1))
            if not 1 <= target <= cfg.lanes:
                continue
            in_t = (lanes == target) | (self.changing & (self.lane_to == target))
            in_t[i] = False
            dx = self.x - self.x[i]
            ahead = in_t & (dx > 0)
            behind = in_t & (dx <= 0)
            lead_gap = (dx[ahead] - 0.5 * (self.length[ahead] + self.length[i])).min(initial=np.inf)
            lag_gap = (-dx[behind] - 0.5 * (self.length[behind] + self.length[i])).min(initial=np.inf)
            lag_v = self.v[behind][np.argmax(dx[behind])] if behind.any() else 0.0
            if lead_gap > max(12.0, 0.8 * self.v[i]) and lag_gap > max(12.0, 1.2 * lag_v):
                self.start_lc(i, target, rng.uniform(*cfg.safe_lc_duration))
        for i in np.flatnonzero(rng.random(self.n) < p_br):
            if self.frozen[i] or not np.isnan(self.forced_a[i]):
                continue
            self.forced_a[i] = -rng.uniform(2.0, 3.5)
            self.forced_until[i] = self.t + rng.uniform(1.0, 2.0)

    def start_lc(self, i, target, duration):
        self.lane_from[i] = self.lane_index()[i]
        self.lane_to[i] = target
        self.lc_t0[i] = self.t
        self.lc_dur[i] = duration
        self.changing[i] = True

    def step(self, background: bool = True):
        if background:
            self.background_events()
        a = self.idm() + self.rng.normal(0.0, self.cfg.accel_noise, self.n)
        forced = ~np.isnan(self.forced_a) & (self.t < self.forced_until)
        a = np.where(forced, self.forced_a, a)
        self.forced_a[~forced & (self.t >= self.forced_until)] = np.nan
        a = np.where(self.frozen, self.rng.normal(0.0, 0.1, self.n), a)
        a = np.clip(a, A_MIN, 3.0)
        a = np.maximum(a, -self.v / TAU)  # never reverse
        self.a = a
        self.record()
        self.x = self.x + self.v * TAU + 0.5 * a * TAU**2
        self.v = np.maximum(self.v + a * TAU, 0.0)
        self.t = round(self.t + TAU, 10)
        # lateral motion follows the smoothstep profile exactly
        s = (self.t - self.lc_t0) / self.lc_dur
        y0, y1 = self.lane_center(self.lane_from), self.lane_center(self.lane_to)
        ch = self.changing
        self.y = np.where(ch, y0 + (y1 - y0) * smoothstep(s), self.y)
        self.vy = np.where(ch, (y1 - y0) * smoothstep_rate(s) / self.lc_dur, 0.0)
        done = ch & (s >= 1.0)
        self.changing[done] = False
        self.lane_from[done] = self.lane_to[done]
        self.vy[done] = 0.0

    def record(self):
        hd = self.heading()
        self.rec.append({"t": self.t, "x": self.x.copy(), "y": self.y.copy(),
                         "speed": np.hypot(self.v, self.vy), "accel": self.a.copy(),
                         "heading": hd, "lane": self.lane_index()})

    def snapshot(self):
        """Record the current state without advancing (used for the crash frame)."""
        self.a = np.zeros(self.n)
        self.record()

    def corners(self, idx):
        hd = self.heading()
        return rect_corners(self.x[idx], self.y[idx], hd[idx], self.length[idx], self.width[idx])

    def overlaps(self, i) -> bool:
        near = np.flatnonzero((np.abs(self.x - self.x[i]) < 10.0) & (np.arange(self.n) != i))
        if near.size == 0:
            return False
        d = rect_distance(self.corners(np.array([i]))[0][None], self.corners(near))
        return bool(np.any(d <= 0.0))

    def central(self):
        mid = np.median(self.x)
        return np.flatnonzero(np.abs(self.x - mid) < 0.15 * self.cfg.segment_length)

    def frame(self, k: int, subject: int, t_out: float) -> list[VehicleState]:
        r = self.rec[k]
        near = np.flatnonzero(np.abs(r["x"] - r["x"][subject]) <= self.cfg.record_radius)
        return [VehicleState(int(i), t_out, float(r["x"][i]), float(r["y"][i]),
                             float(r["speed"][i]), float(r["accel"][i]), float(r["heading"][i]),
                             int(r["lane"][i]), float(self.length[i]), float(self.width[i]))
                for i in near]


def _round_state(v: VehicleState) -> VehicleState:
    # match the CSV precision so in-memory and reloaded samples agree exactly
    return VehicleState(v.vehicle_id, v.t, round(v.x, 4), round(v.y, 4), round(v.speed, 4),
                        round(v.accel, 4), round(v.heading, 6), v.lane, round(v.length, 3),
                        round(v.width, 3))


def _sample(stream: Stream, k0: int, k1: int, subject: int, sid: str, label: str,
            tick0: int) -> TrajectorySample:
    frames = {}
    for j, k in enumerate(range(k0, k1 + 1)):
        tk = tick0 + j
        frames[tk] = [_round_state(v) for v in stream.frame(k, subject, round(tk * TAU, 10))]
    return TrajectorySample(sid, label, subject, frames, 0.0 if label == "crash" else None)


def _min_mrd(sample: TrajectorySample) -> float:
    return min(frame_mrd(sample.frames[k], sample.subject_id) for k in sample.frames)


def _inject_rear_end(stream: Stream) -> int | None:
    rng = stream.rng
    lanes = stream.lane_index()
    cands = []
    for f in stream.central():
        if stream.changing[f]:
            continue
        same = np.flatnonzero((lanes == lanes[f]) & (stream.x > stream.x[f]) & ~stream.changing)
        if same.size == 0:
            continue
        lead = same[np.argmin(stream.x[same])]
        gap = stream.x[lead] - stream.x[f] - 0.5 * (stream.length[lead] + stream.length[f])
        if 4.0 < gap < 45.0 and stream.v[f] > 5.0:
            cands.append((f, lead))
    if not cands:
        return None
    f, lead = cands[rng.integers(len(cands))]
    stream.frozen[f] = True
    stream.forced_a[lead] = -rng.uniform(4.0, 7.0)
    stream.forced_until[lead] = stream.t + rng.uniform(2.0, 4.0)
    return int(f)


def _inject_sideswipe(stream: Stream) -> int | None:
    rng = stream.rng
    lanes = stream.lane_index()
    cen = stream.central()
    pairs = []
    for c in cen:
        for p in cen:
            if c == p or stream.changing[c] or stream.changing[p]:
                continue
            if abs(int(lanes[c]) - int(lanes[p])) == 1 and abs(stream.x[c] - stream.x[p]) < 3.0 \
                    and stream.v[c] > 3.0:
                pairs.append((c, p))
    if not pairs:
        return None
    c, p = pairs[rng.integers(len(pairs))]
    stream.blind[c] = True
    stream.frozen[p] = True
    stream.start_lc(c, int(lanes[p]), rng.uniform(*stream.cfg.lc_duration))
    return int(c if rng.random() < 0.5 else p)


def _run_crash_stream(cfg: SynthConfig, rng, kind: str, sid: str, n_noncrash: int,
                      nid_start: int):
    regime = rng.choice(sorted(cfg.regimes), p=_weights(cfg.regimes))
    stream = Stream(cfg, rng, str(regime))
    hist = int(round(cfg.history / TAU))
    nc = int(round(cfg.noncrash_duration / TAU))
    t_inj = rng.uniform(max(8.0, cfg.history + 3.0), 12.0)
    while stream.t < t_inj:
        stream.step()
    inject = _inject_rear_end if kind == "rear_end" else _inject_sideswipe
    subject = None
    for _ in range(20):
        subject = inject(stream)
        if subject is not None:
            break
        for _ in range(5):
            stream.step()
    if subject is None:
        return None
    k_inj = len(stream.rec)
    deadline = stream.t + 10.0
    while stream.t < deadline:
        stream.step(background=False)
        if stream.overlaps(subject):
            break
    else:
        return None
    stream.snapshot()
    k_crash = len(stream.rec) - 1
    if k_crash - hist < 0:
        return None
    crash = _sample(stream, k_crash - hist, k_crash, subject, sid, "crash", -hist)
    if frame_mrd(crash.frames[0], subject) != 0.0:
        return None
    if min(frame_mrd(crash.frames[k], subject) for k in crash.frames if k < 0) <= 0.0:
        return None
    others = _noncrash_windows(stream, rng, k_inj, nc, n_noncrash, nid_start, cfg)
    return crash, others, str(regime)


def _noncrash_windows(stream, rng, k_end, nc, count, nid_start, cfg):
    out = []
    tries = 0
    while len(out) < count and tries < 40 * max(count, 1):
        tries += 1
        if k_end - nc - 10 < 0:
            break
        k0 = int(rng.integers(10, max(11, k_end - nc)))
        x_mid = np.median(stream.rec[k0]["x"])
        cen = np.flatnonzero(np.abs(stream.rec[k0]["x"] - x_mid) < 0.15 * cfg.segment_length)
        subj = int(rng.choice(cen))
        s = _sample(stream, k0, k0 + nc, subj, f"n{nid_start + len(out):04d}", "non_crash", 0)
        if _min_mrd(s) > cfg.noncrash_min_mrd:
            out.append(s)
    return out


def _weights(d: dict) -> np.ndarray:
    w = np.array([d[k] for k in sorted(d)], dtype=float)
    return w / w.sum()


def crash_kinds(cfg: SynthConfig) -> list[str]:
    """Deterministic crash-type sequence honoring the configured mix."""
    keys = [k for k in CRASH_TYPES if cfg.crash_mix.get(k, 0) > 0]
    w = np.array([cfg.crash_mix[k] for k in keys], dtype=float)
    counts = np.floor(w / w.sum() * cfg.n_crash).astype(int)
    rem = cfg.n_crash - counts.sum()
    frac = w / w.sum() * cfg.n_crash - counts
    for j in np.argsort(-frac, kind="stable")[:rem]:
        counts[j] += 1
    kinds = [k for k, c in zip(keys, counts) for _ in range(c)]
    rng = np.random.default_rng([cfg.seed, 9])
    return [kinds[i] for i in rng.permutation(len(kinds))]


def generate_dataset(cfg: SynthConfig) -> list[TrajectorySample]:
    """Crash samples (``c0000``...) followed by non-crash samples (``n0000``...)."""
    kinds = crash_kinds(cfg)
    crashes: list[TrajectorySample] = []
    noncrash: list[TrajectorySample] = []
    n_streams = max(cfg.n_crash, 1)
    per = [cfg.n_noncrash // n_streams + (1 if i < cfg.n_noncrash % n_streams else 0)
           for i in range(n_streams)]
    for i, kind in enumerate(kinds):
        for attempt in range(cfg.max_retries):
            rng = np.random.default_rng([cfg.seed, i, attempt])
            res = _run_crash_stream(cfg, rng, kind, f"c{i:04d}", per[i], len(noncrash))
            if res is not None:
                crashes.append(res[0])
                noncrash.extend(res[1])
                break
        else:
            raise SynthError(f"could not inject a {kind} crash after {cfg.max_retries} attempts")
    # top up non-crash windows from crash-free streams
    j = 0
    while len(noncrash) < cfg.n_noncrash:
        if j >= cfg.max_retries * max(1, cfg.n_noncrash):
            raise SynthError("could not generate enough non-crash windows")
        rng = np.random.default_rng([cfg.seed, 10**6 + j])
        regime = rng.choice(sorted(cfg.regimes), p=_weights(cfg.regimes))
        stream = Stream(cfg, rng, str(regime))
        while stream.t < 12.0:
            stream.step()
        need = min(5, cfg.n_noncrash - len(noncrash))
        noncrash.extend(_noncrash_windows(stream, rng, len(stream.rec), int(round(
            cfg.noncrash_duration / TAU)), need, len(noncrash), cfg))
        j += 1
    return crashes + noncrash[:cfg.n_noncrash]
