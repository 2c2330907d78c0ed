"""Crash-risk scoring from a crash / non-crash pair of GEV distributions.

For a threshold ``i`` on the danger scale, the crash-side recall is the crash
mass above ``i`` and the non-crash specificity is the non-crash mass below it.
Their sum ``Metric(i) = 1 - F_c(i) + F_n(i)`` lies in ``[0, 2]``; the risk value
``M`` is its maximum over thresholds between the scale floor ``-Q`` and the
current danger value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .gev import GevParams, gev_cdf
from .model import TrainedModel
from .scene_graph import SceneGraph

DEFAULT_Q = 1.0
DEFAULT_GRID_N = 200
M_STEP = 0.05


@dataclass(frozen=True)
class RiskAssessment:
    t: float | None
    M: float
    warn: bool
    crash_params: GevParams
    noncrash_params: GevParams

    def __post_init__(self):
        if not 0.0 <= self.M <= 2.0:
            raise ValueError("risk value outside [0, 2]")


@dataclass
class ThresholdCalibration:
    m_star: float
    lead_time: float | None = None
    v_curve: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"lead_time": self.lead_time, "m_star": self.m_star,
                "v_curve": [{"m": m, "v": v} for m, v in self.v_curve]}

    @classmethod
    def from_dict(cls, d: dict) -> ThresholdCalibration:
        return cls(float(d["m_star"]), d.get("lead_time"),
                   [(float(p["m"]), float(p["v"])) for p in d.get("v_curve", [])])

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def _grid(current_z, Q: float, grid_n: int) -> np.ndarray:
    """(n, grid_n) thresholds from ``min(-Q, z)`` to ``z`` for each current value."""
    z = np.asarray(current_z, dtype=float)
    lo = np.minimum(-Q, z)
    frac = np.linspace(0.0, 1.0, grid_n)
    return lo[..., None] + (z - lo)[..., None] * frac


def risk_values(current_z, crash_p: GevParams, noncrash_p: GevParams, grid_n: int = DEFAULT_GRID_N,
                Q: float = DEFAULT_Q) -> np.ndarray:
    """Vectorized :func:`risk_value` over arrays of current values and parameter triples.

    A current value of ``-inf`` (no neighbor) scores 1: both CDFs vanish there.
    """
    if grid_n < 2:
        raise ValueError("grid_n must be >= 2")
    z = np.atleast_1d(np.asarray(current_z, dtype=float))
    finite = np.isfinite(z)
    zz = np.where(finite, z, -Q)
    thr = _grid(zz, Q, grid_n)
    thr = np.where(finite[:, None], thr, z[:, None])

    def expand(p):
        return GevParams(*(np.broadcast_to(np.asarray(v, dtype=float), z.shape)[:, None]
                           for v in (p.xi, p.sigma, p.mu)))

    metric = 1.0 - gev_cdf(thr, expand(crash_p)) + gev_cdf(thr, expand(noncrash_p))
    return np.clip(np.max(metric, axis=1), 0.0, 2.0)


def risk_value(current_z: float, crash_p: GevParams, noncrash_p: GevParams,
               grid_n: int = DEFAULT_GRID_N, Q: float = DEFAULT_Q) -> float:
    """Risk value ``M`` in ``[0, 2]`` for one frame."""
    return float(risk_values([current_z], crash_p, noncrash_p, grid_n, Q)[0])


def m_grid(step: float = M_STEP) -> np.ndarray:
    n = int(round(2.0 / step))
    return np.round(np.arange(n + 1) * step, 10)


def calibrate_threshold(crash_Ms, noncrash_Ms, grid=None, lead_time=None) -> ThresholdCalibration:
    """Pick ``M*`` maximizing ``V = Recall + 1 - FAR``; ties go to the smallest threshold."""
    c = np.asarray(crash_Ms, dtype=float)
    n = np.asarray(noncrash_Ms, dtype=float)
    if c.size == 0 or n.size == 0:
        raise ValueError("calibration needs nonempty crash and non-crash lists")
    grid = m_grid() if grid is None else np.asarray(grid, dtype=float)
    recall = (c[None, :] >= grid[:, None]).mean(1)
    far = (n[None, :] >= grid[:, None]).mean(1)
    # rounding makes mathematically equal fraction sums compare equal in floating point
    v = np.round(recall + 1.0 - far, 12)
    best = int(np.argmax(v))
    curve = [(float(m), float(x)) for m, x in zip(grid, v)]
    return ThresholdCalibration(float(grid[best]), lead_time, curve)


def _check_tags(model_c: TrainedModel, model_n: TrainedModel) -> None:
    if model_c.tag != "crash" or model_n.tag != "non_crash":
        raise ValueError("expected a crash-tagged and a non_crash-tagged model")


def predict(graph: SceneGraph, model_c: TrainedModel, model_n: TrainedModel, m_star: float,
            current_z: float, grid_n: int = DEFAULT_GRID_N, Q: float = DEFAULT_Q
            ) -> RiskAssessment:
    """Score one frame with both models and issue a warning when ``M >= M*``."""
    _check_tags(model_c, model_n)
    pc = model_c.predict([graph])[0]
    pn = model_n.predict([graph])[0]
    pc = GevParams(float(pc.xi), float(pc.sigma), float(pc.mu))
    pn = GevParams(float(pn.xi), float(pn.sigma), float(pn.mu))
    M = risk_value(current_z, pc, pn, grid_n, Q)
    return RiskAssessment(graph.t, M, M >= m_star, pc, pn)


def predict_batch(graphs, model_c: TrainedModel, model_n: TrainedModel, current_z,
                  grid_n: int = DEFAULT_GRID_N, Q: float = DEFAULT_Q):
    """Risk values and both parameter sets for a list of graphs."""
    _check_tags(model_c, model_n)
    pc = model_c.predict(graphs)
    pn = model_n.predict(graphs)
    return risk_values(current_z, pc, pn, grid_n, Q), pc, pn
