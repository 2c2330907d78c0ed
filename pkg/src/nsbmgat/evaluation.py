"""Fit diagnostics and prediction metrics: P-P points, AP, ROC/AUC and surrogate safety measures."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gev import GevParams, gev_cdf
from .trajectory import TAU, VehicleState

TTC_THRESHOLD = 1.5     # s
MTTC_THRESHOLD = 1.5    # s
DRAC_THRESHOLD = 3.5    # m/s^2
CONTROL_RATIO = 5


def pp_points(z, params: GevParams) -> np.ndarray:
    """(n, 2) array of (empirical plotting position, sorted PIT value).

    Each event has its own parameters, so the PIT ``F(z_i; theta_i)`` replaces
    the usual single-CDF evaluation; with shared parameters this is the
    classical P-P plot.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if z.size == 0:
        raise ValueError("pp_points needs at least one event")
    u = np.sort(np.atleast_1d(gev_cdf(z, params)))
    emp = np.arange(1, z.size + 1) / (z.size + 1)
    return np.column_stack([emp, u])


def ap(per_sample_M: dict, m_star: float, T: float | None = None, tau: float = TAU) -> float:
    """Mean over samples of the fraction of timesteps with ``M >= M*``.

    With ``T`` given, every series must hold ``T / tau + 1`` values.
    """
    if not per_sample_M:
        raise ValueError("ap needs at least one sample")
    fracs = []
    for sid in sorted(per_sample_M, key=str):
        m = np.asarray(per_sample_M[sid], dtype=float)
        if T is not None and m.size != int(round(T / tau)) + 1:
            raise ValueError(f"sample {sid}: expected {int(round(T / tau)) + 1} timesteps")
        fracs.append(float(np.mean(m >= m_star)))
    return math.fsum(fracs) / len(fracs)


def mann_whitney(case_scores, control_scores) -> float:
    """P(case > control) + 0.5 P(case == control), by exhaustive pairwise comparison."""
    c = np.asarray(case_scores, dtype=float)[:, None]
    n = np.asarray(control_scores, dtype=float)[None, :]
    return float(((c > n).sum() + 0.5 * (c == n).sum()) / (c.size * n.size))


def roc_auc(case_scores, control_scores):
    """ROC points ``(fpr, tpr)`` over all unique thresholds and the trapezoid AUC."""
    c = np.asarray(case_scores, dtype=float)
    n = np.asarray(control_scores, dtype=float)
    if c.size == 0 or n.size == 0:
        raise ValueError("roc_auc needs nonempty case and control scores")
    thr = np.unique(np.concatenate([c, n]))[::-1]
    tp = np.searchsorted(np.sort(c), thr, side="left")
    fp = np.searchsorted(np.sort(n), thr, side="left")
    tpr = np.concatenate([[0.0], (c.size - tp) / c.size])
    fpr = np.concatenate([[0.0], (n.size - fp) / n.size])
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return np.column_stack([fpr, tpr]), auc


def sample_controls(pool, n_cases: int, seed, ratio: int = CONTROL_RATIO) -> np.ndarray:
    """Indices of ``ratio * n_cases`` controls drawn uniformly without replacement."""
    n = min(len(pool), ratio * n_cases)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(len(pool), size=n, replace=False))


# --- surrogate safety measures ----------------------------------------------

@dataclass(frozen=True)
class SsmScores:
    ttc: float
    mttc: float
    drac: float
    ttc_flag: bool
    mttc_flag: bool
    drac_flag: bool


def bumper_gap(subject: VehicleState, lead: VehicleState) -> float:
    return lead.x - subject.x - 0.5 * (lead.length + subject.length)


def _mttc(gap: float, dv: float, da: float) -> float:
    """Smallest positive root of ``gap = dv t + da t^2 / 2``."""
    if abs(da) < 1e-12:
        return gap / dv if dv > 0 else math.inf
    disc = dv * dv + 2.0 * da * gap
    if disc < 0:
        return math.inf
    r = math.sqrt(disc)
    roots = [t for t in ((-dv - r) / da, (-dv + r) / da) if t > 0]
    return min(roots) if roots else math.inf


def ssm_scores(subject: VehicleState, lead: VehicleState) -> SsmScores:
    """TTC, MTTC and DRAC of a follower against its same-lane leader."""
    gap = bumper_gap(subject, lead)
    if gap <= 0:
        raise ValueError("vehicles overlapping")
    dv = subject.speed - lead.speed
    da = subject.accel - lead.accel
    ttc = gap / dv if dv > 0 else math.inf
    mttc = _mttc(gap, dv, da)
    drac = dv * dv / (2.0 * gap) if dv > 0 else 0.0
    return SsmScores(ttc, mttc, drac, ttc < TTC_THRESHOLD, mttc < MTTC_THRESHOLD,
                     drac > DRAC_THRESHOLD)


def ssm_risk(subject: VehicleState, lead: VehicleState | None) -> dict[str, float]:
    """Ranking scores (larger is riskier): 1/TTC, 1/MTTC and DRAC.

    No leader scores 0; an overlapping leader scores ``inf``.
    """
    if lead is None:
        return {"ttc": 0.0, "mttc": 0.0, "drac": 0.0}
    if bumper_gap(subject, lead) <= 0:
        return {"ttc": math.inf, "mttc": math.inf, "drac": math.inf}
    s = ssm_scores(subject, lead)
    return {"ttc": 1.0 / s.ttc, "mttc": 1.0 / s.mttc, "drac": s.drac}


SSM_WARN_SCORE = {"ttc": 1.0 / TTC_THRESHOLD, "mttc": 1.0 / MTTC_THRESHOLD,
                  "drac": DRAC_THRESHOLD}


def ssm_warns(name: str, score: float) -> bool:
    """Strict-inequality flag expressed on the ranking score."""
    return score > SSM_WARN_SCORE[name]
