"""Generalized extreme value distribution engine.

All functions broadcast over numpy arrays: a :class:`GevParams` may hold
scalars or arrays (one parameter triple per item of a batch).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import integrate

XI_EPS = 1e-6
SUPPORT_EPS = 1e-8
XI_MAX = float(np.nextafter(1.0, 0.0))
_EXP_CAP = 700.0


@dataclass(frozen=True)
class GevParams:
    xi: float
    sigma: float
    mu: float

    def to_dict(self) -> dict:
        return {"xi": float(self.xi), "sigma": float(self.sigma), "mu": float(self.mu)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> GevParams:
        return cls(xi=float(d["xi"]), sigma=float(d["sigma"]), mu=float(d["mu"]))

    @classmethod
    def from_json(cls, s: str) -> GevParams:
        return cls.from_dict(json.loads(s))

    def __getitem__(self, idx) -> GevParams:
        return GevParams(np.asarray(self.xi)[idx], np.asarray(self.sigma)[idx],
                         np.asarray(self.mu)[idx])


@dataclass(frozen=True)
class RawGevParams:
    xi_raw: float
    sigma_raw: float
    mu_raw: float


def transform_raw(raw: RawGevParams) -> GevParams:
    """Map unconstrained network outputs to a valid triple (tanh / exp / identity)."""
    arrs = [np.asarray(v, dtype=float) for v in (raw.xi_raw, raw.sigma_raw, raw.mu_raw)]
    if not all(np.all(np.isfinite(a)) for a in arrs):
        raise ValueError("raw GEV parameters must be finite")
    xi, sigma, mu = np.tanh(arrs[0]), np.exp(arrs[1]), arrs[2]
    # tanh rounds to +-1 for |raw| > ~19; keep the shape in the open interval
    xi = np.clip(xi, -XI_MAX, XI_MAX)
    if xi.ndim == 0:
        return GevParams(float(xi), float(sigma), float(mu))
    return GevParams(xi, sigma, mu)


def _prep(z, p: GevParams):
    z, xi, sigma, mu = np.broadcast_arrays(
        np.asarray(z, dtype=float), np.asarray(p.xi, dtype=float),
        np.asarray(p.sigma, dtype=float), np.asarray(p.mu, dtype=float))
    return z, xi, sigma, mu


def _out(a):
    return float(a) if np.ndim(a) == 0 else a


def gev_cdf(z, p: GevParams):
    z, xi, sigma, mu = _prep(z, p)
    y = (z - mu) / sigma
    gum = np.abs(xi) < XI_EPS
    out = np.empty(z.shape)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        out[gum] = np.exp(-np.exp(-y[gum]))
        ng = ~gum
        x, yy = xi[ng], y[ng]
        s = 1.0 + x * yy
        inside = s > 0
        val = np.where(x > 0, 0.0, 1.0)
        # log s via log1p for accuracy at small xi
        ls = np.log1p(np.where(inside, x * yy, 0.0))
        val = np.where(inside, np.exp(-np.exp(-ls / x)), val)
        # z = +/-inf with xi > 0 / xi < 0 lands on s = +inf, handled by exp
        out[ng] = val
    return _out(out)


def gev_logpdf(z, p: GevParams):
    """Log-density; exactly ``-inf`` outside the support."""
    z, xi, sigma, mu = _prep(z, p)
    y = (z - mu) / sigma
    gum = np.abs(xi) < XI_EPS
    out = np.full(z.shape, -np.inf)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        yg = y[gum]
        out[gum] = -yg - np.exp(-yg) - np.log(sigma[gum])
        ng = ~gum
        x, yy, sg = xi[ng], y[ng], sigma[ng]
        arg = x * yy
        inside = (1.0 + arg > 0) & np.isfinite(arg)
        ls = np.log1p(np.where(inside, arg, 0.0))
        val = -(1.0 + 1.0 / x) * ls - np.exp(np.minimum(-ls / x, _EXP_CAP)) - np.log(sg)
        out[ng] = np.where(inside, val, -np.inf)
    out = np.where(np.isnan(out), -np.inf, out)
    return _out(out)


def gev_quantile(u, p: GevParams):
    u_arr = np.asarray(u, dtype=float)
    if np.any(~((u_arr > 0) & (u_arr < 1))):
        raise ValueError("quantile level must lie in (0, 1)")
    u, xi, sigma, mu = _prep(u_arr, p)
    ll = -np.log(-np.log(u))  # Gumbel reduced variate
    gum = np.abs(xi) < XI_EPS
    safe_xi = np.where(gum, 1.0, xi)
    # ((-log u)^(-xi) - 1) / xi == expm1(xi * ll) / xi
    red = np.where(gum, ll, np.expm1(safe_xi * ll) / safe_xi)
    return _out(mu + sigma * red)


def gev_sample(p: GevParams, n: int, seed=None) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    u = rng.random(n)
    u = np.where(u <= 0.0, np.nextafter(0.0, 1.0), u)
    return np.asarray(gev_quantile(u, p), dtype=float)


@dataclass
class NllResult:
    """Batch negative log-likelihood with per-item gradients."""

    loss: float
    d_xi: np.ndarray
    d_sigma: np.ndarray
    d_mu: np.ndarray
    d_xi_raw: np.ndarray
    d_sigma_raw: np.ndarray
    clamped: np.ndarray  # True where the item sat outside the support

    @property
    def d_raw(self) -> np.ndarray:
        """(n, 3) gradient w.r.t. (xi_raw, sigma_raw, mu_raw)."""
        return np.stack([self.d_xi_raw, self.d_sigma_raw, self.d_mu], axis=-1)


def nll_terms(z, p: GevParams, clamp: bool = True):
    """Per-item NLL and its analytic partials w.r.t. (xi, sigma, mu).

    With ``clamp`` the support term ``s = 1 + xi (z - mu) / sigma`` is floored
    at ``SUPPORT_EPS`` and the violation ``SUPPORT_EPS - s`` is added to the
    item's loss; the returned partials are those of this clamped expression, so
    they stay consistent with finite differences.
    """
    z, xi, sigma, mu = _prep(z, p)
    z, xi, sigma, mu = (np.atleast_1d(a).astype(float) for a in (z, xi, sigma, mu))
    y = (z - mu) / sigma
    nll = np.empty(z.shape)
    g_xi = np.zeros(z.shape)
    g_sig = np.empty(z.shape)
    g_mu = np.empty(z.shape)
    clamped = np.zeros(z.shape, dtype=bool)

    gum = np.abs(xi) < XI_EPS
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        yg, sg = y[gum], sigma[gum]
        eg = np.exp(-yg)
        nll[gum] = np.log(sg) + yg + eg
        g_mu[gum] = (-1.0 + eg) / sg
        g_sig[gum] = (1.0 - yg + yg * eg) / sg
        # d/dxi is taken as 0 on the Gumbel branch

        ng = ~gum
        x, yy, sn = xi[ng], y[ng], sigma[ng]
        s = 1.0 + x * yy
        bad = ~(s > SUPPORT_EPS) if clamp else np.zeros(s.shape, dtype=bool)
        if not clamp:
            if np.any(s <= 0):
                raise ValueError("observation outside GEV support")
        s_eff = np.where(bad, SUPPORT_EPS, s)
        ls = np.where(bad, math.log(SUPPORT_EPS), np.log1p(np.where(bad, 0.0, x * yy)))
        pw = np.exp(np.minimum(-ls / x, _EXP_CAP))  # s^(-1/xi)
        # beyond the floor a linear term in the violation keeps the clamped
        # objective bounded below (otherwise xi -> -1, sigma -> 0 wins)
        viol = np.where(bad, SUPPORT_EPS - s, 0.0)
        nll_ng = np.log(sn) + (1.0 + 1.0 / x) * ls + pw + viol
        # partials of the unclamped expression
        d_s = (1.0 + 1.0 / x) / s_eff - pw / (x * s_eff)
        gm = d_s * (-x / sn)
        gs = 1.0 / sn + d_s * (-x * yy / sn)
        gx = -ls / x**2 + pw * ls / x**2 + d_s * yy
        # floored expression: s is constant, only explicit xi / sigma terms remain
        gm = np.where(bad, x / sn, gm)
        gs = np.where(bad, 1.0 / sn + x * yy / sn, gs)
        gx = np.where(bad, -ls / x**2 + pw * ls / x**2 - yy, gx)
        nll[ng] = nll_ng
        g_mu[ng], g_sig[ng], g_xi[ng] = gm, gs, gx
        clamped[ng] = bad
    return nll, g_xi, g_sig, g_mu, clamped


def nll_and_grads(z_batch, params_batch: GevParams, clamp: bool = True) -> NllResult:
    """Summed NLL over a batch, analytic gradients, and the raw-space chain rule."""
    nll, g_xi, g_sig, g_mu, clamped = nll_terms(z_batch, params_batch, clamp=clamp)
    xi = np.broadcast_to(np.asarray(params_batch.xi, dtype=float), nll.shape)
    sigma = np.broadcast_to(np.asarray(params_batch.sigma, dtype=float), nll.shape)
    if np.any(clamped):
        warnings.warn(f"{int(clamped.sum())} observation(s) outside GEV support; clamped",
                      RuntimeWarning, stacklevel=2)
    # sum in a fixed order for bit-stable totals
    loss = math.fsum(nll.tolist())
    return NllResult(
        loss=loss,
        d_xi=g_xi,
        d_sigma=g_sig,
        d_mu=g_mu,
        d_xi_raw=g_xi * (1.0 - xi**2),
        d_sigma_raw=g_sig * sigma,
        clamped=clamped,
    )


class FitError(RuntimeError):
    pass


def _initial_raw(z: np.ndarray, xi_raw0: float) -> np.ndarray:
    std = float(np.std(z))
    if not std > 0:
        std = 1e-3
    return np.array([xi_raw0, math.log(std * math.sqrt(6.0) / math.pi), float(np.mean(z))])


def fit_stationary(events, lr: float = 0.2, max_iters: int = 20000, seed=None,
                   xi_raw0: float = 0.1, tol: float = 1e-8) -> GevParams:
    """Stationary GEV fit by gradient descent on the raw parameters.

    ``events`` is either a sequence of objects with a ``z`` attribute or an
    array of values. The descent runs on standardized values (the GEV family is
    closed under affine maps, so the fit transforms back exactly) and minimizes
    the mean exact NLL. A step that raises the loss, including one that pushes
    an event outside the support, is retried at half the step size. A NaN loss
    counts as divergence: five in a row raise :class:`FitError`.
    ``seed`` is accepted for interface symmetry; the descent is deterministic.
    """
    z_in = np.asarray([e.z for e in events] if _has_z(events) else events, dtype=float)
    if z_in.size < 10:
        raise ValueError("need at least 10 events for a stationary fit")
    if not np.all(np.isfinite(z_in)):
        raise ValueError("events must be finite")
    loc = float(np.mean(z_in))
    scale = float(np.std(z_in)) or 1.0
    z = (z_in - loc) / scale
    n = z.size

    def objective(raw):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            p = transform_raw(RawGevParams(*raw))
            if not math.isfinite(p.sigma):
                return math.inf, np.zeros(3)
            res = nll_and_grads(z, GevParams(np.full(n, p.xi), np.full(n, p.sigma),
                                             np.full(n, p.mu)))
        if np.any(res.clamped):
            # exact likelihood: leaving the support is a failed step, not a clamped reward
            return math.inf, np.zeros(3)
        grad = np.array([res.d_xi_raw.sum(), res.d_sigma_raw.sum(), res.d_mu.sum()]) / n
        return res.loss / n, grad

    # a positive start shape bounds the support below; flip it if that excludes data
    raw = _initial_raw(z, xi_raw0)
    loss, grad = objective(raw)
    if not np.isfinite(loss):
        raw = _initial_raw(z, -xi_raw0)
        loss, grad = objective(raw)
    if not np.isfinite(loss):
        raise FitError("moment initialization leaves events outside the GEV support")

    step, failures = lr, 0
    for _ in range(max_iters):
        cand = raw - step * grad
        new_loss, new_grad = objective(cand)
        if np.isnan(new_loss) or np.any(np.isnan(new_grad)):
            failures += 1
            if failures > 5:
                raise FitError("stationary GEV fit diverged after 5 learning-rate halvings")
            step /= 2.0
            continue
        failures = 0
        if not new_loss <= loss:
            step /= 2.0
            if step < 1e-12:
                break
            continue
        done = loss - new_loss < tol
        raw, loss, grad = cand, new_loss, new_grad
        if done:
            break
    p = transform_raw(RawGevParams(*raw))
    return GevParams(p.xi, p.sigma * scale, loc + p.mu * scale)


def _has_z(events) -> bool:
    try:
        first = next(iter(events))
    except StopIteration:
        return False
    return hasattr(first, "z")


def crps(p: GevParams, y: float, tail: float = 1e-8, atol: float = 1e-6) -> float:
    """Continuous ranked probability score of one observation, by quadrature."""
    lo_q = float(gev_quantile(tail, p))
    hi_q = float(gev_quantile(1.0 - tail, p))
    lo, hi = min(lo_q, y), max(hi_q, y)

    def below(x):
        return float(gev_cdf(x, p)) ** 2

    def above(x):
        return (1.0 - float(gev_cdf(x, p))) ** 2

    def quad(f, a, b):
        if b <= a:
            return 0.0
        pts = [q for q in (lo_q, hi_q, float(p.mu)) if a < q < b] or None
        val, _ = integrate.quad(f, a, b, epsabs=atol * 1e-2, epsrel=1e-10, limit=400,
                                points=pts)
        return val

    return quad(below, lo, y) + quad(above, y, hi)


def crps_mean(params: GevParams, ys) -> float:
    """Average CRPS over paired (params_i, y_i)."""
    ys = np.atleast_1d(np.asarray(ys, dtype=float))
    xi = np.broadcast_to(np.asarray(params.xi, dtype=float), ys.shape)
    sg = np.broadcast_to(np.asarray(params.sigma, dtype=float), ys.shape)
    mu = np.broadcast_to(np.asarray(params.mu, dtype=float), ys.shape)
    vals = [crps(GevParams(float(a), float(b), float(c)), float(v))
            for a, b, c, v in zip(xi, sg, mu, ys)]
    return float(np.mean(vals))
