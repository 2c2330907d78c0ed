"""Graph-attention covariate network mapping scene graphs to GEV parameters.

Forward pass per graph:

1. global edge context: per-edge score MLP, softmax over active edges, weighted
   sum of linearly mapped edge features;
2. local edge context per node: attention over the node's incident edges;
3. node input ``H_v = [h_v, F_g, F_L,v]``;
4. two graph-attention layers (self-loop plus active neighbors);
5. element-wise max pooling over present nodes;
6. linear head to raw ``(xi, sigma, mu)`` followed by tanh / exp / identity.

Everything is batched over graphs and differentiated by hand.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .gev import FitError, GevParams, RawGevParams, fit_stationary, nll_and_grads, nll_terms, \
    transform_raw
from .scene_graph import D_EDGE, D_NODE, INCIDENCE, N_EDGES, N_NODES, EDGE_INDEX, GraphBatch, \
    as_batch

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LAYERS = ("gat1", "gat2")


class TrainingError(RuntimeError):
    pass


@dataclass
class ModelParams:
    weights: dict[str, np.ndarray]
    hidden: int = 32
    d_g: int = 16
    score_hidden: int = 8
    slope: float = 0.2
    aggregate: str = "center"  # "center": sum_u a_vu W H_v ; "neighbor": sum_u a_vu W H_u
    node_mean: np.ndarray = field(default_factory=lambda: np.zeros(D_NODE))
    node_std: np.ndarray = field(default_factory=lambda: np.ones(D_NODE))
    edge_mean: np.ndarray = field(default_factory=lambda: np.zeros(D_EDGE))
    edge_std: np.ndarray = field(default_factory=lambda: np.ones(D_EDGE))

    def copy(self) -> ModelParams:
        return ModelParams({k: v.copy() for k, v in self.weights.items()}, self.hidden, self.d_g,
                           self.score_hidden, self.slope, self.aggregate, self.node_mean.copy(),
                           self.node_std.copy(), self.edge_mean.copy(), self.edge_std.copy())

    def hyper(self) -> dict:
        return {"hidden": self.hidden, "d_g": self.d_g, "score_hidden": self.score_hidden,
                "slope": self.slope, "aggregate": self.aggregate}

    def to_dict(self) -> dict:
        return {
            "hyperparameters": self.hyper(),
            "normalization": {k: getattr(self, k).tolist()
                              for k in ("node_mean", "node_std", "edge_mean", "edge_std")},
            "weights": {k: {"shape": list(v.shape), "data": v.ravel().tolist()}
                        for k, v in sorted(self.weights.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelParams:
        w = {k: np.asarray(v["data"], dtype=float).reshape(v["shape"])
             for k, v in d["weights"].items()}
        norm = {k: np.asarray(v, dtype=float) for k, v in d["normalization"].items()}
        return cls(w, **d["hyperparameters"], **norm)


def weight_shapes(hidden=32, d_g=16, score_hidden=8) -> dict[str, tuple]:
    d0 = D_NODE + 2 * d_g
    return {
        "glob_W1": (score_hidden, D_EDGE), "glob_b1": (score_hidden,), "glob_w2": (score_hidden,),
        "glob_Wg": (d_g, D_EDGE),
        "loc_We": (d_g, D_EDGE), "loc_Wh": (d_g, D_NODE), "loc_a": (2 * d_g,),
        "gat1_W": (hidden, d0), "gat1_b": (hidden,), "gat1_a": (2 * hidden,), "gat1_c": (1,),
        "gat2_W": (hidden, hidden), "gat2_b": (hidden,), "gat2_a": (2 * hidden,), "gat2_c": (1,),
        "fc_W": (3, hidden), "fc_b": (3,),
    }


def init_params(seed=None, hidden=32, d_g=16, score_hidden=8, slope=0.2, aggregate="center"
                ) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    w = {}
    for name, shape in weight_shapes(hidden, d_g, score_hidden).items():
        if name.endswith(("_b", "_b1", "_c")) or name == "fc_b":
            w[name] = np.zeros(shape)
            continue
        if len(shape) == 2:
            fan_out, fan_in = shape
        else:  # attention / score vectors act as (len -> 1) maps
            fan_in, fan_out = shape[0], 1
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        w[name] = rng.uniform(-lim, lim, size=shape)
    return ModelParams(w, hidden, d_g, score_hidden, slope, aggregate)


# --- primitives -------------------------------------------------------------

def _lrelu(x, slope):
    return np.where(x > 0, x, slope * x)


def _dlrelu(x, slope):
    return np.where(x > 0, 1.0, slope)


def _msoftmax(s, mask, axis=-1):
    s = np.where(mask, s, -np.inf)
    m = np.max(s, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.where(mask, np.exp(s - m), 0.0)
    den = e.sum(axis=axis, keepdims=True)
    return e / np.where(den > 0, den, 1.0)


def _softmax_back(alpha, dalpha, axis=-1):
    return alpha * (dalpha - (alpha * dalpha).sum(axis=axis, keepdims=True))


def adjacency(batch: GraphBatch) -> np.ndarray:
    """(B, 7, 7) attention neighborhoods: self-loops on present nodes plus active edges."""
    B = len(batch)
    adj = np.zeros((B, N_NODES, N_NODES), dtype=bool)
    idx = np.arange(N_NODES)
    adj[:, idx, idx] = batch.node_mask
    a, b = EDGE_INDEX[:, 0], EDGE_INDEX[:, 1]
    adj[:, a, b] |= batch.edge_mask
    adj[:, b, a] |= batch.edge_mask
    return adj


# --- forward / backward -----------------------------------------------------

def forward_batch(batch: GraphBatch, m: ModelParams, keep_cache: bool = False):
    """Raw head outputs (B, 3) for a batch; optionally the cache for :func:`backward_batch`."""
    w, sl = m.weights, m.slope
    if batch.nodes.shape[1:] != (N_NODES, D_NODE) or batch.edges.shape[1:] != (N_EDGES, D_EDGE):
        raise ValueError("graph batch has wrong shape")
    nm, em = batch.node_mask, batch.edge_mask
    h = (batch.nodes - m.node_mean) / m.node_std * nm[..., None]
    A = (batch.edges - m.edge_mean) / m.edge_std * em[..., None]
    B = h.shape[0]

    # global edge context
    P = A @ w["glob_W1"].T + w["glob_b1"]
    Qa = _lrelu(P, sl)
    s = Qa @ w["glob_w2"]
    beta = _msoftmax(s, em)
    G = A @ w["glob_Wg"].T
    Fg = np.einsum("be,bed->bd", beta, G)

    # local edge context
    dg = m.d_g
    U = A @ w["loc_We"].T
    ua = U @ w["loc_a"][:dg]
    hv = h @ w["loc_Wh"].T
    ha = hv @ w["loc_a"][dg:]
    S = INCIDENCE
    inc_mask = (S != 0)[None] & em[:, None, :]
    logit = S[None] * ua[:, None, :] + ha[:, :, None]
    alpha = _msoftmax(_lrelu(logit, sl), inc_mask)
    FL = np.einsum("bne,ne,bed->bnd", alpha, S, U)

    H = np.concatenate([h, np.broadcast_to(Fg[:, None, :], (B, N_NODES, dg)), FL], axis=-1)
    adj = adjacency(batch)
    layers = []
    for name in LAYERS:
        W, b, a, c = w[f"{name}_W"], w[f"{name}_b"], w[f"{name}_a"], w[f"{name}_c"]
        hd = W.shape[0]
        Z = H @ W.T
        zl, zr = Z @ a[:hd], Z @ a[hd:]
        e_pre = zl[:, :, None] + zr[:, None, :] + c
        att = _msoftmax(_lrelu(e_pre, sl), adj)
        if m.aggregate == "center":
            agg = att.sum(-1)[..., None] * Z
        else:
            agg = att @ Z
        pre = agg + b
        Hn = np.maximum(pre, 0.0)
        layers.append((H, Z, e_pre, att, pre))
        H = Hn

    Hm = np.where(nm[..., None], H, -np.inf)
    arg = np.argmax(Hm, axis=1)  # (B, hidden)
    pooled = np.take_along_axis(H, arg[:, None, :], axis=1)[:, 0, :]
    raw = pooled @ w["fc_W"].T + w["fc_b"]
    if not keep_cache:
        return raw
    cache = dict(h=h, A=A, P=P, Qa=Qa, beta=beta, G=G, U=U, hv=hv, logit=logit, alpha=alpha,
                 layers=layers, arg=arg, pooled=pooled, nm=nm, em=em)
    return raw, cache


def backward_batch(cache: dict, d_raw: np.ndarray, m: ModelParams) -> dict[str, np.ndarray]:
    """Gradients of ``sum(d_raw * raw)`` w.r.t. every weight."""
    w, sl, dg = m.weights, m.slope, m.d_g
    g: dict[str, np.ndarray] = {}
    g["fc_W"] = d_raw.T @ cache["pooled"]
    g["fc_b"] = d_raw.sum(0)
    dpooled = d_raw @ w["fc_W"]
    layers = cache["layers"]
    B, hd = dpooled.shape
    dH = np.zeros((B, N_NODES, hd))
    np.put_along_axis(dH, cache["arg"][:, None, :], dpooled[:, None, :], axis=1)

    for name, (H, Z, e_pre, att, pre) in zip(reversed(LAYERS), reversed(layers)):
        W, a = w[f"{name}_W"], w[f"{name}_a"]
        hdim = W.shape[0]
        dpre = dH * (pre > 0)
        g[f"{name}_b"] = dpre.sum((0, 1))
        if m.aggregate == "center":
            dZ = att.sum(-1)[..., None] * dpre
            datt = np.broadcast_to((dpre * Z).sum(-1)[..., None], att.shape)
        else:
            dZ = np.swapaxes(att, 1, 2) @ dpre
            datt = dpre @ np.swapaxes(Z, 1, 2)
        de = _softmax_back(att, datt)
        dep = de * _dlrelu(e_pre, sl)
        g[f"{name}_c"] = np.array([dep.sum()])
        dzl, dzr = dep.sum(-1), dep.sum(-2)
        g[f"{name}_a"] = np.concatenate([np.einsum("bn,bnh->h", dzl, Z),
                                         np.einsum("bn,bnh->h", dzr, Z)])
        dZ = dZ + dzl[..., None] * a[:hdim] + dzr[..., None] * a[hdim:]
        g[f"{name}_W"] = np.einsum("bnh,bnd->hd", dZ, H)
        dH = dZ @ W

    dFg = dH[..., D_NODE:D_NODE + dg].sum(1)
    dFL = dH[..., D_NODE + dg:]

    # local edge context
    S, U, A, alpha, logit = INCIDENCE, cache["U"], cache["A"], cache["alpha"], cache["logit"]
    dalpha = S[None] * np.einsum("bnd,bed->bne", dFL, U)
    dU = np.einsum("bne,ne,bnd->bed", alpha, S, dFL)
    dlogit = _softmax_back(alpha, dalpha) * _dlrelu(logit, sl)
    dua = np.einsum("bne,ne->be", dlogit, S)
    dha = dlogit.sum(-1)
    a_e, a_h = w["loc_a"][:dg], w["loc_a"][dg:]
    g["loc_a"] = np.concatenate([np.einsum("be,bed->d", dua, U),
                                 np.einsum("bn,bnd->d", dha, cache["hv"])])
    dU = dU + dua[..., None] * a_e
    dhv = dha[..., None] * a_h
    g["loc_Wh"] = np.einsum("bnd,bnk->dk", dhv, cache["h"])
    g["loc_We"] = np.einsum("bed,bek->dk", dU, A)

    # global edge context
    beta, G = cache["beta"], cache["G"]
    dbeta = np.einsum("bd,bed->be", dFg, G)
    dG = beta[..., None] * dFg[:, None, :]
    g["glob_Wg"] = np.einsum("bed,bek->dk", dG, A)
    ds = _softmax_back(beta, dbeta)
    g["glob_w2"] = np.einsum("be,bek->k", ds, cache["Qa"])
    dP = ds[..., None] * w["glob_w2"] * _dlrelu(cache["P"], sl)
    g["glob_W1"] = np.einsum("bej,bek->jk", dP, A)
    g["glob_b1"] = dP.sum((0, 1))
    return g


def raw_to_params(raw: np.ndarray) -> GevParams:
    return transform_raw(RawGevParams(raw[:, 0], raw[:, 1], raw[:, 2]))


def predict_params(graphs, m: ModelParams, chunk: int = 4096) -> GevParams:
    """GEV parameters (arrays) for a batch or list of graphs."""
    batch = as_batch(graphs)
    raws = [forward_batch(batch.take(slice(i, i + chunk)), m) for i in range(0, len(batch), chunk)]
    raw = np.concatenate(raws) if raws else np.zeros((0, 3))
    return raw_to_params(raw)


def forward(graph, m: ModelParams) -> GevParams:
    """GEV parameters for a single graph."""
    p = predict_params([graph], m)
    return GevParams(float(p.xi[0]), float(p.sigma[0]), float(p.mu[0]))


def loss_and_grads(batch: GraphBatch, z: np.ndarray, m: ModelParams):
    """Summed GEV NLL over the batch and its gradient for every weight."""
    raw, cache = forward_batch(batch, m, keep_cache=True)
    if not np.all(np.isfinite(raw)):
        raise FloatingPointError("non-finite network output")
    p = raw_to_params(raw)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = nll_and_grads(z, p)
    return res.loss, backward_batch(cache, res.d_raw, m), res


def batch_nll(batch: GraphBatch, z: np.ndarray, m: ModelParams, exact: bool = False) -> float:
    """Summed NLL; with ``exact`` an item outside its support makes the total ``inf``."""
    if len(batch) == 0:
        return 0.0
    p = predict_params(batch, m)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        nll, _, _, _, clamped = nll_terms(z, p)
    if exact and np.any(clamped):
        return math.inf
    return math.fsum(nll.tolist())


# --- gradient check ---------------------------------------------------------

def _activation_pattern(cache: dict) -> np.ndarray:
    """Signs of every pre-activation that reaches the output, plus pooling argmax."""
    em, nm = cache["em"], cache["nm"]
    parts = [(cache["P"] > 0)[em].ravel()]
    inc = (INCIDENCE != 0)[None] & em[:, None, :]
    parts.append((cache["logit"] > 0)[inc].ravel())
    for (_, _, e_pre, att, pre) in cache["layers"]:
        parts.append((e_pre > 0)[att > 0].ravel())
        parts.append((pre > 0)[nm].ravel())
    return np.concatenate([p.astype(np.int64) for p in parts] + [cache["arg"].ravel()])


def _preacts(cache: dict) -> np.ndarray:
    """Every pre-activation that reaches the output, flattened in a fixed order."""
    em, nm = cache["em"], cache["nm"]
    inc = (INCIDENCE != 0)[None] & em[:, None, :]
    vals = [cache["P"][em].ravel(), cache["logit"][inc].ravel()]
    for (_, _, e_pre, att, pre) in cache["layers"]:
        vals.append(e_pre[att > 0].ravel())
        vals.append(pre[nm].ravel())
    return np.concatenate(vals)


def _min_moving_preact(c_plus: dict, c_minus: dict) -> float:
    """Smallest |pre-activation| among those the perturbation moves.

    Units that do not move (for example a dead unit whose inputs are all zero)
    cannot bias the central difference, whatever their value.
    """
    a, b = _preacts(c_plus), _preacts(c_minus)
    moving = a != b
    if not moving.any():
        return math.inf
    return float(np.minimum(np.abs(a[moving]), np.abs(b[moving])).min())


def grad_check(m: ModelParams, graph, z, h: float = 1e-5, frac: float | None = None,
               seed=0, kink_tol: float = 1e-7, floor: float = 1e-5):
    """Max relative error between backprop gradients and central differences.

    Coordinates whose perturbation crosses an activation kink, or moves a
    pre-activation to within ``kink_tol`` of one, are skipped. Relative error uses
    ``max(|analytic|, |numeric|, floor * max(1, |loss|))`` as the denominator;
    the floor sits well above central-difference roundoff (about 1e-10 |loss|
    at h = 1e-5) so exactly-zero gradients do not register as failures.
    """
    batch = as_batch(graph)
    z = np.atleast_1d(np.asarray(z, dtype=float))
    loss, grads, res = loss_and_grads(batch, z, m)
    floor = floor * max(1.0, abs(loss))
    if np.any(res.clamped):
        raise ValueError("z must be interior to the predicted support")
    rng = np.random.default_rng(seed)
    worst, checked, skipped = 0.0, 0, 0
    for name in sorted(m.weights):
        W = m.weights[name]
        flat = W.reshape(-1)
        idx = np.arange(flat.size)
        if frac is not None and flat.size > 100:
            idx = rng.choice(flat.size, size=max(1, int(round(frac * flat.size))), replace=False)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            _, c_plus = forward_batch(batch, m, keep_cache=True)
            lp = batch_nll(batch, z, m)
            flat[i] = old - h
            _, c_minus = forward_batch(batch, m, keep_cache=True)
            lm = batch_nll(batch, z, m)
            flat[i] = old
            same = np.array_equal(_activation_pattern(c_plus), _activation_pattern(c_minus))
            if not same or _min_moving_preact(c_plus, c_minus) < kink_tol:
                skipped += 1
                continue
            num = (lp - lm) / (2 * h)
            ana = float(np.asarray(grads[name]).reshape(-1)[i])
            err = abs(ana - num) / max(abs(ana), abs(num), floor)
            worst = max(worst, err)
            checked += 1
    return worst, checked, skipped


# --- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 500
    seed: int = 0
    patience: int = 25
    holdout: float = 0.1
    hidden: int = 32
    d_g: int = 16
    aggregate: str = "center"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")


@dataclass
class TrainedModel:
    params: ModelParams
    tag: str  # "crash" or "non_crash"
    final_nll: float
    epochs: int
    seed: int
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.tag not in ("crash", "non_crash"):
            raise ValueError(f"bad scenario tag {self.tag!r}")

    def predict(self, graphs) -> GevParams:
        return predict_params(graphs, self.params)

    def to_dict(self) -> dict:
        return {"format_version": FORMAT_VERSION, "scenario": self.tag, "seed": self.seed,
                "final_nll": self.final_nll, "epochs": self.epochs,
                "history": [round(v, 10) if math.isfinite(v) else None for v in self.history],
                **self.params.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> TrainedModel:
        if d.get("format_version") != FORMAT_VERSION:
            raise ValueError("unsupported model file version")
        return cls(ModelParams.from_dict(d), d["scenario"], d["final_nll"], d["epochs"],
                   d["seed"], d.get("history", []))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, separators=(",", ":"))

    @classmethod
    def load(cls, path) -> TrainedModel:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def feature_stats(batch: GraphBatch):
    def stats(x, mask):
        sel = x[mask]
        if sel.shape[0] == 0:
            return np.zeros(x.shape[-1]), np.ones(x.shape[-1])
        mu, sd = sel.mean(0), sel.std(0)
        return mu, np.where(sd > 1e-9, sd, 1.0)
    nmu, nsd = stats(batch.nodes, batch.node_mask)
    emu, esd = stats(batch.edges, batch.edge_mask)
    return nmu, nsd, emu, esd


def holdout_split(sample_ids, frac: float, rng) -> np.ndarray:
    """Boolean validation mask choosing whole samples."""
    sample_ids = np.asarray(sample_ids)
    uniq = np.array(sorted(set(sample_ids.tolist())))
    if len(uniq) < 2 or frac <= 0:
        return np.zeros(len(sample_ids), dtype=bool)
    n_val = max(1, int(round(frac * len(uniq))))
    val_ids = set(rng.permutation(uniq)[:n_val].tolist())
    return np.array([s in val_ids for s in sample_ids.tolist()])


def _stationary_raw(z: np.ndarray) -> np.ndarray:
    """Raw head bias of the stationary fit, or a moment match when the fit fails."""
    try:
        p = fit_stationary(z)
        # keep the shape off the saturated ends of tanh so it can still move
        return np.array([math.atanh(min(max(p.xi, -0.99), 0.99)), math.log(p.sigma), p.mu])
    except (ValueError, FitError):
        std = float(np.std(z)) if len(z) > 1 and np.std(z) > 0 else 0.1
        # a slightly negative shape keeps bounded-above data inside the support
        return np.array([math.atanh(-0.1), math.log(std * math.sqrt(6) / math.pi),
                         float(np.mean(z))])


def _init_model(train_b: GraphBatch, z: np.ndarray, cfg: TrainConfig) -> ModelParams:
    m = init_params(cfg.seed, hidden=cfg.hidden, d_g=cfg.d_g, aggregate=cfg.aggregate)
    m.node_mean, m.node_std, m.edge_mean, m.edge_std = feature_stats(train_b)
    # head starts at the stationary fit, so training begins from the SBM baseline
    m.weights["fc_W"] = np.zeros_like(m.weights["fc_W"])
    m.weights["fc_b"] = _stationary_raw(z)
    return m


def train(graphs, z, cfg: TrainConfig | None = None, tag: str = "crash", sample_ids=None,
          ) -> TrainedModel:
    """Mini-batch gradient descent on the summed GEV NLL; returns the best-validation model."""
    cfg = cfg or TrainConfig()
    batch = as_batch(graphs)
    z = np.asarray(z, dtype=float)
    if len(batch) == 0:
        raise ValueError("empty training set")
    if len(z) != len(batch):
        raise ValueError("graphs and z differ in length")
    if sample_ids is None:
        sample_ids = np.arange(len(batch))
    lr = cfg.lr
    for attempt in range(6):
        try:
            return _train_once(batch, z, np.asarray(sample_ids), cfg, tag, lr)
        except FloatingPointError:
            lr /= 2.0
            log.warning("non-finite loss; retrying with lr=%g", lr)
    raise TrainingError("training diverged after 5 learning-rate halvings")


def _train_once(batch, z, sample_ids, cfg, tag, lr) -> TrainedModel:
    rng = np.random.default_rng(cfg.seed)
    val = holdout_split(sample_ids, cfg.holdout, rng)
    tr_idx = np.flatnonzero(~val)
    va_idx = np.flatnonzero(val) if val.any() else tr_idx
    train_b, val_b = batch.take(tr_idx), batch.take(va_idx)
    z_tr, z_va = z[tr_idx], z[va_idx]
    m = _init_model(train_b, z_tr, cfg)

    best = m.copy()
    best_val = batch_nll(val_b, z_va, m, exact=True)
    history = [best_val]
    best_epoch, since = 0, 0
    n = len(tr_idx)
    for epoch in range(1, cfg.max_epochs + 1):
        perm = rng.permutation(n)
        for s in range(0, n, cfg.batch_size):
            bi = perm[s:s + cfg.batch_size]
            loss, grads, _ = loss_and_grads(train_b.take(bi), z_tr[bi], m)
            if not math.isfinite(loss):
                raise FloatingPointError
            for k, gk in grads.items():
                m.weights[k] = m.weights[k] - lr * gk
        v = batch_nll(val_b, z_va, m, exact=True)
        if math.isnan(v):
            raise FloatingPointError
        history.append(v)
        if v < best_val:
            best_val, best, best_epoch, since = v, m.copy(), epoch, 0
        else:
            since += 1
            if since >= cfg.patience:
                break
    return TrainedModel(best, tag, best_val, best_epoch, cfg.seed, history)
