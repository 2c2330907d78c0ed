"""End-to-end pipeline stages shared by the CLI and the acceptance tests.

Run layout::

    <run>/data/trajectories.csv
    <run>/data/events_T<k>.csv, graphs_T<k>.json
    <run>/models/crash_T<k>.json, non_crash_T<k>.json, sbm_T<k>.json
    <run>/calib/nsbm_gat_T<k>.json, sbm_T<k>.json
    <run>/eval/report.json, pp.csv, ap.csv, roc_T<k>.csv, summary.csv
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evaluation as ev
from .gev import GevParams, crps_mean, fit_stationary
from .model import TrainConfig, TrainedModel, train
from .risk import ThresholdCalibration, calibrate_threshold, m_grid, risk_values
from .scene_graph import SceneGraph, build_graph
from .synth import SynthConfig, generate_dataset
from .trajectory import TAU, BlockMax, ExtremeEvent, TrajectorySample, block_maxima, \
    compute_mrd, danger_series, filter_and_pool, identify_neighbors, read_csv, tick, write_csv

log = logging.getLogger(__name__)

MODELS = ("nsbm_gat", "sbm", "ttc", "mttc", "drac")
SSMS = ("ttc", "mttc", "drac")


@dataclass
class PipelineConfig:
    seed: int = 0
    tau: float = TAU
    w: float = 0.2
    Q: float = 1.0
    q_noncrash: float | None = 3.0    # None: non-crash extremes are not threshold-filtered
    lead_times: tuple = tuple(round(0.4 + 0.2 * i, 1) for i in range(24))
    test_frac: float = 0.3
    # training
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 25
    holdout: float = 0.1
    hidden: int = 32
    d_g: int = 16
    aggregate: str = "center"
    # risk
    m_step: float = 0.05
    grid_n: int = 200
    # synthetic data
    n_crash: int = 40
    n_noncrash: int = 200
    lanes: int = 3
    sideswipe_frac: float = 0.75

    SECTIONS = {
        "run": ("seed", "test_frac"),
        "extract": ("tau", "w", "Q", "q_noncrash", "lead_times"),
        "train": ("lr", "batch_size", "max_epochs", "patience", "holdout", "hidden", "d_g",
                  "aggregate"),
        "risk": ("m_step", "grid_n"),
        "synth": ("n_crash", "n_noncrash", "lanes", "sideswipe_frac"),
    }

    def __post_init__(self):
        self.lead_times = tuple(round(float(T), 10) for T in self.lead_times)
        for T in self.lead_times:
            if abs(round(T / self.tau) * self.tau - T) > 1e-9:
                raise ValueError(f"lead time {T} is not a multiple of tau")
        if not self.Q > 0:
            raise ValueError("Q must be positive")
        if self.aggregate not in ("center", "neighbor"):
            raise ValueError("aggregate must be 'center' or 'neighbor'")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["lead_times"] = list(self.lead_times)
        return d

    def hash(self) -> str:
        """Stable digest of every setting except the seed."""
        d = self.to_dict()
        d.pop("seed")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def provenance(self) -> dict:
        return {"config_hash": self.hash(), "seed": self.seed}

    def train_config(self, tag: str) -> TrainConfig:
        return TrainConfig(lr=self.lr, batch_size=self.batch_size, max_epochs=self.max_epochs,
                           seed=self.seed * 2 + (tag == "non_crash"), patience=self.patience,
                           holdout=self.holdout, hidden=self.hidden, d_g=self.d_g,
                           aggregate=self.aggregate)

    def synth_config(self) -> SynthConfig:
        f = self.sideswipe_frac
        return SynthConfig(n_crash=self.n_crash, n_noncrash=self.n_noncrash, lanes=self.lanes,
                           crash_mix={"rear_end": 1.0 - f, "sideswipe": f}, seed=self.seed)

    @classmethod
    def from_ini(cls, path, **overrides) -> PipelineConfig:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        if not cp.read(path):
            raise FileNotFoundError(f"config file not found: {path}")
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        known = {k for keys in cls.SECTIONS.values() for k in keys}
        kw = {}
        for sec in cp.sections():
            for key, raw in cp.items(sec):
                if key not in known:
                    raise ValueError(f"unknown config key [{sec}] {key}")
                kw[key] = _parse_value(key, raw, types[key])
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)

    def to_ini(self) -> str:
        lines = []
        for sec, keys in self.SECTIONS.items():
            lines.append(f"[{sec}]")
            for k in keys:
                v = getattr(self, k)
                if k == "lead_times":
                    v = ", ".join(f"{T:g}" for T in v)
                elif v is None:
                    v = "none"
                lines.append(f"{k} = {v}")
            lines.append("")
        return "\n".join(lines)


def _parse_value(key, raw: str, typ):
    raw = raw.strip()
    if key == "lead_times":
        return tuple(float(s) for s in raw.replace(",", " ").split())
    if key == "q_noncrash":
        return None if raw.lower() in ("", "none") else float(raw)
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return raw


def t_label(T: float) -> str:
    return f"{T:.1f}"


class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    def path(self, kind: str, name: str) -> Path:
        return self.root / kind / name

    @property
    def trajectories(self) -> Path:
        return self.path("data", "trajectories.csv")

    def events(self, T) -> Path:
        return self.path("data", f"events_T{t_label(T)}.csv")

    def graphs(self, T) -> Path:
        return self.path("data", f"graphs_T{t_label(T)}.json")

    def model(self, tag, T) -> Path:
        return self.path("models", f"{tag}_T{t_label(T)}.json")

    def calib(self, name, T) -> Path:
        return self.path("calib", f"{name}_T{t_label(T)}.json")


def _mkparent(p: Path) -> Path:
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _write_json(obj, path: Path) -> None:
    with open(_mkparent(path), "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path: Path):
    if not Path(path).exists():
        raise FileNotFoundError(f"missing input: {path}")
    with open(path) as fh:
        return json.load(fh)


# --- data -------------------------------------------------------------------

def synth(cfg: PipelineConfig, out: Path) -> list[TrajectorySample]:
    samples = generate_dataset(cfg.synth_config())
    write_csv(samples, _mkparent(out),
              comment=f"config_hash={cfg.hash()} seed={cfg.seed}")
    return samples


def load_samples(path) -> list[TrajectorySample]:
    if not Path(path).exists():
        raise FileNotFoundError(f"missing input: {path}")
    return read_csv(path)


def split_samples(samples, test_frac: float, seed) -> set[str]:
    """Seeded per-label test split by sample id."""
    rng = np.random.default_rng([seed, 7])
    test = set()
    for label in ("crash", "non_crash"):
        ids = sorted(s.sample_id for s in samples if s.label == label)
        n = int(round(test_frac * len(ids)))
        test.update(np.array(ids)[rng.permutation(len(ids))[:n]].tolist() if ids else [])
    return test


@dataclass
class FrameRecord:
    sample_id: str
    t: float
    z: float
    graph: SceneGraph
    ssm: dict


def frame_record(sample: TrajectorySample, k: int, tau: float = TAU) -> FrameRecord:
    frame = sample.frames[k]
    nb = identify_neighbors(frame, sample.subject_id)
    by_id = {v.vehicle_id: v for v in frame}
    subj = by_id[sample.subject_id]
    z = -compute_mrd(subj, [by_id[i] for i in nb.ids()])
    t = round(k * tau, 10)
    g = build_graph(frame, sample.subject_id, nb, sample.sample_id, t)
    lead = by_id.get(nb.get("lead_same"))
    return FrameRecord(sample.sample_id, t, z, g, ev.ssm_risk(subj, lead))


def noncrash_starts(sample: TrajectorySample, T: float, tau: float = TAU) -> list[float]:
    """Consecutive, non-overlapping lead-time windows covering a non-crash sample."""
    ks = sample.ticks
    n = int(round(T / tau))
    out, k = [], ks[0]
    while k + n <= ks[-1]:
        out.append(round(k * tau, 10))
        k += n + 1
    return out


def sample_extremes(sample: TrajectorySample, T: float, cfg: PipelineConfig) -> list[BlockMax]:
    if sample.is_crash:
        ts, xs = danger_series(sample, T, tau=cfg.tau)
        return block_maxima(ts, xs, cfg.w, cfg.tau)
    out = []
    for start in noncrash_starts(sample, T, cfg.tau):
        ts, xs = danger_series(sample, T, start=start, tau=cfg.tau)
        out.extend(block_maxima(ts, xs, cfg.w, cfg.tau))
    # keep block indices unique within the sample
    return [BlockMax(b.t, b.z, i) for i, b in enumerate(out)]


@dataclass
class EventSet:
    events: list[ExtremeEvent]
    labels: list[str]
    splits: list[str]
    graphs: list[SceneGraph] = field(default_factory=list)

    def select(self, label: str, split: str):
        idx = [i for i, (lb, sp) in enumerate(zip(self.labels, self.splits))
               if lb == label and sp == split]
        return ([self.events[i] for i in idx], [self.graphs[i] for i in idx])


def extract(samples, T: float, cfg: PipelineConfig) -> EventSet:
    test = split_samples(samples, cfg.test_frac, cfg.seed)
    by_id = {s.sample_id: s for s in samples}
    events, labels, splits, graphs = [], [], [], []
    for label, q in (("crash", cfg.Q), ("non_crash", cfg.q_noncrash)):
        maxima = {s.sample_id: sample_extremes(s, T, cfg)
                  for s in samples if s.label == label}
        for e in filter_and_pool(maxima, q):
            s = by_id[e.sample_id]
            events.append(e)
            labels.append(label)
            splits.append("test" if e.sample_id in test else "train")
            graphs.append(frame_record(s, tick(e.t, cfg.tau), cfg.tau).graph)
    return EventSet(events, labels, splits, graphs)


def write_events(es: EventSet, T: float, run: RunDir, cfg: PipelineConfig) -> None:
    with open(_mkparent(run.events(T)), "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.hash()} seed={cfg.seed} T={t_label(T)}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "label", "sample_id", "t", "z", "block_index"])
        for e, lb, sp in zip(es.events, es.labels, es.splits):
            w.writerow([sp, lb, e.sample_id, f"{e.t:.1f}", repr(float(e.z)), e.block_index])
    _write_json({"provenance": cfg.provenance(), "lead_time": T,
                 "graphs": [g.to_dict() for g in es.graphs]}, run.graphs(T))


def read_events(T: float, run: RunDir) -> EventSet:
    path = run.events(T)
    if not path.exists():
        raise FileNotFoundError(f"missing input: {path}")
    events, labels, splits = [], [], []
    with open(path, newline="") as fh:
        rows = csv.DictReader(line for line in fh if not line.startswith("#"))
        for r in rows:
            events.append(ExtremeEvent(r["sample_id"], float(r["t"]), float(r["z"]),
                                       int(r["block_index"])))
            labels.append(r["label"])
            splits.append(r["split"])
    graphs = [SceneGraph.from_dict(d) for d in _read_json(run.graphs(T))["graphs"]]
    if len(graphs) != len(events):
        raise ValueError("events and graphs files disagree in length")
    return EventSet(events, labels, splits, graphs)


# --- training ---------------------------------------------------------------

def train_models(es: EventSet, T: float, cfg: PipelineConfig):
    """Crash and non-crash graph-attention models plus the two stationary fits."""
    out = {}
    sbm = {}
    for tag in ("crash", "non_crash"):
        evs, gs = es.select(tag, "train")
        if len(evs) < 10:
            raise ValueError(f"too few {tag} training extremes at T={t_label(T)} ({len(evs)})")
        z = np.array([e.z for e in evs])
        out[tag] = train(gs, z, cfg.train_config(tag), tag, [e.sample_id for e in evs])
        sbm[tag] = fit_stationary(z)
    return out["crash"], out["non_crash"], sbm


def save_models(mc: TrainedModel, mn: TrainedModel, sbm: dict, T: float, run: RunDir,
                cfg: PipelineConfig) -> None:
    for m in (mc, mn):
        d = m.to_dict()
        d["provenance"] = cfg.provenance()
        d["lead_time"] = T
        with open(_mkparent(run.model(m.tag, T)), "w") as fh:
            json.dump(d, fh, separators=(",", ":"), sort_keys=True)
            fh.write("\n")
    _write_json({"provenance": cfg.provenance(), "lead_time": T,
                 **{k: v.to_dict() for k, v in sbm.items()}}, run.model("sbm", T))


def load_models(T: float, run: RunDir):
    mc = TrainedModel.from_dict(_read_json(run.model("crash", T)))
    mn = TrainedModel.from_dict(_read_json(run.model("non_crash", T)))
    d = _read_json(run.model("sbm", T))
    return mc, mn, {k: GevParams.from_dict(d[k]) for k in ("crash", "non_crash")}


# --- scoring ----------------------------------------------------------------

def window_records(sample: TrajectorySample, T: float, cfg: PipelineConfig) -> list[FrameRecord]:
    """Frames of the crash window ``[-T, 0]`` or of a whole non-crash sample."""
    if sample.is_crash:
        n = int(round(T / cfg.tau))
        ks = range(-n, 1)
    else:
        ks = sample.ticks
    return [frame_record(sample, k, cfg.tau) for k in ks]


def score_records(recs: list[FrameRecord], mc, mn, sbm, cfg: PipelineConfig) -> dict:
    """Per-frame risk scores for every model name (larger is riskier)."""
    if not recs:
        return {m: np.zeros(0) for m in MODELS}
    z = np.array([r.z for r in recs])
    pc, pn = mc.predict([r.graph for r in recs]), mn.predict([r.graph for r in recs])
    out = {"nsbm_gat": risk_values(z, pc, pn, cfg.grid_n, cfg.Q),
           "sbm": risk_values(z, sbm["crash"], sbm["non_crash"], cfg.grid_n, cfg.Q)}
    for s in SSMS:
        out[s] = np.array([r.ssm[s] for r in recs])
    return out


@dataclass
class ScoredSplit:
    case_series: dict      # sample_id -> {model: array over [-T, 0]}
    control_pool: dict     # model -> array over all non-crash frames


def score_split(samples, split_ids: set, T: float, models, cfg: PipelineConfig) -> ScoredSplit:
    mc, mn, sbm = models
    cases, pool_recs = {}, []
    for s in samples:
        if s.sample_id not in split_ids:
            continue
        recs = window_records(s, T, cfg)
        if s.is_crash:
            cases[s.sample_id] = score_records(recs, mc, mn, sbm, cfg)
        else:
            pool_recs.extend(recs)
    pool = score_records(pool_recs, mc, mn, sbm, cfg)
    return ScoredSplit(cases, pool)


def _split_ids(samples, cfg: PipelineConfig, split: str) -> set:
    test = split_samples(samples, cfg.test_frac, cfg.seed)
    ids = {s.sample_id for s in samples}
    return test if split == "test" else ids - test


def calibrate(samples, T: float, models, cfg: PipelineConfig) -> dict[str, ThresholdCalibration]:
    """M* for both GEV-based scorers from training-split frames at 1:5 case:control."""
    sc = score_split(samples, _split_ids(samples, cfg, "train"), T, models, cfg)
    out = {}
    for name in ("nsbm_gat", "sbm"):
        crash_M = np.concatenate([sc.case_series[sid][name] for sid in sorted(sc.case_series)])
        ctrl = ev.sample_controls(sc.control_pool[name], len(crash_M), [cfg.seed, 11])
        out[name] = calibrate_threshold(crash_M, sc.control_pool[name][ctrl],
                                        m_grid(cfg.m_step), lead_time=T)
    return out


def save_calibration(cal: dict, T: float, run: RunDir, cfg: PipelineConfig) -> None:
    for name, c in cal.items():
        _write_json({"provenance": cfg.provenance(), **c.to_dict()}, run.calib(name, T))


def load_calibration(T: float, run: RunDir) -> dict[str, float]:
    return {name: float(_read_json(run.calib(name, T))["m_star"]) for name in ("nsbm_gat", "sbm")}


def evaluate_T(samples, es: EventSet, T: float, models, m_star: dict, cfg: PipelineConfig):
    """Metrics for one lead time: CRPS on held-out crash extremes, AP, AUC and ROC points."""
    mc, mn, sbm = models
    evs, gs = es.select("crash", "test")
    z = np.array([e.z for e in evs])
    res = {m: {"crps": None, "ap": None, "auc": None} for m in MODELS}
    pp = []
    if len(evs):
        p_gat = mc.predict(gs)
        n = len(z)
        p_sbm = GevParams(np.full(n, sbm["crash"].xi), np.full(n, sbm["crash"].sigma),
                          np.full(n, sbm["crash"].mu))
        res["nsbm_gat"]["crps"] = crps_mean(p_gat, z)
        res["sbm"]["crps"] = crps_mean(p_sbm, z)
        for name, p in (("nsbm_gat", p_gat), ("sbm", p_sbm)):
            pp.extend((name, e, u) for e, u in ev.pp_points(z, p))
    sc = score_split(samples, _split_ids(samples, cfg, "test"), T, models, cfg)
    case_ids = sorted(sc.case_series)
    roc = {}
    if case_ids:
        first = {m: np.array([sc.case_series[sid][m][0] for sid in case_ids]) for m in MODELS}
        ctrl = ev.sample_controls(sc.control_pool["sbm"], len(case_ids), [cfg.seed, 13])
        for m in MODELS:
            pts, auc = ev.roc_auc(first[m], sc.control_pool[m][ctrl])
            res[m]["auc"] = auc
            roc[m] = pts
            if m in SSMS:
                per = {sid: [ev.ssm_warns(m, v) for v in sc.case_series[sid][m]]
                       for sid in case_ids}
                res[m]["ap"] = ev.ap(per, 0.5, T, cfg.tau)
            else:
                per = {sid: sc.case_series[sid][m] for sid in case_ids}
                res[m]["ap"] = ev.ap(per, m_star[m], T, cfg.tau)
    return res, pp, roc


def _merge_rows(path: Path, head: str, header: list, rows: list, replaced: set) -> None:
    """Rewrite a T-keyed CSV, keeping rows for other lead times from the same run config."""
    kept = []
    if path.exists():
        with open(path, newline="") as fh:
            lines = fh.read().splitlines()
        if lines and lines[0] + "\n" == head:
            for row in csv.DictReader(lines[1:]):
                if row["T"] not in replaced:
                    kept.append([row[h] for h in header])
    out = sorted(kept + rows, key=lambda r: (float(r[0]), MODELS.index(r[1])))
    with open(_mkparent(path), "w", newline="") as fh:
        fh.write(head)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(out)


def write_eval(results: dict, pps: dict, rocs: dict, run: RunDir, cfg: PipelineConfig) -> None:
    """Write ``report.json``, ``pp.csv``, ``ap.csv`` and ``roc_T<k>.csv``.

    Lead times evaluated earlier under the same configuration and seed are kept.
    """
    def r(x):
        return None if x is None else round(float(x), 12)
    report_path = run.path("eval", "report.json")
    merged = {}
    if report_path.exists():
        old = _read_json(report_path)
        if old.get("provenance") == cfg.provenance():
            merged = old["lead_times"]
    for T, res in results.items():
        merged[t_label(T)] = {m: {k: r(v) for k, v in res[m].items()} for m in res}
    merged = dict(sorted(merged.items(), key=lambda kv: float(kv[0])))
    _write_json({"provenance": cfg.provenance(), "lead_times": merged}, report_path)

    head = f"# config_hash={cfg.hash()} seed={cfg.seed}\n"
    done = {t_label(T) for T in results}
    pp_rows = [[t_label(T), m, f"{e:.10f}", f"{u:.10f}"] for T in sorted(pps) for m, e, u in pps[T]]
    _merge_rows(run.path("eval", "pp.csv"), head, ["T", "model", "empirical", "theoretical"],
                pp_rows, done)
    ap_rows = [[t_label(T), m, "" if results[T][m]["ap"] is None else f"{results[T][m]['ap']:.10f}"]
               for T in sorted(results) for m in MODELS]
    _merge_rows(run.path("eval", "ap.csv"), head, ["T", "model", "ap"], ap_rows, done)
    for T, curves in rocs.items():
        with open(run.path("eval", f"roc_T{t_label(T)}.csv"), "w", newline="") as fh:
            fh.write(head)
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["model", "fpr", "tpr"])
            for m in MODELS:
                for f, t in curves.get(m, []):
                    w.writerow([m, f"{f:.10f}", f"{t:.10f}"])


def summary(run: RunDir) -> list[dict]:
    rep = _read_json(run.path("eval", "report.json"))
    rows = []
    for T, res in rep["lead_times"].items():
        for m in MODELS:
            rows.append({"T": T, "model": m, **res[m]})
    with open(_mkparent(run.path("eval", "summary.csv")), "w", newline="") as fh:
        prov = rep["provenance"]
        fh.write(f"# config_hash={prov['config_hash']} seed={prov['seed']}\n")
        w = csv.DictWriter(fh, ["T", "model", "crps", "ap", "auc"], lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if v is None else (f"{v:.6f}" if isinstance(v, float) else v))
                        for k, v in row.items()})
    return rows


def predict_sample(sample: TrajectorySample, models, m_star: float, cfg: PipelineConfig):
    """Per-frame risk rows for every frame of one sample."""
    mc, mn, _ = models
    recs = [frame_record(sample, k, cfg.tau) for k in sample.ticks]
    z = np.array([r.z for r in recs])
    pc, pn = mc.predict([r.graph for r in recs]), mn.predict([r.graph for r in recs])
    M = risk_values(z, pc, pn, cfg.grid_n, cfg.Q)
    rows = []
    for i, r in enumerate(recs):
        rows.append({"t": r.t, "current_z": z[i], "M": float(M[i]), "warn": bool(M[i] >= m_star),
                     "xi_c": float(pc.xi[i]), "sigma_c": float(pc.sigma[i]), "mu_c": float(pc.mu[i]),
                     "xi_n": float(pn.xi[i]), "sigma_n": float(pn.sigma[i]),
                     "mu_n": float(pn.mu[i])})
    return rows


def run_all(cfg: PipelineConfig, root, lead_times=None, samples=None) -> dict:
    """synth -> extract -> train -> calibrate -> evaluate -> report, in one call."""
    run = RunDir(root)
    if samples is None:
        samples = synth(cfg, run.trajectories)
    results, pps, rocs = {}, {}, {}
    for T in lead_times or cfg.lead_times:
        es = extract(samples, T, cfg)
        write_events(es, T, run, cfg)
        models = train_models(es, T, cfg)
        save_models(*models, T, run, cfg)
        cal = calibrate(samples, T, models, cfg)
        save_calibration(cal, T, run, cfg)
        m_star = {k: c.m_star for k, c in cal.items()}
        results[T], pps[T], rocs[T] = evaluate_T(samples, es, T, models, m_star, cfg)
    write_eval(results, pps, rocs, run, cfg)
    summary(run)
    return results

