"""Command-line entry point: ``nsbmgat <command> [options]``.

Commands run one pipeline stage each and share a run directory
(``runs/<config-hash>_seed<seed>`` unless ``--out`` is given)::

    synth -> extract -> train -> calibrate -> evaluate -> report
                                    \\-> predict

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

from . import pipeline as pl
from .gev import FitError
from .model import TrainingError
from .synth import SynthError

log = logging.getLogger("nsbmgat")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
COMMANDS = ("synth", "extract", "train", "calibrate", "predict", "evaluate", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file; command-line flags override it")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--out", help="run directory (default runs/<config-hash>_seed<seed>)")
    common.add_argument("--T", dest="T", type=float, action="append",
                        help="lead time in seconds; repeatable (default: every configured T)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="nsbmgat", description="Non-stationary block-maxima crash-risk pipeline")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    s = sub.add_parser("synth", parents=[common], help="generate a synthetic trajectory dataset")
    s.add_argument("--n-crash", type=int)
    s.add_argument("--n-noncrash", type=int)
    sub.add_parser("extract", parents=[common], help="extreme events and scene graphs per T")
    sub.add_parser("train", parents=[common], help="crash / non-crash models and stationary fits")
    sub.add_parser("calibrate", parents=[common], help="warning threshold M* per T")
    pr = sub.add_parser("predict", parents=[common], help="per-frame risk for one sample")
    pr.add_argument("--input", help="trajectory CSV (default: the run's dataset)")
    pr.add_argument("--sample-id", help="sample to score (required if the CSV holds several)")
    pr.add_argument("--output", help="output CSV (default <run>/predict/<sample>_T<k>.csv)")
    sub.add_parser("evaluate", parents=[common], help="CRPS, AP, AUC and plot data per T")
    sub.add_parser("report", parents=[common], help="summary table across models and T")
    return p


def load_config(args) -> pl.PipelineConfig:
    over = {"seed": args.seed}
    if args.command == "synth":
        over.update(n_crash=args.n_crash, n_noncrash=args.n_noncrash)
    if args.config:
        return pl.PipelineConfig.from_ini(args.config, **over)
    return pl.PipelineConfig(**{k: v for k, v in over.items() if v is not None})


def lead_times(args, cfg: pl.PipelineConfig) -> list[float]:
    if not args.T:
        return list(cfg.lead_times)
    out = []
    for T in args.T:
        T = round(T, 10)
        if T <= 0 or abs(round(T / cfg.tau) * cfg.tau - T) > 1e-9:
            raise UsageError(f"--T {T:g} is not a positive multiple of tau={cfg.tau:g}")
        out.append(T)
    return out


# --- commands -------------------------------------------------------------------

def cmd_synth(cfg, run, Ts, args):
    samples = pl.synth(cfg, run.trajectories)
    n_c = sum(s.is_crash for s in samples)
    print(f"wrote {run.trajectories} ({n_c} crash, {len(samples) - n_c} non-crash samples)")


def cmd_extract(cfg, run, Ts, args):
    samples = pl.load_samples(run.trajectories)
    for T in Ts:
        es = pl.extract(samples, T, cfg)
        pl.write_events(es, T, run, cfg)
        print(f"T={pl.t_label(T)}: {len(es.events)} extreme events -> {run.events(T)}")


def cmd_train(cfg, run, Ts, args):
    for T in Ts:
        es = pl.read_events(T, run)
        mc, mn, sbm = pl.train_models(es, T, cfg)
        pl.save_models(mc, mn, sbm, T, run, cfg)
        print(f"T={pl.t_label(T)}: crash epochs {mc.epochs}, non-crash epochs {mn.epochs}")


def cmd_calibrate(cfg, run, Ts, args):
    samples = pl.load_samples(run.trajectories)
    for T in Ts:
        cal = pl.calibrate(samples, T, pl.load_models(T, run), cfg)
        pl.save_calibration(cal, T, run, cfg)
        print(f"T={pl.t_label(T)}: M* nsbm_gat={cal['nsbm_gat'].m_star:.2f} "
              f"sbm={cal['sbm'].m_star:.2f}")


def cmd_predict(cfg, run, Ts, args):
    if len(Ts) != 1:
        raise UsageError("predict needs exactly one --T")
    T = Ts[0]
    samples = pl.load_samples(args.input or run.trajectories)
    if args.sample_id is not None:
        samples = [s for s in samples if s.sample_id == args.sample_id]
        if not samples:
            raise ValueError(f"sample {args.sample_id!r} not found")
    elif len(samples) != 1:
        raise UsageError("the input holds several samples; pass --sample-id")
    sample = samples[0]
    models = pl.load_models(T, run)
    m_star = pl.load_calibration(T, run)["nsbm_gat"]
    rows = pl.predict_sample(sample, models, m_star, cfg)
    out = Path(args.output) if args.output else \
        run.path("predict", f"{sample.sample_id}_T{pl.t_label(T)}.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        fh.write(f"# config_hash={cfg.hash()} seed={cfg.seed} T={pl.t_label(T)} "
                 f"m_star={m_star:g}\n")
        w = csv.DictWriter(fh, list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.1f}" if k == "t" else
                            f"{v:.10g}" if isinstance(v, float) else int(v) if isinstance(v, bool)
                            else v) for k, v in r.items()})
    print(f"{sum(r['warn'] for r in rows)} of {len(rows)} frames warn -> {out}")


def cmd_evaluate(cfg, run, Ts, args):
    samples = pl.load_samples(run.trajectories)
    results, pps, rocs = {}, {}, {}
    for T in Ts:
        es = pl.read_events(T, run)
        models = pl.load_models(T, run)
        m_star = pl.load_calibration(T, run)
        results[T], pps[T], rocs[T] = pl.evaluate_T(samples, es, T, models, m_star, cfg)
    pl.write_eval(results, pps, rocs, run, cfg)
    print(f"wrote {run.path('eval', 'report.json')}")


def cmd_report(cfg, run, Ts, args):
    rows = pl.summary(run)

    def f(v):
        return "-" if v is None else f"{v:.4f}"
    print(f"{'T':>5} {'model':>9} {'crps':>8} {'ap':>8} {'auc':>8}")
    for r in rows:
        print(f"{r['T']:>5} {r['model']:>9} {f(r['crps']):>8} {f(r['ap']):>8} {f(r['auc']):>8}")
    print(f"wrote {run.path('eval', 'summary.csv')}")


HANDLERS = {name: globals()[f"cmd_{name}"] for name in COMMANDS}


# --- driver -----------------------------------------------------------------------

def _snapshot(root: Path) -> dict:
    if not root.exists():
        return {}
    return {p: p.stat().st_mtime_ns for p in root.rglob("*") if p.is_file()}


def _remove_partial(root: Path, before: dict, extra: Path | None = None) -> None:
    """Delete files the failed command created or modified."""
    after = _snapshot(root)
    for p, mtime in after.items():
        if before.get(p) != mtime:
            p.unlink(missing_ok=True)
    if extra is not None and extra.exists() and not extra.is_relative_to(root):
        extra.unlink()


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise UsageError(f"nsbmgat: a command is required ({', '.join(COMMANDS)})")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args)
        Ts = lead_times(args, cfg)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, FileNotFoundError) as e:
        print(f"nsbmgat: bad configuration: {e}", file=sys.stderr)
        return EXIT_USAGE

    run = pl.RunDir(args.out or Path("runs") / f"{cfg.hash()}_seed{cfg.seed}")
    before = _snapshot(run.root)
    extra = Path(args.output) if getattr(args, "output", None) else None
    t0 = time.perf_counter()
    try:
        HANDLERS[args.command](cfg, run, Ts, args)
    except UsageError as e:
        print(e, file=sys.stderr)
        code = EXIT_USAGE
    except (TrainingError, FitError, FloatingPointError) as e:
        print(f"nsbmgat {args.command}: numerical failure: {e}", file=sys.stderr)
        code = EXIT_NUMERIC
    except (FileNotFoundError, ValueError, KeyError, SynthError, OSError) as e:
        print(f"nsbmgat {args.command}: data error: {e}", file=sys.stderr)
        code = EXIT_DATA
    else:
        log.info("%s finished in %.1f s", args.command, time.perf_counter() - t0)
        return EXIT_OK
    _remove_partial(run.root, before, extra)
    return code


if __name__ == "__main__":
    sys.exit(main())
