import csv
import json
import math

import numpy as np
import pytest

from nsbmgat import cli
from nsbmgat import pipeline as pl
from nsbmgat.model import TrainingError
from nsbmgat.trajectory import frame_mrd

SMALL = """\
[run]
seed = 3
[extract]
lead_times = 1.0
[train]
max_epochs = 60
patience = 10
[synth]
n_crash = 16
n_noncrash = 40
"""


def run_cli(*argv):
    return cli.main([str(a) for a in argv])


def csv_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(line for line in fh if not line.startswith("#")))


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    ini = root / "small.ini"
    ini.write_text(SMALL)
    out = root / "run"
    for cmd in ("synth", "extract", "train", "calibrate", "evaluate", "report"):
        assert run_cli(cmd, "--config", ini, "--out", out) == cli.EXIT_OK, cmd
    return ini, out


def test_config_round_trip(tmp_path):
    cfg = pl.PipelineConfig(seed=4, lead_times=(0.4, 1.0), q_noncrash=None, hidden=8)
    p = tmp_path / "c.ini"
    p.write_text(cfg.to_ini())
    back = pl.PipelineConfig.from_ini(p)
    assert back == cfg and back.hash() == cfg.hash()
    assert pl.PipelineConfig.from_ini(p, seed=9).hash() == cfg.hash()


def test_default_lead_times():
    T = pl.PipelineConfig().lead_times
    assert len(T) == 24 and T[0] == 0.4 and T[-1] == 5.0
    assert all(abs(b - a - 0.2) < 1e-9 for a, b in zip(T, T[1:]))


def test_config_rejects_bad_values(tmp_path):
    with pytest.raises(ValueError):
        pl.PipelineConfig(lead_times=(0.45,))
    p = tmp_path / "bad.ini"
    p.write_text("[train]\nmomentum = 0.9\n")
    with pytest.raises(ValueError):
        pl.PipelineConfig.from_ini(p)


def test_synth_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli("synth", "--n-crash", 2, "--n-noncrash", 6, "--seed", 7, "--out", out) == 0
    ta = (a / "data" / "trajectories.csv").read_bytes()
    assert ta == (b / "data" / "trajectories.csv").read_bytes()
    assert ta.startswith(b"# config_hash=")


def test_run_layout(small_run):
    _, out = small_run
    for rel in ("data/trajectories.csv", "data/events_T1.0.csv", "data/graphs_T1.0.json",
                "models/crash_T1.0.json", "models/non_crash_T1.0.json", "models/sbm_T1.0.json",
                "calib/nsbm_gat_T1.0.json", "calib/sbm_T1.0.json", "eval/report.json",
                "eval/pp.csv", "eval/ap.csv", "eval/roc_T1.0.csv", "eval/summary.csv"):
        assert (out / rel).is_file(), rel


def test_extract_respects_q_filter(small_run):
    _, out = small_run
    rows = csv_rows(out / "data" / "events_T1.0.csv")
    crash = [float(r["z"]) for r in rows if r["label"] == "crash"]
    assert crash and all(-1.0 < z <= 0.0 for z in crash)
    assert all(float(r["z"]) > -3.0 for r in rows if r["label"] == "non_crash")
    assert {r["split"] for r in rows} == {"train", "test"}


def test_report_schema(small_run):
    _, out = small_run
    rep = json.loads((out / "eval" / "report.json").read_text())
    assert set(rep["provenance"]) == {"config_hash", "seed"} and rep["provenance"]["seed"] == 3
    res = rep["lead_times"]["1.0"]
    assert set(res) == set(pl.MODELS)
    for m in pl.MODELS:
        assert set(res[m]) == {"crps", "ap", "auc"}
        assert 0.0 <= res[m]["auc"] <= 1.0 and 0.0 <= res[m]["ap"] <= 1.0
    assert res["nsbm_gat"]["crps"] > 0 and res["sbm"]["crps"] > 0
    assert res["ttc"]["crps"] is None


def test_calibration_file(small_run):
    _, out = small_run
    cal = json.loads((out / "calib" / "nsbm_gat_T1.0.json").read_text())
    assert cal["lead_time"] == 1.0 and 0.0 <= cal["m_star"] <= 2.0
    assert len(cal["v_curve"]) == 41


def test_plot_data_files(small_run):
    _, out = small_run
    pp = csv_rows(out / "eval" / "pp.csv")
    assert {r["model"] for r in pp} == {"nsbm_gat", "sbm"}
    assert all(0 <= float(r["empirical"]) <= 1 and 0 <= float(r["theoretical"]) <= 1 for r in pp)
    roc = csv_rows(out / "eval" / "roc_T1.0.csv")
    assert {r["model"] for r in roc} == set(pl.MODELS)
    assert len(csv_rows(out / "eval" / "ap.csv")) == len(pl.MODELS)


def test_predict_crash_and_free_flow(small_run, tmp_path):
    ini, out = small_run
    samples = pl.load_samples(out / "data" / "trajectories.csv")
    crash = next(s for s in samples if s.is_crash)
    dest = tmp_path / "pred.csv"
    assert run_cli("predict", "--config", ini, "--out", out, "--T", 1.0,
                   "--sample-id", crash.sample_id, "--output", dest) == 0
    rows = csv_rows(dest)
    assert len(rows) == len(crash.frames)
    by_t = {float(r["t"]): r for r in rows}
    # imminent crash: gap below 0.2 m and closing
    imminent = [k for k in crash.ticks if frame_mrd(crash.frames[k], crash.subject_id) < 0.2]
    assert imminent and all(by_t[round(k * 0.1, 1)]["warn"] == "1" for k in imminent)
    for r in rows:
        assert 0.0 <= float(r["M"]) <= 2.0 and abs(float(r["xi_c"])) < 1

    # free flow: move every other vehicle more than 30 m away
    m_star = pl.load_calibration(1.0, pl.RunDir(out))["nsbm_gat"]
    models = pl.load_models(1.0, pl.RunDir(out))
    sample = crash
    for k, frame in sample.frames.items():
        subj = next(v for v in frame if v.vehicle_id == sample.subject_id)
        sample.frames[k] = [v if v.vehicle_id == subj.vehicle_id else
                            type(v)(**{**v.__dict__, "x": subj.x + math.copysign(40.0 + abs(v.x - subj.x),
                                                                           v.x - subj.x or 1.0)})
                            for v in frame]
    free = pl.predict_sample(sample, models, m_star, pl.PipelineConfig.from_ini(ini))
    assert not any(r["warn"] for r in free)


def test_predict_needs_sample_choice(small_run):
    ini, out = small_run
    assert run_cli("predict", "--config", ini, "--out", out, "--T", 1.0) == cli.EXIT_USAGE


def test_report_command_prints_table(small_run, capsys):
    ini, out = small_run
    assert run_cli("report", "--config", ini, "--out", out) == 0
    text = capsys.readouterr().out
    assert "nsbm_gat" in text and "mttc" in text


def test_exit_codes(tmp_path, capsys):
    assert run_cli() == cli.EXIT_USAGE
    assert run_cli("fly") == cli.EXIT_USAGE
    assert run_cli("extract", "--T", 0.45, "--out", tmp_path) == cli.EXIT_USAGE
    assert run_cli("train", "--config", tmp_path / "none.ini") == cli.EXIT_USAGE
    assert run_cli("extract", "--T", 1.0, "--out", tmp_path / "empty") == cli.EXIT_DATA
    assert run_cli("evaluate", "--T", 1.0, "--out", tmp_path / "empty") == cli.EXIT_DATA
    err = capsys.readouterr().err
    assert "missing input" in err


def test_failure_removes_partial_outputs(small_run, tmp_path, monkeypatch):
    ini, out = small_run
    before = sorted(p for p in out.rglob("*") if p.is_file())
    stamp = {p: p.read_bytes() for p in before}

    def failing(cfg, run, Ts, args):
        run.path("models", "partial.json").write_text("{}")
        raise TrainingError("diverged")

    monkeypatch.setitem(cli.HANDLERS, "train", failing)
    assert run_cli("train", "--config", ini, "--out", out) == cli.EXIT_NUMERIC
    assert not (out / "models" / "partial.json").exists()
    after = sorted(p for p in out.rglob("*") if p.is_file())
    assert after == before and all(p.read_bytes() == stamp[p] for p in after)


def test_rerun_is_byte_identical(small_run, tmp_path):
    ini, out = small_run
    other = tmp_path / "again"
    for cmd in ("synth", "extract", "train", "calibrate", "evaluate", "report"):
        assert run_cli(cmd, "--config", ini, "--out", other) == 0
    files = sorted(p.relative_to(out) for p in out.rglob("*") if p.is_file()
                   and p.parent.name != "predict")
    for rel in files:
        assert (out / rel).read_bytes() == (other / rel).read_bytes(), rel


def test_evaluate_merges_lead_times(tmp_path):
    cfg = pl.PipelineConfig(seed=1, n_crash=12, n_noncrash=30, max_epochs=5, lead_times=(0.4, 1.0))
    run = pl.RunDir(tmp_path)
    samples = pl.synth(cfg, run.trajectories)
    pl.run_all(cfg, tmp_path, lead_times=[0.4], samples=samples)
    pl.run_all(cfg, tmp_path, lead_times=[1.0], samples=samples)
    rep = json.loads((tmp_path / "eval" / "report.json").read_text())
    assert list(rep["lead_times"]) == ["0.4", "1.0"]
    ap_rows = csv_rows(tmp_path / "eval" / "ap.csv")
    assert [r["T"] for r in ap_rows] == ["0.4"] * 5 + ["1.0"] * 5
    assert np.isfinite([float(r["ap"]) for r in ap_rows]).all()
