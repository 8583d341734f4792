import json
import os
import subprocess
import sys
import time
from importlib import resources

import jsonschema
import numpy as np
import pandas as pd
import pytest

from sparsefpca.cli import main

HERE = os.path.dirname(os.path.abspath(__file__))
BUNDLED = os.path.join(HERE, "..", "demos", "data", "synthetic20.csv")
SMOKE_CONFIG = {"model": {"K": 2, "Q": 10},
                "sampler": {"n_chains": 2, "n_warmup": 150, "n_samples": 100, "seed": 7}}


def _write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = _write_json(root / "config.json", SMOKE_CONFIG)
    t0 = time.perf_counter()
    code = main(["fit", BUNDLED, "--config", cfg, "--outdir", str(root / "fit")])
    elapsed = time.perf_counter() - t0
    return root, cfg, code, elapsed


def test_smoke_fit_on_bundled_file(fitted):
    root, _, code, elapsed = fitted
    assert code in (0, 4)
    assert elapsed < 120
    out = root / "fit"
    for name in ("effective_config.json", "scaling.json", "convergence.json", "run_manifest.json"):
        assert (out / name).exists(), name
    man = json.loads((out / "run_manifest.json").read_text())
    assert set(man) >= {"config_sha256", "seed", "inputs", "engine_version", "created"}
    eff = json.loads((out / "effective_config.json").read_text())
    assert eff["model"]["alpha"] == 0.1 and eff["sampler"]["mode"] == "blocked-gibbs"


def test_rerun_gives_identical_draw_files(fitted, tmp_path):
    root, cfg, _, _ = fitted
    main(["fit", BUNDLED, "--config", cfg, "--outdir", str(tmp_path / "again")])
    a = sorted(os.listdir(root / "fit" / "draws"))
    assert a == sorted(os.listdir(tmp_path / "again" / "draws"))
    for name in a:
        if name.endswith(".csv"):
            assert (root / "fit" / "draws" / name).read_bytes() == (tmp_path / "again" / "draws" / name).read_bytes()


def test_missing_config_key(tmp_path, capsys):
    cfg = _write_json(tmp_path / "c.json", {"model": {"Q": 8}})
    assert main(["fit", BUNDLED, "--config", cfg, "--outdir", str(tmp_path / "o")]) == 1
    assert "model.K" in capsys.readouterr().err


def test_unknown_config_key(tmp_path, capsys):
    cfg = _write_json(tmp_path / "c.json", {"model": {"K": 1, "Qq": 8}})
    assert main(["fit", BUNDLED, "--config", cfg, "--outdir", str(tmp_path / "o")]) == 1
    assert "Qq" in capsys.readouterr().err


def test_data_errors_exit_2(tmp_path):
    cfg = _write_json(tmp_path / "c.json", {"model": {"K": 1}})
    assert main(["fit", str(tmp_path / "nope.csv"), "--config", cfg, "--outdir", str(tmp_path / "o")]) == 2
    bad = tmp_path / "bad.csv"
    bad.write_text("subject,time,value\n1,0,1\n")
    assert main(["fit", str(bad), "--config", cfg, "--outdir", str(tmp_path / "o")]) == 2


def test_usage_error_exit_1():
    with pytest.raises(SystemExit) as e:
        main(["fit"])
    assert e.value.code == 1


def test_align_and_report(fitted, tmp_path):
    root, _, _, _ = fitted
    draws = str(root / "fit" / "draws")
    assert main(["align", draws, "--outdir", str(tmp_path / "al")]) in (0, 4)
    rot = pd.read_csv(tmp_path / "al" / "aligned_rotations.csv")
    assert list(rot.columns[:2]) == ["chain", "draw"] and len(rot) == 200
    rep = json.loads((tmp_path / "al" / "alignment_report.json").read_text())
    assert rep["reference_source"] == "posterior-mean-svd"
    assert main(["report", draws, "--outdir", str(tmp_path / "rp")]) in (0, 4)
    ve = pd.read_csv(tmp_path / "rp" / "variance_explained.csv")
    assert ve["k"].tolist() == [1, 2]
    fpc = pd.read_csv(tmp_path / "rp" / "fpc_estimate.csv")
    assert set(fpc["variable"]) == {"marker_a", "marker_b"}
    assert fpc["time"].min() >= 0 and fpc["time"].max() <= 24


def test_align_with_reference_file(fitted, tmp_path):
    root, _, _, _ = fitted
    t = np.linspace(0, 24, 9)
    rows = [{"time": x, "variable": v, "k": k, "value": np.sin((k + p) * x / 24 * np.pi)}
            for p, v in enumerate(["marker_a", "marker_b"]) for k in (1, 2) for x in t]
    pd.DataFrame(rows).to_csv(tmp_path / "ref.csv", index=False)
    code = main(["align", str(root / "fit" / "draws"), "--reference", str(tmp_path / "ref.csv"),
                 "--outdir", str(tmp_path / "al")])
    assert code in (0, 4)
    rep = json.loads((tmp_path / "al" / "alignment_report.json").read_text())
    assert rep["reference_source"] == "file:ref.csv"
    pd.DataFrame(rows[:-1]).to_csv(tmp_path / "ref2.csv", index=False)
    assert main(["align", str(root / "fit" / "draws"), "--reference", str(tmp_path / "ref2.csv"),
                 "--outdir", str(tmp_path / "al2")]) == 2


def test_predict_wiring(fitted, tmp_path, caplog):
    root, _, _, _ = fitted
    draws = str(root / "fit" / "draws")
    # empty target list -> empty CSV with header
    assert main(["predict", draws, "--times", "", "--outdir", str(tmp_path / "e")]) == 0
    assert (tmp_path / "e" / "predictions.csv").read_text().strip() == "subject,variable,time,mean,lo95,hi95"
    # duplicates are dropped with a warning
    assert main(["predict", draws, "--times", "3,3,12", "--subjects", "s01", "--outdir", str(tmp_path / "d")]) == 0
    df = pd.read_csv(tmp_path / "d" / "predictions.csv")
    assert sorted(df["time"].unique()) == [3.0, 12.0]
    assert "duplicate" in caplog.text
    # out-of-range times are reported per row and skipped
    assert main(["predict", draws, "--times", "5,30,-1", "--outdir", str(tmp_path / "r")]) == 0
    rej = pd.read_csv(tmp_path / "r" / "rejected_times.csv")
    assert sorted(rej["time"]) == [-1.0, 30.0]
    assert set(pd.read_csv(tmp_path / "r" / "predictions.csv")["time"]) == {5.0}
    assert main(["predict", draws, "--times", "99", "--outdir", str(tmp_path / "all_bad")]) == 2


def test_with_noise_widens_every_interval(fitted, tmp_path):
    # [DERIVED] adding noise draws to every trajectory draw widens each Monte Carlo interval
    root, _, _, _ = fitted
    draws = str(root / "fit" / "draws")
    main(["predict", draws, "--times", "2,10,20", "--outdir", str(tmp_path / "a")])
    main(["predict", draws, "--times", "2,10,20", "--with-noise", "--outdir", str(tmp_path / "b")])
    a = pd.read_csv(tmp_path / "a" / "predictions.csv")
    b = pd.read_csv(tmp_path / "b" / "predictions.csv")
    assert np.all((b["hi95"] - b["lo95"]).to_numpy() > (a["hi95"] - a["lo95"]).to_numpy())


def test_dynamic_predict(fitted, tmp_path):
    root, _, _, _ = fitted
    new = pd.read_csv(BUNDLED)
    new = new[new["subject"].isin(["s03", "s04"])]
    new.to_csv(tmp_path / "new.csv", index=False)
    code = main(["dynamic-predict", str(root / "fit" / "draws"), "--new", str(tmp_path / "new.csv"),
                 "--cutoff", "12", "--horizon", "6", "--outdir", str(tmp_path / "o")])
    assert code == 0
    df = pd.read_csv(tmp_path / "o" / "predictions.csv")
    assert set(df["subject"]) == {"s03", "s04"}
    assert df["time"].max() == pytest.approx(18.0)
    code = main(["dynamic-predict", str(root / "fit" / "draws"), "--new", str(tmp_path / "new.csv"),
                 "--cutoff", "20", "--horizon", "10", "--outdir", str(tmp_path / "o2")])
    assert code == 2


def _scenario(tmp_path):
    return _write_json(tmp_path / "scenario.json",
                       {"kind": "univariate", "K_true": 2, "I": 12, "M_grid": 15, "obs_range": [3, 6],
                        "n_replicates": 2, "seed": 3})


def _engine(tmp_path):
    return _write_json(tmp_path / "engine.json", {"Q": 6, "K": 2, "n_warmup": 20, "n_samples": 20})


def test_simulate_smoke_schema_and_determinism(tmp_path):
    sc, en = _scenario(tmp_path), _engine(tmp_path)
    for name in ("a", "b"):
        assert main(["simulate", sc, "--engine", en, "--outdir", str(tmp_path / name)]) == 0
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    schema = json.loads(resources.files("sparsefpca").joinpath("schemas/study_summary.schema.json").read_text())
    jsonschema.validate(summary, schema)
    for name in ("rise.csv", "coverage.csv", "ise_components.csv", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_timing_mode(tmp_path):
    sc, en = _scenario(tmp_path), _engine(tmp_path)
    assert main(["simulate", sc, "--engine", en, "--timing-sizes", "5,8", "--outdir", str(tmp_path / "t")]) == 0
    t = pd.read_csv(tmp_path / "t" / "timing_study.csv")
    assert t["I"].tolist() == [5, 8] and np.all(t["completed"] == 1)


def test_writes_only_inside_outdir(fitted, tmp_path, monkeypatch):
    root, _, _, _ = fitted
    work = tmp_path / "cwd"
    work.mkdir()
    monkeypatch.chdir(work)
    main(["predict", str(root / "fit" / "draws"), "--times", "4", "--outdir", "out"])
    main(["simulate", _scenario(tmp_path), "--engine", _engine(tmp_path), "--outdir", "sim"])
    assert sorted(os.listdir(work)) == ["out", "sim"]


def test_threads_validation(tmp_path, monkeypatch):
    cfg = _write_json(tmp_path / "c.json", {"model": {"K": 1}})
    assert main(["--threads", "0", "fit", BUNDLED, "--config", cfg, "--outdir", str(tmp_path / "o")]) == 1


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "sparsefpca.cli", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()
