import csv
import io
import json
import os

import numpy as np
import pytest
from scipy import stats as sps

from cyclegan3d.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, main
from cyclegan3d.stats import mos
from cyclegan3d.trainer import TrainLog
from cyclegan3d.voldata import load_volume, save_volume, Volume

from test_stats import reference_table

TINY_MODEL = {"n_down": 2, "base_filters": 2, "n_blocks": 1, "disc_filters": 2}


def tiny_run_config(root, out, epochs=2, **train):
    t = {"epochs": epochs, "decay_start": 1, "lr": 2e-4, "depth_slices": 5, "pool_size": 2,
         "checkpoint_every": 1}
    t.update(train)
    return {"data": {"oct_dir": str(root / "oct"), "confocal_dir": str(root / "confocal")},
            "model": TINY_MODEL, "train": t, "out_dir": str(out), "seed": 0}


def write_json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def trained(tiny_root, tmp_path_factory):
    base = tmp_path_factory.mktemp("cli_run")
    cfg = write_json(base / "run.json", tiny_run_config(tiny_root, base / "out"))
    assert main(["train", "--config", cfg]) == EXIT_OK
    return base / "out"


# ------------------------------------------------------------------ synth

def test_synth_defaults_and_determinism(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "a"), "--n", "1"]) == EXIT_OK
    assert main(["synth", "--out", str(tmp_path / "b"), "--n", "1"]) == EXIT_OK
    v = load_volume(str(tmp_path / "a" / "confocal" / os.listdir(tmp_path / "a" / "confocal")[0]))
    assert v.voxels.shape == (3, 9, 64, 64)
    for sub in ("oct", "confocal"):
        for name in os.listdir(tmp_path / "a" / sub):
            assert (tmp_path / "a" / sub / name).read_bytes() == (tmp_path / "b" / sub / name).read_bytes()
    assert "wrote 1 oct" in capsys.readouterr().out


def test_synth_shape_and_format(tmp_path):
    assert main(["synth", "--out", str(tmp_path), "--n", "1", "--shape", "5x24x32", "--format", "png_stack"]) == 0
    v = load_volume(str(tmp_path / "oct" / os.listdir(tmp_path / "oct")[0]))
    assert v.voxels.shape == (1, 5, 24, 32)
    with pytest.raises(SystemExit) as info:
        main(["synth", "--out", str(tmp_path), "--shape", "9x64"])
    assert info.value.code == EXIT_USAGE


# ------------------------------------------------------------------ train

def test_train_config_errors(tmp_path, tiny_root, capsys):
    doc = tiny_run_config(tiny_root, tmp_path / "o")
    del doc["data"]["oct_dir"]
    assert main(["train", "--config", write_json(tmp_path / "c.json", doc)]) == EXIT_USAGE
    assert "/data/oct_dir" in capsys.readouterr().err
    doc = tiny_run_config(tiny_root, tmp_path / "o")
    doc["train"]["learning_rate"] = 1
    assert main(["train", "--config", write_json(tmp_path / "c.json", doc)]) == EXIT_USAGE
    assert "learning_rate" in capsys.readouterr().err
    doc = tiny_run_config(tiny_root, tmp_path / "o", epochs=3, decay_start=5)
    assert main(["train", "--config", write_json(tmp_path / "c.json", doc)]) == EXIT_USAGE
    (tmp_path / "bad.json").write_text("{")
    assert main(["train", "--config", str(tmp_path / "bad.json")]) == EXIT_USAGE


def test_train_smoke_outputs(trained):
    names = sorted(os.listdir(trained))
    assert {"epoch_0001.v3cg", "epoch_0002.v3cg", "train_log.csv", "epoch_checksums.csv",
            "resolved_config.json"} <= set(names)
    log = TrainLog.read_csv(trained / "train_log.csv")
    assert len(log.records) == 2 * 3


def test_resolved_snapshot_replays_bitwise(trained, tmp_path):
    doc = json.loads((trained / "resolved_config.json").read_text())
    doc["out_dir"] = str(tmp_path / "replay")
    assert main(["train", "--config", write_json(tmp_path / "r.json", doc)]) == EXIT_OK
    for name in ("train_log.csv", "epoch_0002.v3cg"):
        assert (trained / name).read_bytes() == (tmp_path / "replay" / name).read_bytes()


def test_default_schedule_starts_at_base_rate(tiny_root, tmp_path):
    doc = tiny_run_config(tiny_root, tmp_path / "o")
    for k in ("epochs", "decay_start", "lr"):
        del doc["train"][k]
    cfg = write_json(tmp_path / "c.json", doc)
    assert main(["train", "--config", cfg, "--epochs", "400", "--stop-after", "1"]) == EXIT_OK
    log = TrainLog.read_csv(tmp_path / "o" / "train_log.csv")
    assert set(log.column("lr")) == {2e-5}
    assert sorted(p for p in os.listdir(tmp_path / "o") if p.endswith(".v3cg")) == ["epoch_0001.v3cg"]


def test_train_rejects_wrong_modality_dir(tiny_root, tmp_path, capsys):
    doc = tiny_run_config(tiny_root, tmp_path / "o")
    doc["data"]["oct_dir"] = doc["data"]["confocal_dir"]
    assert main(["train", "--config", write_json(tmp_path / "c.json", doc)]) == EXIT_RUNTIME
    assert "expected oct" in capsys.readouterr().err


# -------------------------------------------------------------- translate

def test_translate_channels_and_determinism(trained, tiny_root, tmp_path):
    ck = str(trained / "epoch_0002.v3cg")
    args = ["translate", "--checkpoint", ck, "--input", str(tiny_root / "eval" / "oct")]
    assert main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
    outs = sorted(os.listdir(tmp_path / "a"))
    assert len(outs) == 2
    for name in outs:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        v = load_volume(str(tmp_path / "a" / name))
        assert v.modality == "confocal" and v.voxels.shape == (3, 5, 32, 32)
    back = ["translate", "--checkpoint", ck, "--input", str(tmp_path / "a"), "--out", str(tmp_path / "c"),
            "--direction", "confocal2oct"]
    assert main(back) == EXIT_OK
    assert load_volume(str(tmp_path / "c" / outs[0])).channels == 1


def test_translate_modality_mismatch(trained, tiny_root, tmp_path, capsys):
    rc = main(["translate", "--checkpoint", str(trained / "epoch_0002.v3cg"),
               "--input", str(tiny_root / "eval" / "confocal"), "--out", str(tmp_path)])
    assert rc == EXIT_RUNTIME
    assert "oct2confocal needs a 1-channel oct volume" in capsys.readouterr().err


def test_translate_bad_checkpoint(tiny_root, tmp_path):
    (tmp_path / "x.v3cg").write_bytes(b"nope")
    assert main(["translate", "--checkpoint", str(tmp_path / "x.v3cg"), "--input", str(tiny_root / "oct"),
                 "--out", str(tmp_path / "o")]) == EXIT_RUNTIME


# --------------------------------------------------------------- evaluate

def _rows(text):
    return list(csv.reader(io.StringIO(text)))


def test_evaluate_same_dir_is_zero(tiny_root, capsys):
    d = str(tiny_root / "confocal")
    assert main(["evaluate", "--real", d, "--generated", d, "--dims", "16,32"]) == EXIT_OK
    header, row = _rows(capsys.readouterr().out)
    assert header == ["method", "scenario", "fid16", "fid32", "kid"]
    assert float(row[2]) <= 1e-8 and float(row[3]) <= 1e-8


def test_evaluate_errors(tiny_root, tmp_path, capsys):
    one = tmp_path / "one"
    one.mkdir()
    save_volume(one / "a.vvf", Volume(np.zeros((3, 7, 32, 32), np.float32), "confocal"))
    assert main(["evaluate", "--real", str(tiny_root / "confocal"), "--generated", str(one)]) == EXIT_RUNTIME
    assert ">= 2" in capsys.readouterr().err
    assert main(["evaluate", "--real", str(one), "--generated", str(one), "--embedder", "external"]) == EXIT_USAGE


def test_evaluate_external_features(tiny_root, tmp_path, capsys):
    names = sorted(os.path.splitext(n)[0] for n in os.listdir(tiny_root / "confocal"))
    r = np.random.default_rng(0)
    path = tmp_path / "f.csv"
    with open(path, "w") as f:
        f.write("id,f0,f1,f2\n")
        for side in ("real", "generated"):
            for n in names:
                f.write(f"{side}/{n}," + ",".join(str(v) for v in r.normal(size=3)) + "\n")
    d = str(tiny_root / "confocal")
    rc = main(["evaluate", "--real", d, "--generated", d, "--embedder", "external",
               "--feature-csv", str(path), "--dims", "3", "--out", str(tmp_path / "rep.csv")])
    assert rc == EXIT_OK
    header, row = _rows(capsys.readouterr().out)
    assert header == ["method", "scenario", "fid3", "kid"] and float(row[2]) > 0
    assert _rows((tmp_path / "rep.csv").read_text())[0] == header


def test_evaluate_malformed_png(tiny_root, tmp_path, capsys):
    real = tmp_path / "real"
    real.mkdir()
    for i in range(2):
        save_volume(real / f"s{i}", Volume(np.zeros((1, 3, 8, 8), np.float32), "oct"), "png_stack")
    os.remove(real / "s1" / "slice_002.png")
    assert main(["evaluate", "--real", str(real), "--generated", str(real)]) == EXIT_RUNTIME
    assert "slice_002" in capsys.readouterr().err


# ------------------------------------------------------------------ stats

def _write_scores(path, table):
    with open(path, "w") as f:
        f.write("rater,item,method,scenario,score\n")
        for r in table.records:
            f.write(f"{r.rater},{r.item},{r.method},{r.scenario},{r.score}\n")


def _stats_out(capsys):
    rows = _rows(capsys.readouterr().out)
    assert rows[0] == ["kind", "scenario", "subject", "value", "p_raw", "p_adjusted"]
    return rows[1:]


def test_stats_pvalues_match_scipy(tmp_path, capsys):
    table = reference_table()
    _write_scores(tmp_path / "s.csv", table)
    assert main(["stats", "--scores", str(tmp_path / "s.csv")]) == EXIT_OK
    rows = _stats_out(capsys)
    for scen in ("w_ref", "wo_ref"):
        groups = [table.scores(m, scen) for m in table.methods()]
        kw = next(r for r in rows if r[0] == "kruskal_wallis" and r[1] == scen)
        ref = sps.kruskal(*groups)
        assert float(kw[3]) == pytest.approx(ref.statistic, abs=1e-8)
        assert float(kw[4]) == pytest.approx(ref.pvalue, abs=1e-8)
        mw = [r for r in rows if r[0] == "mann_whitney" and r[1] == scen]
        assert len(mw) == 10
        for r in mw:
            a, b = r[2].split(" vs ")
            ref = sps.mannwhitneyu(table.scores(a, scen), table.scores(b, scen), use_continuity=True,
                                   method="asymptotic")
            assert float(r[4]) == pytest.approx(ref.pvalue, abs=1e-8)
            assert float(r[5]) == pytest.approx(min(1.0, 10 * ref.pvalue), abs=1e-8)


def test_stats_negative_mos_metric(tmp_path, capsys):
    table = reference_table()
    _write_scores(tmp_path / "s.csv", table)
    with open(tmp_path / "m.csv", "w") as f:
        f.write("method,scenario,neg_mos,const\n")
        for (m, s), v in mos(table).items():
            f.write(f"{m},{s},{-v},{v}\n")
    assert main(["stats", "--scores", str(tmp_path / "s.csv"), "--metrics", str(tmp_path / "m.csv")]) == EXIT_OK
    rows = _stats_out(capsys)
    assert float(next(r for r in rows if r[:3] == ["srocc", "all", "neg_mos"])[3]) == -1.0
    assert float(next(r for r in rows if r[:3] == ["lcc", "all", "const"])[3]) == pytest.approx(1.0, abs=1e-12)


def test_stats_errors(tmp_path, capsys):
    p = tmp_path / "s.csv"
    p.write_text("rater,item,method,scenario,score\nr,a,m,s,40\nr,b,m,s,60\n")
    assert main(["stats", "--scores", str(p)]) == EXIT_RUNTIME
    assert "at least 2" in capsys.readouterr().err
    p.write_text("rater,item,method,scenario,score\nr,a,m,s,x\n")
    assert main(["stats", "--scores", str(p)]) == EXIT_RUNTIME


# -------------------------------------------------------------- gradcheck

def test_gradcheck_exit_codes(capsys):
    assert main(["gradcheck"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "FAIL" not in out and "conv3d_fft" in out
    assert main(["gradcheck", "--inject-fault", "tanh"]) == EXIT_RUNTIME
    captured = capsys.readouterr()
    assert "gradient check failed for: tanh" in captured.err
    assert main(["gradcheck", "--inject-fault", "nosuchop"]) == EXIT_RUNTIME
