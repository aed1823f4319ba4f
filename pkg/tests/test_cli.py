import csv
import json
import re

import numpy as np
import pytest

from ildvit import cli
from ildvit.model import load_checkpoint, model_forward
from ildvit.wavio import read_wav


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.cfg"
    cfg.write_text("# quick smoke settings\nepochs = 2\nfolds = 2\nprecision = float64\n")
    assert cli.main(["synth", "--out", str(root / "data"), "--subjects-per-class", "3",
                     "--recordings-per-subject", "1", "--config", str(cfg), "--seed", "2"]) == 0
    manifest = root / "data" / "manifest.csv"
    assert cli.main(["train", "--manifest", str(manifest), "--out", str(root / "run"),
                     "--config", str(cfg), "--seed", "1"]) == 0
    return root, cfg, manifest


def test_params_ledger(capsys):
    code, out, _ = run(capsys, "params")
    assert code == 0
    assert re.search(r"^total\s+349506$", out, re.M)
    assert re.search(r"^Patch encoder\s+64x64\s+16448$", out, re.M)
    assert out.count("83200") == 4
    code, out, _ = run(capsys, "params", "--n-blocks", "3", "--seed", "0")
    assert re.search(r"^total\s+266306$", out, re.M) and "note:" in out


def test_train_outputs(workspace):
    root, _, _ = workspace
    names = sorted(p.name for p in (root / "run").iterdir())
    assert names == ["checkpoint.ildv", "config.txt", "history.csv", "split.json", "test_metrics.csv",
                     "test_metrics.json", "test_roc.csv", "test_scores.csv"]
    history = list(csv.DictReader(open(root / "run" / "history.csv")))
    assert [int(r["epoch"]) for r in history] == [1, 2]
    split = json.loads((root / "run" / "split.json").read_text())
    subjects = [{rid.split("_")[0] for rid in split[p]} for p in ("train", "val", "test")]
    assert not (subjects[0] & subjects[1] or subjects[0] & subjects[2] or subjects[1] & subjects[2])
    assert "epochs = 2" in (root / "run" / "config.txt").read_text()
    params, meta = load_checkpoint(root / "run" / "checkpoint.ildv")
    assert meta["run_config"]["seed"] == 1 and params.dtype == np.float64


def test_featurize_reuses_cache(workspace, capsys):
    _, cfg, manifest = workspace
    hashes = []
    for _ in range(2):
        code, out, _ = run(capsys, "featurize", "--manifest", manifest, "--config", cfg, "--seed", 0)
        assert code == 0
        hashes.append(re.search(r"content_sha256=(\w+)", out).group(1))
    assert hashes[0] == hashes[1]
    assert re.search(r"reused=(\d+)", out).group(1) == re.search(r"recordings=(\d+)", out).group(1)


def test_evaluate(workspace, capsys):
    root, cfg, manifest = workspace
    code, out, _ = run(capsys, "evaluate", "--manifest", manifest, "--checkpoint", root / "run/checkpoint.ildv",
                       "--split", root / "run/split.json", "--out", root / "eval", "--config", cfg, "--seed", 0)
    assert code == 0 and "ICBHI=" in out and "misclassification" in out
    assert json.loads((root / "eval/metrics.json").read_text())["n_segments"] > 0
    assert (root / "eval/roc.csv").exists() and (root / "eval/scores.csv").exists()


def test_crossval(workspace, capsys):
    root, cfg, manifest = workspace
    code, out, _ = run(capsys, "crossval", "--manifest", manifest, "--out", root / "cv", "--config", cfg,
                       "--seed", 0, "--epochs", 1)
    assert code == 0 and "mean:" in out
    rows = list(csv.reader(open(root / "cv/crossval.csv")))
    assert [r[0] for r in rows] == ["fold", "1", "2", "mean"]


def test_noise_eval_table(workspace, capsys):
    root, cfg, manifest = workspace
    code, out, _ = run(capsys, "noise-eval", "--manifest", manifest, "--checkpoint", root / "run/checkpoint.ildv",
                       "--split", root / "run/split.json", "--out", root / "noise.csv", "--config", cfg,
                       "--seed", 0)
    assert code == 0
    lines = out.strip().splitlines()
    assert lines[0].split() == ["kind", "SNR", "dB", "Healthy", "ILD", "overall"]
    assert [float(line.split()[1]) for line in lines[1:]] == [-5.0, 0.0, 5.0, 10.0]
    assert len((root / "noise.csv").read_text().splitlines()) == 5


def test_infer_prints_label_and_scores(workspace, capsys):
    root, cfg, _ = workspace
    code, out, _ = run(capsys, "infer", root / "data/I001_r1.wav", "--checkpoint", root / "run/checkpoint.ildv",
                       "--config", cfg, "--seed", 0)
    assert code == 0
    assert re.search(r"^label=(ILD|Healthy) p_healthy=0\.\d{4} p_ild=0\.\d{4} segments=\d+$", out, re.M)


def test_benchmark_command(workspace, capsys):
    root, cfg, _ = workspace
    code, out, _ = run(capsys, "benchmark", "--checkpoint", root / "run/checkpoint.ildv", "--duration", 20,
                       "--out", root / "bench.json", "--config", cfg, "--seed", 0)
    assert code == 0 and "segments=7" in out
    report = json.loads((root / "bench.json").read_text())
    assert report["segments"] == 7 and report["runs"] == 10
    assert report["model_size_bytes"] == (root / "run/checkpoint.ildv").stat().st_size


def test_export_embeddings(workspace, capsys):
    root, cfg, manifest = workspace
    out_csv = root / "emb.csv"
    args = ["export-embeddings", "--manifest", manifest, "--checkpoint", root / "run/checkpoint.ildv",
            "--out", out_csv, "--config", cfg, "--seed", 0]
    assert run(capsys, *args)[0] == 0
    first = out_csv.read_bytes()
    assert run(capsys, *args)[0] == 0
    assert out_csv.read_bytes() == first
    rows = list(csv.reader(open(out_csv)))
    assert rows[0][:4] == ["recording_id", "k", "label", "e0"] and all(len(r) == 67 for r in rows)
    # the exported vector is the forward pass's GAP embedding, bit for bit
    params, _ = load_checkpoint(root / "run/checkpoint.ildv")
    from ildvit.features import build_dataset
    from ildvit.manifest import load_manifest
    from ildvit.config import load_config

    ds = build_dataset(load_manifest(manifest), load_config(cfg), None)
    emb = model_forward(ds.images[:1].astype(np.float64), params).gap_embedding[0]
    assert [float(v) for v in rows[1][3:]] == emb.tolist()


def test_errors_are_one_line_and_nonzero(workspace, capsys, tmp_path):
    root, _, manifest = workspace
    code, _, err = run(capsys, "train", "--bogus")
    assert code == 2 and err.count("\n") == 1 and err.startswith("error: usage:")
    code, _, err = run(capsys, "infer", tmp_path / "missing.wav", "--checkpoint", root / "run/checkpoint.ildv")
    assert code == 1 and err.count("\n") == 1 and err.startswith("error: FileNotFoundError:")
    bad = tmp_path / "bad.cfg"
    bad.write_text("not_a_key = 1\n")
    code, _, err = run(capsys, "params", "--config", bad)
    assert code == 1 and "ConfigError" in err and err.count("\n") == 1


def test_failed_train_leaves_no_partial_output(workspace, capsys, monkeypatch, tmp_path):
    _, cfg, manifest = workspace

    def boom(*_):
        raise OSError("disk full")

    monkeypatch.setattr(cli, "write_history_csv", boom)
    out = tmp_path / "failed"
    code, _, err = run(capsys, "train", "--manifest", manifest, "--out", out, "--config", cfg, "--epochs", 1)
    assert code == 1 and "disk full" in err
    assert list(out.iterdir()) == []


def test_wav_reader_accepts_synth_output(workspace):
    root, _, _ = workspace
    assert read_wav(root / "data/H001_r1.wav").sample_rate_hz == 4000
