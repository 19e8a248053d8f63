import csv
import sys
from pathlib import Path

import numpy as np
import pytest

from uconv import checks, cli
from uconv.frontend import write_feat
from uconv.model import PRESETS, build, load, parameter_vector

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "scripts"))
from make_toy_data import make  # noqa: E402


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("toy")
    data = make(root / "data", utterances=2, seconds=0.5, labels=3)
    ckpt = root / "model.ckpt"
    code = cli.main(["train-toy", "--config", "toy", "--data", str(data), "--steps", "100",
                     "--out", str(ckpt)])
    return code, data, ckpt


def test_describe_preset(capsys):
    code, out, _ = run(capsys, "describe", "--config", "uconv-d16-f8-v1", "--frames", 2998)
    assert code == 0
    assert "24,601,793 params" in out
    assert "stage lengths: [750,375,188,375]" in out
    assert "policy: x4-x8-x16-x8  layers: 3-3-3-3" in out


def test_describe_config_file(tmp_path, capsys):
    path = tmp_path / "m.cfg"
    path.write_text("preset=toy\nlayers=2-1-1-2\n")
    code, out, _ = run(capsys, "describe", "--config", path)
    assert code == 0 and "layers: 2-1-1-2" in out


def test_usage_and_validation_errors(tmp_path, capsys):
    assert run(capsys, "describe", "--config", "toy", "--bogus")[0] == 1
    assert run(capsys, "frobnicate")[0] == 1
    assert run(capsys, "describe", "--help")[0] == 0
    bad = tmp_path / "bad.cfg"
    bad.write_text("heads=4\npolicy=x4-x16\n")
    code, _, err = run(capsys, "describe", "--config", bad)
    assert code == 2 and "line 2" in err
    assert run(capsys, "describe", "--config", tmp_path / "none.cfg")[0] == 3


def test_train_toy_overfits_and_decodes(trained, capsys):
    code, data, ckpt = trained
    assert code == 0
    trace = list(csv.DictReader(open(str(ckpt) + ".loss.csv")))
    assert len(trace) == 100 and all(np.isfinite(float(r["loss"])) for r in trace)
    for i in range(2):
        expected = (data / f"utt{i}.txt").read_text().split()
        code, out, _ = run(capsys, "decode", "--model", ckpt, "--input", data / f"utt{i}.feat",
                           "--vocab", data / "vocab.txt")
        assert code == 0
        assert out.strip() == "".join(expected).replace("▁", " ").strip()
        greedy = run(capsys, "decode", "--model", ckpt, "--input", data / f"utt{i}.feat",
                     "--vocab", data / "vocab.txt", "--beam", 1)[1]
        assert greedy == out


def test_decode_silence_and_vocab_mismatch(trained, tmp_path, capsys):
    _, data, ckpt = trained
    silence = tmp_path / "z.feat"
    write_feat(silence, np.zeros((60, 80)))
    first = run(capsys, "decode", "--model", ckpt, "--input", silence, "--vocab", data / "vocab.txt")
    assert first[0] == 0
    assert run(capsys, "decode", "--model", ckpt, "--input", silence, "--vocab", data / "vocab.txt") == first
    small = tmp_path / "v.txt"
    small.write_text("a\nb\n")
    code, _, err = run(capsys, "decode", "--model", ckpt, "--input", silence, "--vocab", small)
    assert code == 2 and "vocabulary" in err


def test_train_zero_steps_and_missing_manifest(tmp_path, capsys):
    data = make(tmp_path / "d", utterances=1, seconds=0.5, labels=2)
    ckpt = tmp_path / "init.ckpt"
    code, _, _ = run(capsys, "train-toy", "--config", "toy", "--data", data, "--steps", 0, "--out", ckpt)
    assert code == 0
    assert parameter_vector(load(ckpt)).tobytes() == parameter_vector(build(PRESETS["toy"], 42)).tobytes()
    code, _, err = run(capsys, "train-toy", "--config", "toy", "--data", tmp_path / "nope", "--steps", 1,
                       "--out", tmp_path / "x.ckpt")
    assert code == 3 and "manifest" in err


def test_train_reports_infeasible(tmp_path, capsys):
    data = make(tmp_path / "d", utterances=2, seconds=0.5, labels=2)
    (data / "utt1.txt").write_text(" ".join(["b"] * 30) + "\n")
    code, _, err = run(capsys, "train-toy", "--config", "toy", "--data", data, "--steps", 1,
                       "--out", tmp_path / "m.ckpt")
    assert code == 0 and "dropped 1 of 2" in err


def test_bench_writes_csv(tmp_path, capsys):
    out = tmp_path / "r.csv"
    code, stdout, _ = run(capsys, "bench", "--baseline", "toy", "--candidate", "toy", "--seconds", 1,
                          "--repeats", 5, "--warmup", 1, "--out", out)
    assert code == 0 and "| model |" in stdout
    rows = list(csv.DictReader(open(out)))
    assert [r["model"] for r in rows] == ["toy", "toy"]
    assert run(capsys, "bench", "--baseline", "toy", "--candidate", "toy", "--threads", 2)[0] == 2
    assert run(capsys, "bench", "--baseline", "toy", "--candidate", "toy", "--repeats", 3)[0] == 2


def test_check_suites(capsys, monkeypatch):
    code, out, _ = run(capsys, "check", "--suite", "lengths")
    assert code == 0 and "[PASS] stage lengths x4-x8-x16-x8 T=2998" in out
    monkeypatch.setitem(checks.SUITES, "lengths", lambda: [checks.CheckResult("broken", False, "x")])
    code, out, err = run(capsys, "check", "--suite", "lengths")
    assert code == 2 and "[FAIL] broken" in out and "broken" in err
    assert run(capsys, "check", "--suite", "nonsense")[0] == 1
