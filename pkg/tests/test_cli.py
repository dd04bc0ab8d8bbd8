from __future__ import annotations

import json

import pytest

from hgtree.cli import EXIT_CODES, main
from hgtree.dataset import file_sha256, read_jsonl
from hgtree.errors import UsageError

SMALL = ["--set", "train.n_max=40", "--set", "model.context=336", "--set", "model.heads=2"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A tiny corpus, quantizer and one-step checkpoint shared by the command tests."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--profile", "sapling", "--seed", "1", "--count", "6", "--out", str(d / "c.jsonl")]) == 0
    assert main(["fit-quantizer", "--corpus", str(d / "c.jsonl"), "--out", str(d / "q.txt")]) == 0
    rc = main(["train", "--corpus", str(d / "c.jsonl"), "--quantizer", str(d / "q.txt"), "--out-dir", str(d / "run"),
               "--dim", "16", "--layers", "6", "--epochs", "2", "--warmup-epochs", "1", "--batch-size", "3",
               "--max-steps", "2", *SMALL])
    assert rc == 0
    return d


def test_gen_data_is_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["gen-data", "--seed", "7", "--count", "3", "--out", str(tmp_path / f"{name}.jsonl")]) == 0
    assert file_sha256(tmp_path / "a.jsonl") == file_sha256(tmp_path / "b.jsonl")
    man = json.loads((tmp_path / "a.jsonl.manifest.json").read_text())
    assert man["command"] == "gen-data" and len(man["seeds"]) == 3
    assert man["outputs"][str(tmp_path / "a.jsonl")] == file_sha256(tmp_path / "a.jsonl")


def test_train_outputs(workdir):
    run = workdir / "run"
    for name in ("model.bin", "metrics.csv", "loss.png", "manifest.json"):
        assert (run / name).exists(), name
    man = json.loads((run / "manifest.json").read_text())
    assert man["steps"] == 2 and man["config"]["model"]["dim"] == 16


def test_sample_and_eval(workdir):
    out = workdir / "s.jsonl"
    rc = main(["sample", "--checkpoint", str(workdir / "run" / "model.bin"), "--n", "2", "--out", str(out),
               "--max-new-tokens", "48", "--seed", "3"])
    assert rc == 0
    first = out.read_bytes()
    assert main(["sample", "--checkpoint", str(workdir / "run" / "model.bin"), "--n", "2", "--out", str(out),
                 "--max-new-tokens", "48", "--seed", "3"]) == 0
    assert out.read_bytes() == first
    assert out.with_suffix(".csv").exists() and out.with_suffix(".png").exists()
    ev = workdir / "ev"
    rc = main(["eval", "--gen", str(out), "--ref", str(workdir / "c.jsonl"), "--train", str(workdir / "c.jsonl"),
               "--quantizer", str(workdir / "q.txt"), "--points", "64", "--expected", "2", "--out-dir", str(ev)])
    assert rc == 0
    rows = dict(line.split(",", 1) for line in (ev / "eval.csv").read_text().splitlines()[1:])
    assert {"connect", "mmd_cd", "cov_cd", "jsd", "novel", "unique"} <= set(rows)
    assert (ev / "eval.png").exists() and (ev / "manifest.json").exists()


def test_complete_and_mesh(workdir, tmp_path):
    out = tmp_path / "c.jsonl"
    rc = main(["complete", "--checkpoint", str(workdir / "run" / "model.bin"), "--prompt", str(workdir / "c.jsonl"),
               "--keep", "2", "--out", str(out), "--max-new-tokens", "16", "--mesh-dir", str(tmp_path / "m")])
    assert rc == 0 and len(read_jsonl(out)) == 1
    assert list((tmp_path / "m").glob("*.obj"))
    assert main(["export-mesh", "--tree", str(workdir / "c.jsonl"), "--out", str(tmp_path / "t.obj")]) == 0
    assert (tmp_path / "t.obj").read_text().startswith("# tubes")


def test_exit_codes(tmp_path, capsys):
    assert main(["no-such-command"]) == EXIT_CODES["UsageError"]
    assert main(["fit-quantizer", "--corpus", str(tmp_path / "missing"), "--out", str(tmp_path / "q")]) == 64
    assert "error:" in capsys.readouterr().err
    assert EXIT_CODES["UsageError"] == UsageError.exit_code == 64
    assert len(set(EXIT_CODES.values())) > 5


def test_sample_rejects_missing_checkpoint(tmp_path):
    rc = main(["sample", "--checkpoint", str(tmp_path / "nope.bin"), "--out", str(tmp_path / "o.jsonl")])
    assert rc == EXIT_CODES["UsageError"]
