import json

import pytest

from dtkt.cli import run
from dtkt.data import parse_sequence_file

SMALL = ["--students", "60", "--questions", "6", "--concepts", "2", "--steps", "12"]
TINY_MODEL = ["--slots", "3", "--key-dim", "4", "--value-dim", "4", "--summary-dim", "4", "--epochs", "2", "--batch", "16"]


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert run(["generate", "--seed", "3", *SMALL, "--out", str(out)]) == 0
    return out


@pytest.fixture
def trained(tmp_path, data_dir):
    out = tmp_path / "run"
    assert run(["train", "--data", str(data_dir), "--alpha", "0.001", "--seed", "2", *TINY_MODEL, "--out", str(out)]) == 0
    return out


class TestGenerate:
    def test_preset_interaction_count(self, tmp_path):
        out = tmp_path / "s5"
        assert run(["generate", "--preset", "synthetic5", "--seed", "1", "--out", str(out)]) == 0
        summary = json.loads((out / "dataset.json").read_text())
        assert summary["interactions"] == 200_000
        assert parse_sequence_file(out / "data.txt").num_interactions == 200_000
        assert (out / "ground_truth.csv").is_file()

    def test_outputs(self, data_dir):
        assert sorted(p.name for p in data_dir.iterdir()) == [
            "data.txt", "dataset.json", "ground_truth.csv", "resolved_config.json",
        ]
        assert json.loads((data_dir / "resolved_config.json").read_text())["seed"] == 3

    def test_invalid_generator_value(self, tmp_path, capsys):
        assert run(["generate", "--guess", "0.7", "--slip", "0.5", "--out", str(tmp_path / "x")]) == 1
        assert "guess" in capsys.readouterr().err


class TestTrain:
    def test_deterministic(self, tmp_path, data_dir, trained):
        again = tmp_path / "run"  # identical flags, including --out
        first = {p.name: p.read_bytes() for p in trained.iterdir()}
        assert run(["train", "--data", str(data_dir), "--alpha", "0.001", "--seed", "2", *TINY_MODEL, "--out", str(again)]) == 0
        assert {p.name: p.read_bytes() for p in again.iterdir()} == first
        assert set(first) == {"model.ckpt", "train_report.json", "resolved_config.json"}

    def test_sweep(self, tmp_path, data_dir):
        out = tmp_path / "sweep"
        assert run(["train", "--data", str(data_dir), "--alpha-sweep", "0,0.001", *TINY_MODEL, "--out", str(out)]) == 0
        assert json.loads((out / "sweep.json").read_text()) == {
            "0": "alpha_0/train_report.json", "0.001": "alpha_0.001/train_report.json",
        }
        assert (out / "alpha_0.001" / "model.ckpt").is_file()

    @pytest.mark.parametrize(
        "flags, name",
        [(["--alpha", "-1"], "--alpha"), (["--epochs", "0"], "--epochs"), (["--lr", "abc"], "--lr"), (["--bogus"], "--bogus")],
    )
    def test_bad_flags_exit_1(self, data_dir, tmp_path, capsys, flags, name):
        assert run(["train", "--data", str(data_dir), *flags, "--out", str(tmp_path / "o")]) == 1
        assert name in capsys.readouterr().err

    def test_missing_data(self, tmp_path, capsys):
        assert run(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 1
        assert "--data" in capsys.readouterr().err

    def test_malformed_data(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("2\n1,x\n0,1\n")
        assert run(["train", "--data", str(bad), "--out", str(tmp_path / "o")]) == 1


class TestAnalysisCommands:
    def test_audit_missing_checkpoint(self, tmp_path, data_dir, capsys):
        code = run(["audit", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(data_dir), "--out", str(tmp_path / "a")])
        assert code == 1
        assert "--checkpoint" in capsys.readouterr().err

    def test_corrupt_checkpoint(self, tmp_path, data_dir):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"nope")
        assert run(["audit", "--checkpoint", str(bad), "--data", str(data_dir), "--out", str(tmp_path / "a")]) == 1

    def test_audit_deterministic(self, tmp_path, data_dir, trained):
        args = ["audit", "--checkpoint", str(trained / "model.ckpt"), "--data", str(data_dir), "--k", "2", "--out", str(tmp_path / "audit")]
        assert run(args) == 0
        first = {p.name: p.read_bytes() for p in (tmp_path / "audit").iterdir()}
        assert run(args) == 0
        assert {p.name: p.read_bytes() for p in (tmp_path / "audit").iterdir()} == first
        report = json.loads(first["audit.json"])
        assert report["checkpoint"]["alpha"] == 0.001

    def test_evaluate(self, tmp_path, data_dir, trained):
        out = tmp_path / "eval"
        assert run(["evaluate", "--checkpoint", str(trained / "model.ckpt"), "--data", str(data_dir), "--k", "2", "--out", str(out)]) == 0
        res = json.loads((out / "evaluation.json").read_text())
        assert 0 <= res["auroc"] <= 1 and res["split"] == "test"

    def test_simulate_and_export(self, tmp_path, data_dir, trained):
        ck = str(trained / "model.ckpt")
        assert run(["simulate", "--checkpoint", ck, "--data", str(data_dir), "--out", str(tmp_path / "sim")]) == 0
        assert (tmp_path / "sim" / "scenario_add_only.csv").is_file()
        assert run(["export-concepts", "--checkpoint", ck, "--out", str(tmp_path / "cv")]) == 0
        assert len((tmp_path / "cv" / "concept_vectors.csv").read_text().splitlines()) == 7

    def test_outputs_stay_under_out(self, tmp_path, data_dir, trained):
        before = {p for p in tmp_path.rglob("*")}
        out = tmp_path / "audit2"
        assert run(["audit", "--checkpoint", str(trained / "model.ckpt"), "--data", str(data_dir), "--k", "2", "--out", str(out)]) == 0
        new = {p for p in tmp_path.rglob("*")} - before
        assert new and all(p == out or out in p.parents for p in new)

    def test_thread_count_does_not_change_outputs(self, tmp_path, data_dir, trained, monkeypatch):
        outs = []
        for n in ("1", "3"):
            monkeypatch.setenv("DTKT_THREADS", n)
            out = tmp_path / f"t{n}"
            assert run(["audit", "--checkpoint", str(trained / "model.ckpt"), "--data", str(data_dir), "--k", "2", "--out", str(out)]) == 0
            outs.append((out / "audit.json").read_bytes())
        # the echoed config differs only by --out, which is not part of audit.json
        assert outs[0] == outs[1]


def test_no_command_is_usage_error():
    assert run([]) == 1
