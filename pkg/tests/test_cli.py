"""Command-line pipeline: gen-data, train, score, evaluate, sweep, report."""

import json

import numpy as np
import pytest

from cevae.cli import main
from cevae.data import load_manifest, read_slice
from cevae.evaluation import report_from_json
from cevae.scoring import read_score_csv

SUBCOMMANDS = ("gen-data", "train", "score", "evaluate", "sweep", "report")


def run(argv):
    return main(argv)


class TestParser:
    @pytest.mark.parametrize("sub", SUBCOMMANDS)
    def test_help_exits_zero(self, sub, capsys):
        with pytest.raises(SystemExit) as exc:
            run([sub, "--help"])
        assert exc.value.code == 0
        assert sub in capsys.readouterr().out

    def test_top_level_help(self, capsys):
        with pytest.raises(SystemExit) as exc:
            run(["--help"])
        assert exc.value.code == 0
        out = capsys.readouterr().out
        for sub in SUBCOMMANDS:
            assert sub in out

    def test_missing_required_flag_named(self, capsys):
        assert run(["gen-data"]) == 1
        err = capsys.readouterr().err
        assert "--out" in err

    def test_missing_train_flags_named(self, capsys):
        assert run(["train", "--out", "/tmp/x"]) == 1
        assert "--data" in capsys.readouterr().err


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """gen-data + train once; downstream commands reuse the artifacts."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    rc = run(
        [
            "gen-data",
            "--out", str(data),
            "--patients", "3",
            "--val-patients", "2",
            "--test-patients", "3",
            "--slices", "4",
            "--resolution", "32",
            "--seed", "11",
        ]
    )
    assert rc == 0
    rundir = root / "run"
    rc = run(
        [
            "train",
            "--data", str(data / "manifest.csv"),
            "--out", str(rundir),
            "--resolution", "32",
            "--channels", "4,8",
            "--latent-dim", "8",
            "--epochs", "2",
            "--batch-size", "8",
            "--lr", "1e-3",
            "--seed", "0",
        ]
    )
    assert rc == 0
    return root, data, rundir


class TestGenData:
    def test_writes_manifest_and_slices(self, cli_workspace):
        _, data, _ = cli_workspace
        man = load_manifest(data / "manifest.csv")
        assert len(man.entries) == 8 * 4
        assert man.resolution == 32
        assert (data / "config.json").is_file()

    def test_anomaly_fraction_zero(self, tmp_path, capsys):
        rc = run(
            [
                "gen-data",
                "--out", str(tmp_path / "d"),
                "--patients", "1",
                "--val-patients", "1",
                "--test-patients", "1",
                "--slices", "2",
                "--resolution", "32",
                "--anomaly-frac", "0",
            ]
        )
        assert rc == 0
        man = load_manifest(tmp_path / "d" / "manifest.csv")
        assert all(not e.mask_path for e in man.entries)


class TestTrain:
    def test_run_directory_contents(self, cli_workspace):
        _, _, rundir = cli_workspace
        assert (rundir / "losses.csv").is_file()
        assert (rundir / "config.json").is_file()
        assert (rundir / "cli_config.json").is_file()
        assert (rundir / "checkpoints" / "best").is_file()
        assert (rundir / "checkpoints" / "last").is_file()

    def test_rejects_unknown_config_key(self, cli_workspace, tmp_path, capsys):
        _, data, _ = cli_workspace
        bad = tmp_path / "cfg.json"
        bad.write_text(json.dumps({"learning_rate": 1e-3}))
        rc = run(
            [
                "train",
                "--config", str(bad),
                "--data", str(data / "manifest.csv"),
                "--out", str(tmp_path / "run"),
            ]
        )
        assert rc == 1
        assert "learning_rate" in capsys.readouterr().err

    def test_config_file_with_flag_override(self, cli_workspace, tmp_path, capsys):
        _, data, _ = cli_workspace
        cfg = tmp_path / "cfg.json"
        cfg.write_text(
            json.dumps(
                {
                    "resolution": 32,
                    "channels": "4,8",
                    "latent_dim": 8,
                    "epochs": 5,
                    "batch_size": 8,
                    "lr": 1e-3,
                }
            )
        )
        out = tmp_path / "run"
        rc = run(
            [
                "train",
                "--config", str(cfg),
                "--data", str(data / "manifest.csv"),
                "--out", str(out),
                "--epochs", "1",  # flag beats the config file
            ]
        )
        assert rc == 0
        echoed = json.loads((out / "cli_config.json").read_text())
        assert echoed["epochs"] == 1
        assert echoed["latent_dim"] == 8


@pytest.fixture(scope="module")
def scored_dir(cli_workspace):
    root, data, rundir = cli_workspace
    out = root / "scores"
    rc = run(
        [
            "score",
            "--checkpoint", str(rundir / "checkpoints" / "best"),
            "--data", str(data / "manifest.csv"),
            "--out", str(out),
            "--split", "test",
            "--smoothgrad-n", "2",
            "--seed", "0",
        ]
    )
    assert rc == 0
    return out


class TestScore:
    def test_outputs(self, scored_dir, cli_workspace):
        _, data, _ = cli_workspace
        man = load_manifest(data / "manifest.csv")
        n_test = len(man.load_samples("test"))
        rows = read_score_csv(scored_dir / "scores.csv")
        assert len(rows) == n_test
        maps = sorted((scored_dir / "maps").glob("*_pixels.slc"))
        assert len(maps) == n_test
        arr = read_slice(maps[0])
        assert arr.shape == (32, 32)
        assert (arr >= 0).all()

    def test_idempotent_scores(self, scored_dir, cli_workspace, tmp_path):
        root, data, rundir = cli_workspace
        out2 = tmp_path / "scores2"
        rc = run(
            [
                "score",
                "--checkpoint", str(rundir / "checkpoints" / "best"),
                "--data", str(data / "manifest.csv"),
                "--out", str(out2),
                "--split", "test",
                "--smoothgrad-n", "2",
                "--seed", "0",
            ]
        )
        assert rc == 0
        assert (
            (scored_dir / "scores.csv").read_bytes()
            == (out2 / "scores.csv").read_bytes()
        )
        for p in sorted((scored_dir / "maps").iterdir()):
            assert p.read_bytes() == (out2 / "maps" / p.name).read_bytes()

    def test_heatmaps_flag(self, cli_workspace, tmp_path):
        root, data, rundir = cli_workspace
        out = tmp_path / "hm"
        rc = run(
            [
                "score",
                "--checkpoint", str(rundir / "checkpoints" / "best"),
                "--data", str(data / "manifest.csv"),
                "--out", str(out),
                "--split", "val",
                "--smoothgrad-n", "1",
                "--heatmaps",
            ]
        )
        assert rc == 0
        pngs = list((out / "heatmaps").glob("*.png"))
        assert pngs
        assert pngs[0].read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_bad_checkpoint_path_fails(self, cli_workspace, tmp_path, capsys):
        _, data, _ = cli_workspace
        rc = run(
            [
                "score",
                "--checkpoint", str(tmp_path / "nope"),
                "--data", str(data / "manifest.csv"),
                "--out", str(tmp_path / "s"),
            ]
        )
        assert rc == 1
        assert capsys.readouterr().err.startswith("error:")


class TestEvaluate:
    def test_report_files(self, scored_dir, cli_workspace, tmp_path, capsys):
        _, data, _ = cli_workspace
        out = tmp_path / "report.json"
        rc = run(
            [
                "evaluate",
                "--scores", str(scored_dir),
                "--data", str(data / "manifest.csv"),
                "--out", str(out),
                "--folds", "3",
            ]
        )
        assert rc == 0
        report = report_from_json(out.read_text())
        assert len(report.per_run) == 1
        assert 0.0 <= report.pixel_roc_auc <= 1.0
        table = out.with_suffix(".txt").read_text()
        assert "slice_roc_auc" in table
        assert "slice_roc_auc" in capsys.readouterr().out

    def test_report_rendering_round_trip(self, scored_dir, cli_workspace, tmp_path, capsys):
        _, data, _ = cli_workspace
        rep = tmp_path / "r.json"
        rc = run(
            [
                "evaluate",
                "--scores", str(scored_dir),
                "--data", str(data / "manifest.csv"),
                "--out", str(rep),
                "--folds", "3",
            ]
        )
        assert rc == 0
        capsys.readouterr()
        out = tmp_path / "table.txt"
        rc = run(["report", "--report", str(rep), "--out", str(out)])
        assert rc == 0
        assert out.read_text().strip() == capsys.readouterr().out.strip()


class TestSweep:
    def test_two_factor_smoke(self, cli_workspace, tmp_path, capsys):
        _, data, _ = cli_workspace
        out = tmp_path / "sweep"
        rc = run(
            [
                "sweep",
                "--data", str(data / "manifest.csv"),
                "--out", str(out),
                "--resolution", "32",
                "--channels", "4,8",
                "--latent-dim", "8",
                "--epochs", "1",
                "--batch-size", "8",
                "--factors", "0,1",
                "--seeds", "1",
                "--folds", "3",
                "--mode", "guided",
            ]
        )
        assert rc == 0
        assert (out / "sweep.csv").is_file()
        assert (out / "sweep.png").is_file()
        assert (out / "reports" / "factor_0.json").is_file()
        assert (out / "reports" / "factor_1.json").is_file()
        lines = (out / "sweep.csv").read_text().splitlines()
        assert len(lines) == 3
        text = capsys.readouterr().out
        assert "factor 0" in text and "factor 1" in text
