import csv
import filecmp
import json

import numpy as np
import pytest

from taf.cli import (EXIT_CONFIG, EXIT_DATA, EXIT_MISSING, main, read_prediction_csv,
                     resolve_settings, build_parser)
from taf.datagen import load_dataset

SMALL = ["--videos", "3", "--k", "3", "--input-dim", "4", "--min-frames", "20",
         "--max-frames", "30", "--seed", "7"]
FAST = ["--stage1-epochs", "2", "--stage2-epochs", "1", "--dim", "8"]


def tree(path):
    return sorted(p.relative_to(path).as_posix() for p in path.rglob("*"))


def same_tree(a, b):
    names = tree(a)
    if names != tree(b):
        return False
    return all(filecmp.cmp(a / n, b / n, shallow=False) for n in names if (a / n).is_file())


def error_line(capsys):
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1
    assert err[0].startswith("taf: error kind=")
    return err[0]


@pytest.fixture
def data_dir(tmp_path):
    out = tmp_path / "data"
    assert main(["synth", "--out-dir", str(out)] + SMALL) == 0
    return out


@pytest.fixture
def model_dir(tmp_path, data_dir):
    out = tmp_path / "model"
    assert main(["train", "--out-dir", str(out), "--data-dir", str(data_dir)] + FAST) == 0
    return out


class TestSynth:
    def test_deterministic_tree(self, tmp_path, monkeypatch):
        for name in ("a", "b"):
            (tmp_path / name).mkdir()
            monkeypatch.chdir(tmp_path / name)
            assert main(["synth", "--out-dir", "data", "--videos", "20", "--k", "5",
                         "--seed", "7"]) == 0
        assert same_tree(tmp_path / "a" / "data", tmp_path / "b" / "data")

    def test_config_echo_reproduces(self, tmp_path, data_dir):
        echo = data_dir / "config.txt"
        assert "seed=7" in echo.read_text()
        again = tmp_path / "again"
        assert main(["synth", "--config", str(echo), "--out-dir", str(again)]) == 0
        for name in tree(data_dir):
            if name.endswith((".tafv", ".txt")) and name != "config.txt":
                assert filecmp.cmp(data_dir / name, again / name, shallow=False), name


class TestPipeline:
    def test_train_outputs(self, model_dir):
        assert (model_dir / "model.ckpt").exists()
        assert (model_dir / "config.txt").exists()
        with open(model_dir / "loss_log.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["epoch", "video_id", "L_f", "L_s", "L_a", "L"]
        assert len(rows) == 1 + 3 * 3

    def test_train_is_reproducible(self, tmp_path, data_dir, model_dir):
        other = tmp_path / "model2"
        assert main(["train", "--out-dir", str(other), "--data-dir", str(data_dir)] + FAST) == 0
        assert filecmp.cmp(model_dir / "model.ckpt", other / "model.ckpt", shallow=False)
        assert filecmp.cmp(model_dir / "loss_log.csv", other / "loss_log.csv", shallow=False)

    def test_segment_then_eval(self, tmp_path, data_dir, model_dir, capsys):
        seg = tmp_path / "seg"
        assert main(["segment", "--out-dir", str(seg), "--data-dir", str(data_dir),
                     "--checkpoint", str(model_dir / "model.ckpt")]) == 0
        ds = load_dataset(data_dir)
        for v in ds:
            labels = read_prediction_csv(seg / f"{v.video_id}.csv")
            assert len(labels) == len(v.labels)
            payload = json.loads((seg / f"{v.video_id}.json").read_text())
            assert sorted(payload["transcript"]) == [0, 1, 2]
            assert (seg / f"{v.video_id}.svg").read_text().startswith("<svg")
        rep_dir = tmp_path / "report"
        assert main(["eval", "--out-dir", str(rep_dir), "--data-dir", str(data_dir),
                     "--pred-dir", str(seg)]) == 0
        report = json.loads((rep_dir / "report.json").read_text())
        assert 0.0 <= report["mof"] <= 1.0
        assert np.loadtxt(rep_dir / "confusion.csv", delimiter=",").shape == (3, 3)
        assert "overall" in capsys.readouterr().out

    def test_segment_workers_match_serial(self, tmp_path, data_dir, model_dir):
        ckpt = str(model_dir / "model.ckpt")
        for name, workers in (("serial", "1"), ("pool", "2")):
            assert main(["segment", "--out-dir", str(tmp_path / name), "--data-dir", str(data_dir),
                         "--checkpoint", ckpt, "--workers", workers, "--svg", "false"]) == 0
        for v in load_dataset(data_dir):
            assert filecmp.cmp(tmp_path / "serial" / f"{v.video_id}.csv",
                               tmp_path / "pool" / f"{v.video_id}.csv", shallow=False)

    def test_frame_only_model(self, tmp_path, data_dir):
        out = tmp_path / "frame"
        assert main(["train", "--out-dir", str(out), "--data-dir", str(data_dir),
                     "--stage1-epochs", "2", "--stage2-epochs", "0", "--dim", "8"]) == 0
        seg = tmp_path / "seg"
        assert main(["segment", "--out-dir", str(seg), "--data-dir", str(data_dir),
                     "--checkpoint", str(out / "model.ckpt")]) == 0

    def test_eval_on_ground_truth(self, tmp_path, data_dir):
        pred = tmp_path / "pred"
        pred.mkdir()
        for v in load_dataset(data_dir):
            with open(pred / f"{v.video_id}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["frame_index", "label"])
                w.writerows(enumerate(v.labels.framewise.tolist()))
        out = tmp_path / "report"
        assert main(["eval", "--out-dir", str(out), "--data-dir", str(data_dir),
                     "--pred-dir", str(pred)]) == 0
        report = json.loads((out / "report.json").read_text())
        assert report["mof"] == 1.0 and report["f1"] == 1.0


class TestInspect:
    def test_priors(self, tmp_path):
        out = tmp_path / "priors"
        assert main(["inspect", "priors", "--out-dir", str(out), "--frames", "40", "--k", "4",
                     "--transcript", "2,0,3,1"]) == 0
        fixed = np.loadtxt(out / "prior_fixed.csv", delimiter=",")
        perm = np.loadtxt(out / "prior_transcript.csv", delimiter=",")
        assert fixed.shape == (40, 4)
        np.testing.assert_allclose(perm[:, [2, 0, 3, 1]], fixed)
        assert (out / "prior_fixed.svg").exists()

    @pytest.mark.parametrize("what", ["codes", "attention"])
    def test_model_dumps(self, tmp_path, data_dir, model_dir, what):
        out = tmp_path / what
        assert main(["inspect", what, "--out-dir", str(out), "--data-dir", str(data_dir),
                     "--checkpoint", str(model_dir / "model.ckpt"), "--video", "video_0000"]) == 0
        assert any(p.suffix == ".csv" for p in out.iterdir())
        assert any(p.suffix == ".svg" for p in out.iterdir())

    def test_echo_round_trips(self, tmp_path):
        out = tmp_path / "priors"
        assert main(["inspect", "priors", "--out-dir", str(out), "--k", "3"]) == 0
        again = tmp_path / "again"
        assert main(["inspect", "priors", "--config", str(out / "config.txt"),
                     "--out-dir", str(again)]) == 0
        assert filecmp.cmp(out / "prior_fixed.csv", again / "prior_fixed.csv", shallow=False)


class TestConfigResolution:
    def resolve(self, argv, environ=None):
        args = build_parser().parse_args(argv)
        return resolve_settings(args.command, args, environ or {})

    def test_precedence(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("# comment\nlr = 0.5\nseed=3\nrho=0.2\n")
        base = ["train", "--out-dir", "o", "--data-dir", "d", "--config", str(cfg)]
        s = self.resolve(base)
        assert (s["lr"], s["seed"], s["rho"]) == (0.5, 3, 0.2)
        s = self.resolve(base, {"TAF_SEED": "4", "TAF_RHO": "0.3"})
        assert (s["lr"], s["seed"], s["rho"]) == (0.5, 4, 0.3)
        s = self.resolve(base + ["--seed", "5"], {"TAF_SEED": "4"})
        assert s["seed"] == 5
        assert s["stage2_epochs"] == 70

    def test_unknown_file_key(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("learning_rate=0.1\n")
        code = main(["train", "--out-dir", str(tmp_path / "o"), "--data-dir", "d",
                     "--config", str(cfg)])
        assert code == EXIT_CONFIG
        assert "code=2" in error_line(capsys)

    def test_unknown_env_key(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setenv("TAF_BOGUS", "1")
        assert main(["synth", "--out-dir", str(tmp_path / "o")]) == EXIT_CONFIG
        error_line(capsys)

    def test_bad_value(self, tmp_path, capsys):
        assert main(["synth", "--out-dir", str(tmp_path / "o"), "--videos", "many"]) == EXIT_CONFIG
        assert "videos" in error_line(capsys)

    def test_invalid_setting_is_data_error(self, tmp_path, data_dir, capsys):
        code = main(["train", "--out-dir", str(tmp_path / "o"), "--data-dir", str(data_dir),
                     "--align-order", "X"] + FAST)
        assert code == EXIT_DATA
        error_line(capsys)

    def test_unknown_flag_is_usage_error(self, tmp_path):
        with pytest.raises(SystemExit) as exc:
            main(["synth", "--out-dir", str(tmp_path), "--frobnicate", "1"])
        assert exc.value.code == 2


class TestExitCodes:
    def test_missing_data_dir(self, tmp_path, capsys):
        code = main(["train", "--out-dir", str(tmp_path / "o"), "--data-dir", str(tmp_path / "x")])
        assert code == EXIT_MISSING
        assert "kind=missing_file" in error_line(capsys)

    def test_missing_checkpoint(self, tmp_path, data_dir, capsys):
        code = main(["segment", "--out-dir", str(tmp_path / "o"), "--data-dir", str(data_dir),
                     "--checkpoint", str(tmp_path / "none.ckpt")])
        assert code == EXIT_MISSING
        error_line(capsys)

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["synth", "--out-dir", str(tmp_path), "--config", "nope.cfg"]) == EXIT_MISSING
        error_line(capsys)

    def test_dimension_mismatch(self, tmp_path, model_dir, capsys):
        other = tmp_path / "wide"
        assert main(["synth", "--out-dir", str(other), "--videos", "2", "--k", "3",
                     "--input-dim", "6", "--min-frames", "20", "--max-frames", "30"]) == 0
        code = main(["segment", "--out-dir", str(tmp_path / "o"), "--data-dir", str(other),
                     "--checkpoint", str(model_dir / "model.ckpt")])
        assert code == EXIT_DATA
        assert "dimension mismatch" in error_line(capsys)

    def test_prediction_length_mismatch(self, tmp_path, data_dir, capsys):
        pred = tmp_path / "pred"
        pred.mkdir()
        (pred / "video_0000.csv").write_text("frame_index,label\n0,0\n1,1\n")
        code = main(["eval", "--out-dir", str(tmp_path / "o"), "--data-dir", str(data_dir),
                     "--pred-dir", str(pred)])
        assert code == EXIT_DATA
        assert "dimension mismatch" in error_line(capsys)

    def test_no_predictions(self, tmp_path, data_dir, capsys):
        (tmp_path / "pred").mkdir()
        code = main(["eval", "--out-dir", str(tmp_path / "o"), "--data-dir", str(data_dir),
                     "--pred-dir", str(tmp_path / "pred")])
        assert code == EXIT_MISSING
        error_line(capsys)

    def test_missing_required(self, tmp_path, capsys):
        assert main(["train", "--out-dir", str(tmp_path)]) == EXIT_CONFIG
        assert "data_dir" in error_line(capsys)
