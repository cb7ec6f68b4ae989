import csv

import numpy as np
import pytest

from posekan import RunConfig, make_synthetic_task, save_dataset
from posekan.cli import build_parser, main
from posekan.config import help_text
from posekan.nn import LayerNorm

TINY = ["--set", "F=4", "--set", "blocks=1", "--set", "stack_depth=1", "--set", "batch_size=8"]


@pytest.fixture(scope="module")
def synth(tmp_path_factory):
    path = tmp_path_factory.mktemp("data") / "synth.txt"
    save_dataset(make_synthetic_task(16, 16, seed=2), path)
    return path


def _train(tmp_path, synth, *extra):
    out = tmp_path / "run"
    code = main(["train", "--set", f"dataset={synth}", "--set", f"out_dir={out}", *TINY, *extra])
    return code, out


class TestTrain:
    def test_smoke_one_epoch(self, tmp_path, synth):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(f"dataset = {synth}\nF = 4\nblocks = 1\nstack_depth = 1\n"
                       f"out_dir = {tmp_path / 'out'}\n")
        assert main(["train", "--config", str(cfg), "--set", "epochs=1"]) == 0
        lines = (tmp_path / "out" / "metrics.csv").read_text().splitlines()
        assert lines[0].startswith("# config: ")
        assert len(lines) == 3  # echo, header, one row
        assert (tmp_path / "out" / "ckpt_epoch1.pkan").exists()

    def test_missing_dataset(self, tmp_path, capsys):
        missing = tmp_path / "absent.txt"
        assert main(["train", "--set", f"dataset={missing}"]) == 2
        assert str(missing) in capsys.readouterr().err

    def test_scaling_out_of_range(self, synth, capsys):
        assert main(["train", "--set", f"dataset={synth}", "--set", "s=1.5"]) == 1
        assert "s=1.5" in capsys.readouterr().err

    @pytest.mark.parametrize("override,key", [("epochs=0", "epochs"), ("dropout=1", "dropout"),
                                              ("F=abc", "F"), ("colour=red", "colour")])
    def test_validation_names_key(self, synth, capsys, override, key):
        assert main(["train", "--set", f"dataset={synth}", "--set", override]) == 1
        assert key in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_loss_exit_3(self, tmp_path, synth):
        assert _train(tmp_path, synth, "--set", "lr=1e300", "--set", "epochs=3")[0] == 3

    def test_bit_identical_reruns(self, tmp_path, synth):
        a = tmp_path / "a"
        b = tmp_path / "b"
        for out in (a, b):
            assert main(["train", "--set", f"dataset={synth}", "--set", f"out_dir={out}", *TINY,
                         "--set", "epochs=2", "--set", "seed=5"]) == 0
        assert (a / "ckpt_epoch2.pkan").read_bytes() == (b / "ckpt_epoch2.pkan").read_bytes()
        strip = lambda p: p.read_text().replace(str(a), "").replace(str(b), "")
        assert strip(a / "metrics.csv") == strip(b / "metrics.csv")

    def test_echo_reproduces_run(self, tmp_path, synth):
        first = tmp_path / "first"
        assert main(["train", "--set", f"dataset={synth}", "--set", f"out_dir={first}", *TINY,
                     "--set", "epochs=2"]) == 0
        echo = (first / "metrics.csv").read_text().splitlines()[0]
        cfg = RunConfig.from_echo(echo)
        second = tmp_path / "second"
        args = ["train"] + sum((["--set", f"{k}={getattr(cfg, k)}"] for k in RunConfig.keys()
                                if k not in ("out_dir", "val_dataset")), [])
        assert main(args + ["--set", f"out_dir={second}"]) == 0
        assert (first / "ckpt_epoch2.pkan").read_bytes() == (second / "ckpt_epoch2.pkan").read_bytes()

    def test_seed_from_environment(self, monkeypatch):
        monkeypatch.setenv("POSEKAN_SEED", "17")
        assert RunConfig.load().seed == 17
        assert RunConfig.load(overrides=["seed=3"]).seed == 3


class TestEval:
    @pytest.fixture
    def ckpt(self, tmp_path, synth):
        code, out = _train(tmp_path, synth, "--set", "epochs=1")
        assert code == 0
        return out / "ckpt_epoch1.pkan"

    def _gt_predictions(self, tmp_path, synth):
        from posekan import load_dataset

        ds = load_dataset(synth)
        path = tmp_path / "gt.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id"] + [f"v{i}" for i in range(48)])
            for sid, t in zip(ds.ids, ds.targets):
                w.writerow([sid] + [repr(float(v)) for v in t.ravel()])
        return path

    @pytest.mark.parametrize("protocol", ["mpjpe", "pa", "pck"])
    def test_ground_truth_fixture(self, tmp_path, synth, capsys, protocol):
        preds = self._gt_predictions(tmp_path, synth)
        out_csv = tmp_path / "eval.csv"
        assert main(["eval", "--set", f"dataset={synth}", "--predictions", str(preds),
                     "--protocol", protocol, "--csv", str(out_csv)]) == 0
        rows = list(csv.reader(out_csv.open()))
        average = [r for r in rows if r and r[0] == "Average"][0]
        expected = 100.0 if protocol == "pck" else 0.0
        assert float(average[2]) == pytest.approx(expected, abs=1e-9)

    def test_table_rows_and_header(self, ckpt, synth, capsys):
        assert main(["eval", "--set", f"dataset={synth}", "--checkpoint", str(ckpt),
                     "--protocol", "pa"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert "PA-MPJPE" in out[0]
        assert len(out) - 1 == 4 + 1  # four action labels plus the average row
        assert out[-1].startswith("Average")

    def test_predict_then_eval(self, tmp_path, ckpt, synth, capsys):
        preds = tmp_path / "p.csv"
        assert main(["predict", "--checkpoint", str(ckpt), "--set", f"dataset={synth}",
                     "--output", str(preds)]) == 0
        rows = list(csv.reader(preds.open()))
        assert len(rows) == 1 + 16 and len(rows[0]) == 1 + 48
        capsys.readouterr()
        main(["eval", "--set", f"dataset={synth}", "--checkpoint", str(ckpt)])
        direct = capsys.readouterr().out
        main(["eval", "--set", f"dataset={synth}", "--predictions", str(preds)])
        assert capsys.readouterr().out == direct

    def test_corrupt_checkpoint_exit_2(self, tmp_path, ckpt, synth):
        bad = tmp_path / "bad.pkan"
        bad.write_bytes(ckpt.read_bytes()[:-3])
        assert main(["eval", "--set", f"dataset={synth}", "--checkpoint", str(bad)]) == 2

    def test_missing_ground_truth_exit_2(self, tmp_path, ckpt):
        ds = make_synthetic_task(16, 4, seed=0)
        ds.targets = None
        path = tmp_path / "x_only.txt"
        save_dataset(ds, path)
        assert main(["eval", "--set", f"dataset={path}", "--checkpoint", str(ckpt)]) == 2


class TestVerify:
    def test_filters_rows(self, capsys):
        assert main(["verify", "filters"]) == 0
        rows = [l for l in capsys.readouterr().out.splitlines() if l.startswith("ok")]
        assert len(rows) >= 3

    def test_splines(self):
        assert main(["verify", "splines"]) == 0

    def test_perturbed_backward_detected(self, monkeypatch, capsys):
        original = LayerNorm.backward
        monkeypatch.setattr(LayerNorm, "backward",
                            lambda self, cache, up: 1.01 * original(self, cache, up))
        assert main(["verify", "gradients"]) == 3
        out = capsys.readouterr().out
        assert "FAIL gradients layernorm" in out
        assert "FAILED:" in out and "layernorm" in out.splitlines()[-1]


class TestSweep:
    def test_rows_and_dedupe(self, tmp_path, synth):
        out = tmp_path / "sweep.csv"
        with pytest.warns(UserWarning, match="duplicate"):
            code = main(["sweep", "order", "1", "2,3", "2", "--output", str(out),
                         "--set", f"dataset={synth}", "--set", f"out_dir={tmp_path / 'runs'}",
                         *TINY, "--set", "epochs=1"])
        assert code == 0
        lines = out.read_text().splitlines()
        assert lines[0].startswith("# config: ")
        rows = list(csv.DictReader(lines[1:]))
        assert [r["value"] for r in rows] == ["1", "2", "3"]
        counts = [int(r["parameter_count"]) for r in rows]
        assert counts[0] < counts[1] < counts[2]
        assert all(r["status"] == "ok" for r in rows)

    def test_failed_point_marked(self, tmp_path, synth):
        out = tmp_path / "sweep.csv"
        assert main(["sweep", "s", "0.1,1.5", "--output", str(out), "--set", f"dataset={synth}",
                     "--set", f"out_dir={tmp_path / 'runs'}", *TINY, "--set", "epochs=1"]) == 0
        rows = list(csv.DictReader(out.read_text().splitlines()[1:]))
        assert rows[0]["status"] == "ok"
        assert rows[1]["status"].startswith("failed") and "ScalingOutOfRange" in rows[1]["status"]


class TestMakeSynth:
    def test_text_and_binary(self, tmp_path):
        for binary in (False, True):
            path = tmp_path / ("s.bin" if binary else "s.txt")
            args = ["make-synth", "--output", str(path), "--samples", "6", "--seed", "3"]
            assert main(args + (["--binary"] if binary else [])) == 0
        from posekan import load_dataset

        a, b = load_dataset(tmp_path / "s.txt"), load_dataset(tmp_path / "s.bin")
        np.testing.assert_array_equal(a.targets, b.targets)

    def test_bad_joint_count(self, tmp_path):
        assert main(["make-synth", "--output", str(tmp_path / "x"), "--joints", "17"]) == 1


class TestHelp:
    def test_lists_every_key_with_default(self, capsys):
        with pytest.raises(SystemExit):
            build_parser().parse_args(["train", "--help"])
        out = capsys.readouterr().out
        for key in RunConfig.keys():
            assert key in out
        assert "240" in out and "0.2" in out and "0.03" in out
        assert help_text() in out
