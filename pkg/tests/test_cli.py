import csv
import json

import numpy as np
import pytest

from forgeloc import cli, verify
from forgeloc.autodiff.gradcheck import GradCheckReport, ParamCheck
from forgeloc.datagen import load_dataset
from forgeloc.imgproc import Image, guided_noise, read_image, write_image

TINY = "input_size=16\nstage_channels=4,8,12,16\nbatch_size=2\nn_samples=4\n"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A generated split and a model trained on it for 6 epochs."""
    root = tmp_path_factory.mktemp("cli")
    (root / "tiny.txt").write_text(TINY)
    assert cli.main(["gen-data", "--config", str(root / "tiny.txt"), "--out", str(root / "data"),
                     "--seed", "3"]) == 0
    assert cli.main(["train", "--config", str(root / "tiny.txt"), "--out", str(root / "run"),
                     "--seed", "4", "--epochs", "6", "--train_data", str(root / "data" / "train")]) == 0
    return root


class TestExitCodes:
    def test_unknown_command(self):
        assert cli.main(["frobnicate"]) == 2

    def test_missing_required(self):
        assert cli.main(["localize"]) == 2

    def test_unknown_config_key(self, tmp_path):
        assert cli.main(["gen-data", "--out", str(tmp_path), "--seed", "1", "--colour", "red"]) == 2

    def test_seed_mandatory(self, tmp_path):
        assert cli.main(["gen-data", "--out", str(tmp_path)]) == 2
        assert cli.main(["train", "--out", str(tmp_path), "--train_data", str(tmp_path)]) == 2

    def test_dangling_override(self, tmp_path):
        assert cli.main(["gen-data", "--out", str(tmp_path), "--seed"]) == 2

    def test_bad_distortion_spec(self, workspace, tmp_path):
        code = cli.main(["eval", "--checkpoint", str(workspace / "run" / "model.ckpt"),
                         "--data", str(workspace / "data" / "train"), "--out", str(tmp_path),
                         "--distort", "blur:4"])
        assert code == 2

    def test_missing_file_is_runtime_failure(self, tmp_path):
        assert cli.main(["noise", "--image", str(tmp_path / "nope.ppm"), "--out", str(tmp_path / "o.ppm")]) == 1

    def test_help(self):
        assert cli.main(["--help"]) == 0


class TestGenData:
    def test_layout_and_determinism(self, workspace, tmp_path):
        assert cli.main(["gen-data", "--config", str(workspace / "tiny.txt"), "--out", str(tmp_path),
                         "--seed", "3"]) == 0
        a, b = workspace / "data" / "train", tmp_path / "train"
        names = sorted(p.name for p in a.iterdir() if p.name != "run.json")
        assert names == sorted(p.name for p in b.iterdir() if p.name != "run.json")
        assert len([n for n in names if n.endswith("_img.ppm")]) == 4
        for n in names:
            assert (a / n).read_bytes() == (b / n).read_bytes()
        rows = (a / "manifest.tsv").read_text().splitlines()
        assert len(rows) == 5
        echo = json.loads((a / "run.json").read_text())
        assert echo["command"] == "gen-data" and echo["config"]["seed"] == 3

    def test_bucket_flag(self, tmp_path):
        assert cli.main(["gen-data", "--out", str(tmp_path), "--seed", "1", "--n_samples", "6",
                         "--bucket", "0.01", "--mix", "0.5,0.5,0,0", "--split", "small"]) == 0
        assert all(s.area_fraction < 0.01 for s in load_dataset(tmp_path / "small"))


class TestTrain:
    def test_outputs(self, workspace):
        run = workspace / "run"
        assert {"model.ckpt", "train.tsv", "config.txt", "run.json"} <= {p.name for p in run.iterdir()}
        with open(run / "train.tsv") as fh:
            rows = list(csv.DictReader(fh, delimiter="\t"))
        assert len(rows) == 12
        lrs = {int(r["epoch"]): float(r["lr"]) for r in rows}
        assert lrs[4] == 2e-4 and lrs[5] == 1e-4

    def test_same_seed_same_bytes(self, workspace, tmp_path):
        assert cli.main(["train", "--config", str(workspace / "tiny.txt"), "--out", str(tmp_path),
                         "--seed", "4", "--epochs", "6", "--train_data",
                         str(workspace / "data" / "train")]) == 0
        for f in ("train.tsv", "model.ckpt", "config.txt"):
            assert (tmp_path / f).read_bytes() == (workspace / "run" / f).read_bytes()


class TestEval:
    def test_two_distortion_rows(self, workspace, tmp_path):
        assert cli.main(["eval", "--checkpoint", str(workspace / "run" / "model.ckpt"),
                         "--data", str(workspace / "data" / "train"), "--out", str(tmp_path),
                         "--distort", "blur:3,blur:15"]) == 0
        with open(tmp_path / "summary.tsv") as fh:
            rows = [r for r in csv.DictReader(fh, delimiter="\t") if r["scope"] == "all"]
        assert [r["distortion"] for r in rows] == ["none", "blur:3", "blur:15"]
        with open(tmp_path / "report.tsv") as fh:
            assert len(list(csv.DictReader(fh, delimiter="\t"))) == 12

    def test_needs_data(self, workspace, tmp_path):
        assert cli.main(["eval", "--checkpoint", str(workspace / "run" / "model.ckpt"),
                         "--out", str(tmp_path)]) == 2


class TestLocalize:
    def test_mask_written_at_input_resolution(self, workspace, tmp_path):
        img = workspace / "data" / "train" / "0_img.ppm"
        outs = [tmp_path / "a.pgm", tmp_path / "b.pgm"]
        for o in outs:
            assert cli.main(["localize", "--checkpoint", str(workspace / "run" / "model.ckpt"),
                             "--image", str(img), "--out", str(o)]) == 0
        assert outs[0].read_bytes() == outs[1].read_bytes()
        mask = read_image(outs[0])
        assert (mask.height, mask.width, mask.channels) == (16, 16, 1)
        assert outs[0].read_bytes().startswith(b"P5\n16 16\n255\n")

    def test_size_mismatch_names_both(self, workspace, tmp_path, capsys):
        write_image(Image(np.zeros((32, 32, 3))), tmp_path / "big.ppm")
        code = cli.main(["localize", "--checkpoint", str(workspace / "run" / "model.ckpt"),
                         "--image", str(tmp_path / "big.ppm"), "--out", str(tmp_path / "m.pgm")])
        assert code == 1
        err = capsys.readouterr().err
        assert "32×32" in err and "16×16" in err


class TestNoiseAndDistort:
    def test_constant_is_black(self, tmp_path):
        write_image(Image(np.full((8, 8, 3), 0.6)), tmp_path / "c.ppm")
        assert cli.main(["noise", "--image", str(tmp_path / "c.ppm"), "--out", str(tmp_path / "n.ppm")]) == 0
        assert np.all(read_image(tmp_path / "n.ppm").data == 0)
        side = json.loads((tmp_path / "n.ppm.json").read_text())
        assert side["r"] == 2 and side["eps"] == 1e-4

    def test_matches_library(self, tmp_path):
        img = Image(np.random.default_rng(0).integers(0, 256, (10, 10, 3)) / 255.0)
        write_image(img, tmp_path / "i.ppm")
        assert cli.main(["noise", "--image", str(tmp_path / "i.ppm"), "--out", str(tmp_path / "n.ppm"),
                         "--r", "1", "--eps", "0.01"]) == 0
        expected = np.round(guided_noise(img, 1, 0.01).guided_noise.data * 255)
        np.testing.assert_array_equal(np.round(read_image(tmp_path / "n.ppm").data * 255), expected)

    def test_distort_keeps_size(self, tmp_path):
        write_image(Image(np.random.default_rng(1).random((12, 12, 3))), tmp_path / "i.ppm")
        assert cli.main(["distort", "--image", str(tmp_path / "i.ppm"), "--out", str(tmp_path / "d.ppm"),
                         "--spec", "resize:0.25"]) == 0
        assert read_image(tmp_path / "d.ppm").data.shape == (12, 12, 3)


class TestGradcheck:
    def test_subset_passes_and_reports_groups(self, capsys):
        assert cli.main(["gradcheck", "--only", "loc4.head"]) == 0
        out = capsys.readouterr().out.splitlines()
        assert out[-1] == "PASS"
        assert any(line.startswith("loc4.head1\tworst_rel_err=") for line in out)

    def test_unknown_prefix(self):
        assert cli.main(["gradcheck", "--only", "nothing."]) == 2

    def test_failing_report_exits_nonzero(self, monkeypatch, capsys):
        bad = GradCheckReport(tol=1e-4, h=1e-5, results=[
            ParamCheck("loc4.head2.b", 0.5, (0,), 1.0, 0.5, 1, 1)])
        monkeypatch.setattr(verify, "model_gradcheck", lambda *a, **k: bad)
        assert cli.main(["gradcheck"]) == 1
        assert capsys.readouterr().out.splitlines()[-1] == "FAIL"

    def test_injected_gradient_error_is_caught(self):
        names = ["loc4.head2.w", "loc4.head2.b"]
        model = verify.ForgeryNet(verify.mini_config(), seed=0)
        _, grads = verify.model_gradients(model, verify.mini_batch(model, 0))
        grads = {k: v.copy() for k, v in grads.items()}
        grads["loc4.head2.b"] = grads["loc4.head2.b"] * 1.01
        report = verify.model_gradcheck(names=names, grads=grads, model=model)
        assert not report.passed
        assert [f.name for f in report.failures] == ["loc4.head2.b"]
