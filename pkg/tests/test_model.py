import math

import numpy as np
import pytest

from forgeloc.autodiff import ContractError, DimensionError
from forgeloc.config import ConfigError, RunConfig
from forgeloc.datagen import make_dataset
from forgeloc.imgproc import Image, guided_noise
from forgeloc.model import ForgeryNet, ModelConfig, noise_image
from hypothesis import given, settings, strategies as st

from forgeloc.train import (TrainingError, augment_batch, dihedral, epoch_order, epoch_transforms,
                            learning_rate, train)

MINI = dict(input_size=16, stage_channels=(4, 8, 12, 16))


def mini(**kw):
    return ModelConfig(**{**MINI, **kw})


class TestModelConfig:
    @pytest.mark.parametrize("kw", [dict(noise_branch="srm"), dict(arpm="maybe"), dict(fam="half"),
                                    dict(sccm_ratios=(2, 2, 2)), dict(sccm_ratios=(3, 2, 2, 1))])
    def test_invalid(self, kw):
        with pytest.raises(ContractError):
            mini(**kw)

    def test_default_widths(self):
        cfg = ModelConfig()
        assert cfg.input_size == 64 and cfg.stage_channels == (16, 32, 64, 128)


class TestForgeryNet:
    def test_parameter_groups_follow_ablations(self):
        full = ForgeryNet(mini())
        assert any(k.startswith("noise.") for k in full.params)
        assert any(k.startswith("arpm.") for k in full.params)
        no_noise = ForgeryNet(mini(noise_branch="off"))
        assert not any(k.startswith("noise.") for k in no_noise.params)
        assert not any(".noise." in k for k in no_noise.params)
        no_arpm = ForgeryNet(mini(arpm="off"))
        assert not any(k.startswith("arpm.") for k in no_arpm.params)
        plain = ForgeryNet(mini(fam="concat-only"))
        assert not any(".rgb." in k for k in plain.params)

    @pytest.mark.parametrize("mode", ["guided", "gf", "sobel"])
    def test_noise_inputs(self, mode):
        img = make_dataset(1, 0, size=16)[0].image
        res = guided_noise(img)
        expected = {"guided": res.guided_noise, "gf": res.residual, "sobel": res.edges}[mode]
        assert np.array_equal(noise_image(img, mode, 2, 1e-4), expected.data)

    @pytest.mark.parametrize("kw", [{}, dict(noise_branch="off"), dict(arpm="off"), dict(fam="concat-only")])
    def test_predict_shapes_and_range(self, kw):
        model = ForgeryNet(mini(**kw), seed=1)
        img = make_dataset(1, 3, size=16)[0].image
        m = model.predict(img)
        assert m.shape == (8, 8) and np.all((m > 0) & (m < 1))
        assert model.predict_full(img).shape == (16, 16)

    def test_default_model_final_mask_is_half_resolution(self):
        model = ForgeryNet(ModelConfig(), seed=0)
        assert model.predict(make_dataset(1, 0)[0].image).shape == (32, 32)

    def test_wrong_image_size(self):
        with pytest.raises(DimensionError):
            ForgeryNet(mini()).prepare([Image(np.zeros((32, 32, 3)))])

    def test_loss_and_grads_cover_every_parameter(self):
        model = ForgeryNet(mini(), seed=2)
        ds = make_dataset(2, 5, size=16)
        loss, grads = model.loss_and_grads(model.prepare([s.image for s in ds], [s.mask for s in ds]))
        assert math.isfinite(loss) and loss > 0
        assert set(grads) == set(model.params)

    def test_save_load_round_trip(self, tmp_path):
        a = ForgeryNet(mini(), seed=3)
        a.params["loc1.sccm.alpha"] = np.array([0.25])
        a.save(tmp_path / "m.ckpt")
        b = ForgeryNet(mini(), seed=4)
        b.load(tmp_path / "m.ckpt")
        for k, v in a.state_dict().items():
            assert v.tobytes() == b.state_dict()[k].tobytes()

    def test_load_rejects_other_architecture(self, tmp_path):
        ForgeryNet(mini()).save(tmp_path / "m.ckpt")
        with pytest.raises(ContractError):
            ForgeryNet(mini(arpm="off")).load(tmp_path / "m.ckpt")


class TestSchedule:
    def test_halving(self):
        assert [learning_rate(2e-4, e, 5) for e in (0, 4, 5, 9, 10, 24)] == [2e-4, 2e-4, 1e-4, 1e-4, 5e-5, 1.25e-5]

    def test_fixed_when_period_zero(self):
        assert learning_rate(2e-4, 100, 0) == 2e-4

    def test_epoch_order_is_permutation(self):
        o = epoch_order(3, 1, 10)
        assert sorted(o) == list(range(10))
        assert not np.array_equal(o, epoch_order(3, 2, 10))


class TestTrain:
    def test_deterministic_and_logged(self, tmp_path):
        ds = make_dataset(4, 1, size=16)
        cfg = RunConfig(seed=5, epochs=2, batch_size=2, **MINI)
        r1 = train(cfg, ds, out_dir=tmp_path / "a")
        r2 = train(cfg, ds, out_dir=tmp_path / "b")
        assert r1.log == r2.log and len(r1.log) == 4
        for f in ("train.tsv", "model.ckpt"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_max_steps(self):
        cfg = RunConfig(seed=1, epochs=10, batch_size=2, max_steps=3, **MINI)
        assert len(train(cfg, make_dataset(4, 1, size=16)).log) == 3

    def test_requires_seed(self):
        with pytest.raises(TrainingError):
            train(RunConfig(**MINI), make_dataset(2, 1, size=16))

    def test_nonfinite_aborts_with_diagnostic(self):
        cfg = RunConfig(seed=1, epochs=1, batch_size=2, **MINI)
        model = ForgeryNet(cfg.model_config(), seed=1)
        model.params["fam.scale2.fuse.w"][0, 0, 0, 0] = np.nan
        with pytest.raises(TrainingError, match="non-finite") as exc:
            train(cfg, make_dataset(2, 1, size=16), model=model)
        assert "fam.scale2.fuse.w" in str(exc.value)


class TestAugmentation:
    def test_eight_distinct_transforms(self):
        a = np.arange(9.0).reshape(3, 3)
        outs = {dihedral(a, k).tobytes() for k in range(8)}
        assert len(outs) == 8

    def test_identity(self):
        a = rand_img(0)
        assert np.array_equal(dihedral(a, 0), a)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 7), st.integers(0, 10_000))
    def test_noise_input_commutes(self, k, seed):
        # transforming the precomputed noise input equals recomputing it
        image = make_dataset(1, seed, mix=(1, 0, 0, 0), size=16)[0].image
        chw = image.data.transpose(2, 0, 1)
        moved = Image(np.ascontiguousarray(dihedral(chw, k).transpose(1, 2, 0)))
        direct = noise_image(moved, "guided", 2, 1e-4).transpose(2, 0, 1)
        via = dihedral(noise_image(image, "guided", 2, 1e-4).transpose(2, 0, 1), k)
        assert np.max(np.abs(direct - via)) < 1e-12

    def test_batch_moves_masks_with_images(self):
        model = ForgeryNet(mini())
        ds = make_dataset(3, 2, mix=(1, 0, 0, 0), size=16)
        batch = model.prepare([s.image for s in ds], [s.mask for s in ds])
        out = augment_batch(batch, [1, 4, 6])
        for i, k in enumerate([1, 4, 6]):
            assert np.array_equal(out.rgb[i], dihedral(batch.rgb[i], k))
            assert np.array_equal(out.noise[i], dihedral(batch.noise[i], k))
            assert np.array_equal(out.masks[i], dihedral(batch.masks[i], k))

    def test_transforms_are_seeded(self):
        assert np.array_equal(epoch_transforms(3, 1, 50), epoch_transforms(3, 1, 50))
        assert not np.array_equal(epoch_transforms(3, 1, 50), epoch_transforms(3, 2, 50))

    def test_training_is_deterministic_and_differs_from_plain(self):
        ds = make_dataset(4, 1, size=16)
        cfg = RunConfig(seed=5, epochs=2, batch_size=2, augment="dihedral", **MINI)
        r1, r2 = train(cfg, ds), train(cfg, ds)
        plain = train(RunConfig(seed=5, epochs=2, batch_size=2, **MINI), ds)
        assert r1.log == r2.log and r1.log != plain.log

    def test_unknown_mode(self):
        with pytest.raises(TrainingError, match="augmentation"):
            train(RunConfig(seed=1, augment="mixup", **MINI), make_dataset(2, 1, size=16))


def rand_img(seed):
    return np.random.default_rng(seed).random((3, 5, 7))


class TestRunConfig:
    def test_text_round_trip(self):
        cfg = RunConfig(seed=3, stage_channels=(8, 16, 24, 32), bucket=0.05, lr=1e-3, noise_branch="off")
        back = RunConfig.from_text(cfg.to_text())
        assert back == cfg

    def test_comments_and_blank_lines(self):
        cfg = RunConfig.from_text("# run\n\nseed = 4\nlr=0.001  # faster\n")
        assert cfg.seed == 4 and cfg.lr == 0.001

    @pytest.mark.parametrize("text", ["colour=red", "seed", "epochs=many", "lr=fast"])
    def test_rejects_bad_lines(self, text):
        with pytest.raises(ConfigError):
            RunConfig.from_text(text)

    def test_dash_keys(self):
        cfg = RunConfig()
        cfg.set("batch-size", "7")
        assert cfg.batch_size == 7

    def test_invalid_model_settings_become_config_errors(self):
        with pytest.raises(ConfigError):
            RunConfig(arpm="sometimes").model_config()

    def test_defaults(self):
        cfg = RunConfig()
        assert (cfg.batch_size, cfg.lr, cfg.epochs, cfg.lr_halving_period) == (4, 2e-4, 25, 5)
