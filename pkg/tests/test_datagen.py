import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from forgeloc.autodiff import ContractError
from forgeloc.datagen import (FORGERY_TYPES, SampleSpec, bucket_limit, forge, gen_background, generate,
                              inpaint, load_dataset, make_dataset, make_specs, region_mask,
                              save_dataset, smooth_background, type_counts)
from forgeloc.imgproc import Image


def spec(seed=1, forgery="splice", **kw):
    return SampleSpec(seed=seed, forgery=forgery, **kw)


class TestBackground:
    def test_deterministic(self):
        assert gen_background(5, 64).data.tobytes() == gen_background(5, 64).data.tobytes()

    def test_seeds_differ(self):
        assert gen_background(5, 64) != gen_background(6, 64)

    def test_noise_level(self):
        resid = gen_background(11, 128).data - smooth_background(11, 128)
        assert abs(resid.std() - 2 / 255) < 0.2 * 2 / 255

    def test_on_8bit_grid(self):
        data = gen_background(3, 32).data
        np.testing.assert_array_equal(np.round(data * 255) / 255, data)


class TestRegion:
    @pytest.mark.parametrize("shape", ["ellipse", "rectangle"])
    @pytest.mark.parametrize("area", [1, 37, 205, 900])
    def test_exact_area(self, shape, area):
        m = region_mask(64, area, shape, np.random.default_rng(area))
        assert m.sum() == area

    def test_area_for_five_percent_over_100_seeds(self):
        for seed in range(100):
            s = generate(spec(seed, FORGERY_TYPES[seed % 3], fraction=0.05, shape=("ellipse", "rectangle")[seed % 2]))
            assert 164 <= s.mask.sum() <= 245

    def test_fraction_tracks_target(self):
        for seed, frac in enumerate([0.005, 0.01, 0.03, 0.1, 0.3]):
            s = generate(spec(seed, fraction=frac))
            assert abs(s.area_fraction - frac) <= 0.2 * frac

    def test_too_large_region_rejected(self):
        with pytest.raises(ContractError):
            spec(fraction=0.6)
        with pytest.raises(ContractError):
            region_mask(8, 65, "ellipse", np.random.default_rng(0))


class TestForge:
    @pytest.mark.parametrize("seed", range(12))
    def test_copy_move_exact_translation(self, seed):
        s = generate(spec(seed, "copy-move"))
        dy, dx = s.offset
        assert (dy, dx) != (0, 0)
        ys, xs = np.nonzero(s.mask)
        np.testing.assert_array_equal(s.image.data[ys, xs], s.original.data[ys - dy, xs - dx])

    def test_authentic_mask_empty(self):
        s = generate(spec(4, "authentic"))
        assert not s.mask.any() and s.image == s.original

    @pytest.mark.parametrize("forgery", ["splice", "copy-move", "removal"])
    @pytest.mark.parametrize("seed", range(8))
    def test_outside_untouched_inside_changed(self, forgery, seed):
        s = generate(spec(seed, forgery, fraction=0.04))
        out = s.mask == 0
        assert np.array_equal(s.image.data[out], s.original.data[out])
        inside = s.mask == 1
        assert s.mask.any()
        assert np.any(s.image.data[inside] != s.original.data[inside])
        assert set(np.unique(s.mask)) == {0.0, 1.0}

    def test_size_mismatch_rejected(self):
        with pytest.raises(ContractError):
            forge(gen_background(0, 32), spec(0))

    def test_unknown_type(self):
        with pytest.raises(ContractError):
            spec(forgery="recolor")

    def test_inpaint_reproduces_linear_ramp(self):
        # a linear ramp is harmonic, so the 8-neighbour mean leaves it fixed
        y, x = np.mgrid[0:16, 0:16]
        data = np.repeat((0.2 + 0.01 * x + 0.02 * y)[:, :, None], 3, axis=2)
        mask = np.zeros((16, 16), dtype=bool)
        mask[6:9, 6:9] = True
        out = inpaint(data, mask, iters=2000)
        np.testing.assert_allclose(out, data, rtol=0, atol=1e-9)

    def test_generation_pure_in_spec(self):
        a, b = generate(spec(9, "removal")), generate(spec(9, "removal"))
        assert a.image.data.tobytes() == b.image.data.tobytes()
        assert np.array_equal(a.mask, b.mask)


class TestDataset:
    def test_regeneration_identical(self):
        a, b = make_dataset(8, 7), make_dataset(8, 7)
        assert a.manifest() == b.manifest()
        for x, y in zip(a, b):
            assert x.image.data.tobytes() == y.image.data.tobytes()
            assert x.mask.tobytes() == y.mask.tobytes()

    def test_different_seed_differs(self):
        assert make_dataset(4, 7).manifest() != make_dataset(4, 8).manifest()

    def test_equal_mix_counts(self):
        specs = make_specs(100, 3)
        assert [sum(s.forgery == t for s in specs) for t in FORGERY_TYPES] == [25, 25, 25, 25]

    @pytest.mark.parametrize("n,mix,expected", [(10, (0.25, 0.25, 0.25, 0.25), [3, 3, 2, 2]),
                                                (7, (1, 0, 0, 0), [7, 0, 0, 0]),
                                                (8, (0.5, 0.5, 0, 0), [4, 4, 0, 0])])
    def test_type_counts(self, n, mix, expected):
        assert type_counts(n, mix) == expected

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 200), st.lists(st.integers(0, 10), min_size=4, max_size=4).filter(any))
    def test_type_counts_partition(self, n, weights):
        mix = np.array(weights) / sum(weights)
        counts = type_counts(n, mix)
        assert sum(counts) == n
        assert all(abs(c - m * n) < 1 for c, m in zip(counts, mix))

    def test_bad_mix(self):
        with pytest.raises(ContractError):
            type_counts(4, (0.5, 0.5, 0.5, 0))

    def test_small_bucket_on_128(self):
        ds = make_dataset(12, 2, mix=(1 / 3, 1 / 3, 1 / 3, 0), bucket=0.01, size=128)
        assert all(s.mask.sum() < 164 for s in ds)
        assert all(s.mask.sum() >= 1 for s in ds)

    @pytest.mark.parametrize("cap", [0.05, 0.10])
    def test_bucket_cap_on_64(self, cap):
        ds = make_dataset(12, 5, mix=(1 / 3, 1 / 3, 1 / 3, 0), bucket=cap)
        assert all(s.area_fraction < cap for s in ds)

    def test_impossible_bucket(self):
        with pytest.raises(ContractError):
            bucket_limit(1e-4, 64)
        with pytest.raises(ContractError):
            make_dataset(2, 0, bucket=0.0002)

    def test_disk_round_trip(self, tmp_path):
        ds = make_dataset(6, 4)
        split = save_dataset(ds, tmp_path, "val")
        assert (split / "manifest.tsv").read_text().splitlines()[0] == "idx\ttype\tseed\tarea_fraction"
        loaded = load_dataset(split)
        assert len(loaded) == 6
        for s, l in zip(ds, loaded):
            assert l.forgery == s.spec.forgery and l.seed == s.spec.seed
            np.testing.assert_array_equal(l.mask, s.mask)
            # the generator already works on the 8-bit grid
            np.testing.assert_allclose(l.image.data, s.image.data, rtol=0, atol=1e-12)

    def test_saved_bytes_deterministic(self, tmp_path):
        a = save_dataset(make_dataset(4, 9), tmp_path / "a")
        b = save_dataset(make_dataset(4, 9), tmp_path / "b")
        for f in sorted(p.name for p in a.iterdir()):
            assert (a / f).read_bytes() == (b / f).read_bytes()
