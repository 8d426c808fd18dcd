import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from forgeloc.autodiff import DimensionError
from forgeloc.datagen import make_dataset
from forgeloc.imgproc import Distortion
from forgeloc.metrics import (SingleClassError, confusion, evaluate, f1_score, iou, pixel_auc,
                              resize_mask, score_image, write_report)

from oracles import auc_pairs

masks = arrays(np.float64, (6, 6), elements=st.sampled_from([0.0, 1.0]))


def two_class(gt):
    return 0 < gt.sum() < gt.size


class OracleModel:
    """Returns the ground truth of whichever sample image it is shown."""

    def __init__(self, dataset):
        self.lookup = {s.image.data.tobytes(): s.mask for s in dataset}

    def predict(self, image):
        return self.lookup[image.data.tobytes()]


class ConstantModel:
    def predict(self, image):
        return np.full((image.height // 2, image.width // 2), 0.5)


class TestAuc:
    def test_perfect_and_inverted(self):
        gt = np.array([[0, 1], [1, 0]], dtype=float)
        assert pixel_auc(gt, gt) == 1.0
        assert pixel_auc(1 - gt, gt) == 0.0

    def test_constant_prediction(self):
        gt = (np.random.default_rng(0).random((5, 5)) > 0.5) * 1.0
        assert pixel_auc(np.full((5, 5), 0.3), gt) == 0.5

    @pytest.mark.parametrize("seed", range(10))
    def test_matches_pair_oracle(self, seed):
        r = np.random.default_rng(seed)
        gt = (r.random((6, 6)) > 0.6) * 1.0
        pred = np.round(r.random((6, 6)), 1)  # coarse values force ties
        assert pixel_auc(pred, gt) == pytest.approx(auc_pairs(pred, gt), abs=1e-12)

    def test_single_class_raises(self):
        with pytest.raises(SingleClassError):
            pixel_auc(np.random.default_rng(0).random((3, 3)), np.zeros((3, 3)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            pixel_auc(np.zeros((2, 2)), np.zeros((3, 3)))

    @settings(max_examples=60, deadline=None)
    # a coarse grid keeps every transform strictly increasing in floating point too
    @given(arrays(np.float64, (6, 6), elements=st.integers(-40, 40).map(lambda k: k / 8)), masks,
           st.sampled_from([np.exp, np.arctan, lambda v: v ** 3 + 2 * v, lambda v: 1 / (1 + np.exp(-v))]))
    def test_monotone_invariance(self, pred, gt, f):
        if not two_class(gt):
            return
        assert pixel_auc(f(pred), gt) == pixel_auc(pred, gt)


class TestF1Iou:
    def test_perfect(self):
        gt = np.eye(4)
        assert f1_score(gt, gt) == 1.0 and iou(gt, gt) == 1.0

    def test_empty_prediction(self):
        gt = np.eye(4)
        assert f1_score(np.zeros((4, 4)), gt) == 0.0 and iou(np.zeros((4, 4)), gt) == 0.0

    def test_empty_empty(self):
        z = np.zeros((3, 3))
        assert f1_score(z, z) == 1.0 and iou(z, z) == 1.0

    def test_two_of_four(self):
        gt = np.array([1.0, 1.0, 0.0, 0.0])
        pred = np.array([1.0, 1.0, 1.0, 1.0])
        assert confusion(pred, gt) == (2, 2, 0)
        assert f1_score(pred, gt) == pytest.approx(2 / 3, abs=1e-15)

    def test_shifted_block(self):
        gt = np.zeros((4, 4))
        gt[1:3, 1:3] = 1
        pred = np.zeros((4, 4))
        pred[1:3, 2:4] = 1
        assert iou(pred, gt) == pytest.approx(1 / 3, abs=1e-15)

    def test_disjoint(self):
        gt = np.zeros((4, 4))
        gt[0, 0] = 1
        pred = np.zeros((4, 4))
        pred[3, 3] = 1
        assert iou(pred, gt) == 0.0

    def test_threshold_inclusive(self):
        assert confusion(np.array([0.5, 0.4999]), np.array([1.0, 1.0])) == (1, 0, 1)

    @settings(max_examples=100, deadline=None)
    @given(masks, masks)
    def test_f1_iou_identity(self, pred, gt):
        f, j = f1_score(pred, gt), iou(pred, gt)
        assert f >= j
        assert f == pytest.approx(2 * j / (1 + j), abs=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(masks, arrays(np.float64, (6, 6), elements=st.floats(0, 1)), st.integers(0, 1000))
    def test_pixel_permutation_invariance(self, gt, pred, seed):
        perm = np.random.default_rng(seed).permutation(36)
        p2, g2 = pred.ravel()[perm], gt.ravel()[perm]
        assert f1_score(p2, g2) == f1_score(pred, gt)
        assert iou(p2, g2) == iou(pred, gt)


class TestResize:
    def test_identity_when_same_size(self):
        m = np.random.default_rng(0).random((4, 4))
        assert resize_mask(m, 4, 4) is m

    def test_constant_stays_constant(self):
        np.testing.assert_allclose(resize_mask(np.full((3, 5), 0.25), 12, 20), 0.25, rtol=0, atol=1e-15)

    def test_score_image_upsamples(self):
        gt = np.zeros((8, 8))
        gt[:4] = 1
        rec = score_image(gt[::2, ::2], gt)
        assert rec.auc == 1.0 and rec.area_fraction == 0.5


@pytest.fixture(scope="module")
def data():
    return make_dataset(8, 21)


class TestEvaluate:
    def test_oracle_model_scores_one(self, data):
        agg = evaluate(OracleModel(data), data).aggregate()
        assert (agg.auc, agg.f1, agg.iou) == (1.0, 1.0, 1.0)
        assert agg.excluded == sum(s.spec.forgery == "authentic" for s in data)

    def test_constant_model(self, data):
        report = evaluate(ConstantModel(), data)
        for r in report.records:
            assert math.isnan(r.auc) if r.forgery == "authentic" else r.auc == 0.5

    def test_tsv_means_recompute(self, data, tmp_path):
        rng = np.random.default_rng(0)

        class Noisy:
            def predict(self, image):
                return rng.random((32, 32))

        report = evaluate(Noisy(), data, [Distortion("blur", 3)])
        _, summary_path = write_report(report, tmp_path)
        with open(tmp_path / "report.tsv") as fh:
            rows = list(csv.DictReader(fh, delimiter="\t"))
        with open(summary_path) as fh:
            summary = list(csv.DictReader(fh, delimiter="\t"))
        for tag in ("none", "blur:3"):
            used = [r for r in rows if r["distortion"] == tag and r["auc"] != "nan"]
            row = next(s for s in summary if s["distortion"] == tag and s["scope"] == "all")
            assert int(row["n"]) == len(used)
            for key in ("auc", "f1", "iou"):
                assert float(row[key]) == pytest.approx(np.mean([float(r[key]) for r in used]), abs=1e-12)
        assert {s["scope"] for s in summary} == {"all", "<0.01", "<0.05", "<0.1"}

    def test_threads_give_same_report(self, data):
        class Deterministic:
            def predict(self, image):
                return image.data[::2, ::2, 0]

        a = evaluate(Deterministic(), data, [Distortion("noise", 3)], threads=1)
        b = evaluate(Deterministic(), data, [Distortion("noise", 3)], threads=3)
        assert [(r.idx, r.distortion, r.auc, r.f1) for r in a.records] == \
               [(r.idx, r.distortion, r.auc, r.f1) for r in b.records]

    def test_pooled_mode(self, data):
        report = evaluate(OracleModel(data), data, pooled=True)
        agg = report.aggregate()
        assert agg.auc == 1.0 and agg.f1 == 1.0

    def test_pooled_differs_from_per_image(self, data):
        class Biased:
            def predict(self, image):
                return image.data[::2, ::2, 1]

        a = evaluate(Biased(), data).aggregate()
        b = evaluate(Biased(), data, pooled=True).aggregate()
        assert a.n == b.n and a.auc != b.auc
