import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from panodiff import metrics as mx
from panodiff.errors import NumericalError


class TestLrce:
    def test_identical_ends_zero(self):
        img = np.tile(np.arange(12.0).reshape(4, 1, 3), (1, 6, 1))
        assert mx.lrce([img]) == 0.0

    def test_extreme_ends(self):
        img = np.zeros((4, 6, 3))
        img[:, -1] = 255.0
        assert mx.lrce([img]) == 255.0

    def test_matches_double_loop(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0, 255, (4, 6, 3))
        total = 0.0
        for i in range(4):
            for c in range(3):
                total += abs(img[i, 0, c] - img[i, -1, c])
        assert mx.lrce([img]) == pytest.approx(total / 12.0, rel=1e-12)

    def test_mean_over_set(self):
        a = np.zeros((2, 4, 3))
        b = np.zeros((2, 4, 3))
        b[:, -1] = 10.0
        assert mx.lrce([a, b]) == 5.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            mx.lrce([])

    @given(seed=st.integers(0, 200))
    @settings(max_examples=25, deadline=None)
    def test_vertical_flip_invariant(self, seed):
        img = np.random.default_rng(seed).uniform(0, 255, (6, 8, 3))
        assert mx.lrce([img]) == pytest.approx(mx.lrce([img[::-1]]), rel=1e-12)

    @given(seed=st.integers(0, 200))
    @settings(max_examples=25, deadline=None)
    def test_wrap_padding_invariant(self, seed):
        # appending each end's content at the other end preserves the score
        img = np.random.default_rng(seed).uniform(0, 255, (6, 8, 3))
        padded = np.concatenate([img[:, -1:], img, img[:, :1]], axis=1)
        assert mx.lrce([padded]) == pytest.approx(mx.lrce([img]), rel=1e-12)


class TestDepthMetrics:
    def test_perfect_prediction(self):
        gt = np.random.default_rng(1).uniform(0.5, 5, (8, 8))
        rep = mx.depth_metrics(gt, gt)
        assert (rep.rmse, rep.mae, rep.absrel, rep.delta125) == (0, 0, 0, 1.0)

    def test_hand_oracle(self):
        rep = mx.depth_metrics(np.array([3.0, 2.0]), np.array([2.0, 4.0]))
        assert rep.rmse == pytest.approx(np.sqrt(2.5))
        assert rep.mae == pytest.approx(1.5)
        assert rep.absrel == pytest.approx(0.5)
        assert rep.delta125 == 0.0

    @given(scale=st.floats(0.1, 10))
    @settings(max_examples=25, deadline=None)
    def test_ratio_metrics_scale_invariant(self, scale):
        rng = np.random.default_rng(4)
        gt = rng.uniform(1, 5, 32)
        pred = gt * rng.uniform(0.8, 1.2, 32)
        a = mx.depth_metrics(pred, gt)
        b = mx.depth_metrics(pred * scale, gt * scale)
        assert a.absrel == pytest.approx(b.absrel, rel=1e-9)
        assert a.delta125 == b.delta125

    @given(c=st.floats(-2, 2))
    @settings(max_examples=25, deadline=None)
    def test_constant_offset_mae(self, c):
        gt = np.random.default_rng(5).uniform(3, 6, 16)
        rep = mx.depth_metrics(gt + c, gt)
        assert rep.mae == pytest.approx(abs(c), abs=1e-12)

    def test_valid_mask_applied(self):
        gt = np.array([[1.0, 1.0], [1.0, 1.0]])
        pred = np.array([[1.0, 9.0], [1.0, 9.0]])
        rep = mx.depth_metrics(pred, gt, valid=np.array([[1, 0], [1, 0]]))
        assert rep.mae == 0.0 and rep.n_valid == 2

    def test_empty_valid_rejected(self):
        with pytest.raises(ValueError):
            mx.depth_metrics(np.ones((2, 2)), np.ones((2, 2)), valid=np.zeros((2, 2)))

    def test_nonpositive_gt_excluded_with_count(self):
        gt = np.array([2.0, 0.0, 4.0])
        pred = np.array([2.0, 5.0, 4.0])
        rep = mx.depth_metrics(pred, gt)
        assert rep.n_excluded == 1
        assert rep.absrel == 0.0 and rep.delta125 == 1.0
        assert rep.mae == pytest.approx(5.0 / 3.0)


class TestFeatureExtractor:
    def test_deterministic(self):
        ex = mx.FeatureExtractor(seed=3)
        img = np.random.default_rng(0).uniform(0, 255, (32, 64, 3))
        a = mx.extract_features([img, img], ex)
        assert np.array_equal(a.features[0], a.features[1])
        b = mx.extract_features([img], ex)
        assert np.array_equal(a.features[0], b.features[0])

    def test_dim(self):
        ex = mx.FeatureExtractor(seed=0, dim=64)
        img = np.zeros((32, 64, 3))
        assert mx.extract_features([img], ex).features.shape == (1, 64)

    def test_distinct_images_distinct_features(self):
        ex = mx.FeatureExtractor(seed=1)
        rng = np.random.default_rng(2)
        imgs = [rng.uniform(0, 255, (16, 32, 3)) for _ in range(20)]
        feats = mx.extract_features(imgs, ex).features
        dists = np.linalg.norm(feats[:, None] - feats[None, :], axis=-1)
        np.fill_diagonal(dists, np.inf)
        assert dists.min() > 1e-6

    def test_size_mismatch_rejected(self):
        ex = mx.FeatureExtractor()
        with pytest.raises(ValueError):
            mx.extract_features([np.zeros((8, 16, 3)), np.zeros((16, 32, 3))], ex)


def _featureset(arr, name="test"):
    return mx.FeatureSet(np.asarray(arr, dtype=np.float64), name)


class TestFrechet:
    def test_self_distance_zero(self):
        rng = np.random.default_rng(0)
        a = _featureset(rng.normal(size=(50, 4)))
        assert mx.frechet_distance(a, a) <= 1e-6

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a = _featureset(rng.normal(size=(60, 5)))
        b = _featureset(rng.normal(loc=0.3, size=(60, 5)))
        assert abs(mx.frechet_distance(a, b) - mx.frechet_distance(b, a)) <= 1e-9

    def test_unit_gaussians_analytic(self):
        # N(0,1) vs N(1,1) in 1-d: squared Frechet distance is exactly 1
        rng = np.random.default_rng(2)
        a = _featureset(rng.normal(0, 1, size=(10000, 1)))
        b = _featureset(rng.normal(1, 1, size=(10000, 1)))
        assert mx.frechet_distance(a, b) == pytest.approx(1.0, abs=0.1)

    def test_degenerate_needs_shrinkage(self):
        rng = np.random.default_rng(3)
        small = _featureset(rng.normal(size=(4, 8)))
        other = _featureset(rng.normal(size=(4, 8)))
        with pytest.raises(NumericalError):
            mx.frechet_distance(small, other)
        assert mx.frechet_distance(small, other, shrinkage=0.2) >= 0.0

    def test_extractor_mismatch(self):
        a = _featureset(np.zeros((5, 2)), "ex-a")
        b = _featureset(np.zeros((5, 2)), "ex-b")
        with pytest.raises(ValueError):
            mx.frechet_distance(a, b)

    def test_nonnegative(self):
        rng = np.random.default_rng(4)
        a = _featureset(rng.normal(size=(30, 3)))
        b = _featureset(rng.normal(size=(30, 3)) * 0.999)
        assert mx.frechet_distance(a, b) >= 0.0


class TestDensityCoverage:
    def test_identical_sets_full_coverage(self):
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(20, 2))
        real, fake = _featureset(pts), _featureset(pts.copy())
        density, coverage = mx.density_coverage(real, fake, k=1)
        assert coverage == 1.0
        assert density >= 1.0

    def test_far_fake_scores_zero(self):
        rng = np.random.default_rng(1)
        real = _featureset(rng.normal(size=(20, 2)))
        fake = _featureset(rng.normal(size=(20, 2)) + 100.0)
        assert mx.density_coverage(real, fake, k=2) == (0.0, 0.0)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(2)
        real_pts = rng.normal(size=(10, 2))
        fake_pts = rng.normal(size=(10, 2))
        k = 2
        density, coverage = mx.density_coverage(_featureset(real_pts),
                                                _featureset(fake_pts), k)

        radii = []
        for i in range(10):
            dists = sorted(np.linalg.norm(real_pts[i] - real_pts[j]) for j in range(10) if j != i)
            radii.append(dists[k - 1])
        count = sum(np.linalg.norm(f - real_pts[i]) <= radii[i]
                    for f in fake_pts for i in range(10))
        covered = sum(any(np.linalg.norm(f - real_pts[i]) <= radii[i] for f in fake_pts)
                      for i in range(10))
        assert density == pytest.approx(count / (k * 10), rel=1e-12)
        assert coverage == pytest.approx(covered / 10, rel=1e-12)

    @given(seed=st.integers(0, 100))
    @settings(max_examples=15, deadline=None)
    def test_brute_force_equality_small_sets(self, seed):
        rng = np.random.default_rng(seed)
        n_real, n_fake = int(rng.integers(5, 50)), int(rng.integers(5, 50))
        real_pts = rng.normal(size=(n_real, 3))
        fake_pts = rng.normal(size=(n_fake, 3))
        k = int(rng.integers(1, min(n_real, 4)))
        density, coverage = mx.density_coverage(_featureset(real_pts),
                                                _featureset(fake_pts), k)
        radii = np.array([sorted(np.linalg.norm(real_pts[i] - real_pts[j])
                                 for j in range(n_real) if j != i)[k - 1]
                          for i in range(n_real)])
        inside = np.array([[np.linalg.norm(f - x) <= r for x, r in zip(real_pts, radii)]
                           for f in fake_pts])
        assert density == pytest.approx(inside.sum() / (k * n_fake), rel=1e-12)
        assert coverage == pytest.approx(inside.any(axis=0).mean(), rel=1e-12)

    def test_k_too_large(self):
        pts = _featureset(np.zeros((5, 2)))
        with pytest.raises(ValueError):
            mx.density_coverage(pts, pts, k=5)


class TestPsnr:
    def test_identical_infinite(self):
        assert mx.psnr(np.ones(4), np.ones(4)) == float("inf")

    def test_known_value(self):
        a, b = np.zeros(4), np.full(4, 0.2)
        assert mx.psnr(a, b, peak=2.0) == pytest.approx(20.0, abs=1e-9)
