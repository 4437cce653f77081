import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cigan.metrics import (
    GaussianSummary,
    attribute_match,
    fid,
    inception_score,
    median_bandwidth,
    mmd2,
    project_latents,
    psnr,
    summarize_features,
)


def brute_force_is(p, splits):
    """Direct KL summation, independent of the vectorized implementation."""
    n = p.shape[0] // splits
    scores = []
    for s in range(splits):
        block = p[s * n:(s + 1) * n]
        marginal = block.mean(axis=0)
        total = 0.0
        for row in block:
            for j in range(p.shape[1]):
                if row[j] > 0:
                    total += row[j] * (math.log(row[j]) - math.log(marginal[j]))
        scores.append(math.exp(total / n))
    return float(np.mean(scores)), float(np.std(scores))


class TestInceptionScore:
    def test_uniform_rows_give_one(self):
        p = np.full((40, 5), 0.2)
        mean, std = inception_score(p, splits=4)
        assert abs(mean - 1.0) < 1e-12
        assert std < 1e-12

    def test_one_hot_uniform_coverage_gives_k(self):
        k = 4
        p = np.eye(k)[np.tile(np.arange(k), 10)]
        mean, _ = inception_score(p, splits=1)
        assert abs(mean - k) < 1e-9

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        p = rng.dirichlet(np.ones(3), size=20)
        got = inception_score(p, splits=1)
        want = brute_force_is(p, 1)
        assert abs(got[0] - want[0]) < 1e-10

    def test_bounds(self):
        rng = np.random.default_rng(1)
        p = rng.dirichlet(np.ones(6), size=60)
        mean, _ = inception_score(p, splits=6)
        assert 1.0 - 1e-9 <= mean <= 6.0 + 1e-9

    def test_rejects_bad_rows(self):
        with pytest.raises(ValueError):
            inception_score(np.array([[0.5, 0.4]]), splits=1)
        with pytest.raises(ValueError):
            inception_score(np.full((10, 2), 0.5), splits=3)


class TestFid:
    def test_identical_summaries(self):
        rng = np.random.default_rng(2)
        s = summarize_features(rng.normal(size=(50, 4)))
        assert abs(fid(s, s)) < 1e-8

    def test_one_dimensional_analytic(self):
        a = GaussianSummary(np.array([0.0]), np.array([[1.0]]))
        b = GaussianSummary(np.array([1.0]), np.array([[1.0]]))
        assert abs(fid(a, b) - 1.0) < 1e-10

    def test_diagonal_matches_coordinatewise(self):
        # for commuting covariances the distance decomposes per coordinate
        mu1, mu2 = np.array([0.0, 1.0]), np.array([2.0, -1.0])
        v1, v2 = np.array([1.0, 4.0]), np.array([2.0, 1.0])
        a = GaussianSummary(mu1, np.diag(v1))
        b = GaussianSummary(mu2, np.diag(v2))
        want = sum((mu1[i] - mu2[i]) ** 2 + (math.sqrt(v1[i]) - math.sqrt(v2[i])) ** 2
                   for i in range(2))
        assert abs(fid(a, b) - want) < 1e-8

    def test_symmetry_and_nonnegativity(self):
        rng = np.random.default_rng(3)
        a = summarize_features(rng.normal(size=(60, 5)))
        b = summarize_features(rng.normal(loc=0.3, size=(60, 5)))
        d1, d2 = fid(a, b), fid(b, a)
        assert abs(d1 - d2) < 1e-8
        assert d1 >= -1e-6

    def test_dimension_mismatch(self):
        a = GaussianSummary(np.zeros(2), np.eye(2))
        b = GaussianSummary(np.zeros(3), np.eye(3))
        with pytest.raises(ValueError):
            fid(a, b)

    def test_non_psd_rejected(self):
        with pytest.raises(ValueError):
            GaussianSummary(np.zeros(2), np.array([[1.0, 0.0], [0.0, -0.5]]))


class TestSummarize:
    def test_two_point_sample(self):
        s = summarize_features(np.array([[0.0, 0.0], [2.0, 2.0]]))
        assert np.allclose(s.mean, [1.0, 1.0])
        assert np.allclose(s.cov, [[2.0, 2.0], [2.0, 2.0]])

    def test_constant_rows(self):
        s = summarize_features(np.full((10, 3), 1.5))
        assert np.allclose(s.cov, 0.0)

    def test_matches_double_loop(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(100, 5))
        s = summarize_features(x)
        mean = x.mean(axis=0)
        cov = np.zeros((5, 5))
        for row in x:
            d = row - mean
            cov += np.outer(d, d)
        cov /= 99
        assert np.allclose(s.cov, cov, atol=1e-10)

    def test_too_few_rows(self):
        with pytest.raises(ValueError):
            summarize_features(np.zeros((1, 3)))


class TestMmd:
    def test_identical_multisets(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(8, 3))
        assert abs(mmd2(x, x.copy(), bandwidth=1.3)) < 1e-12

    def test_singleton_closed_form(self):
        got = mmd2(np.array([[0.0]]), np.array([[1.0]]), bandwidth=1.0)
        assert abs(got - 2.0 * (1.0 - math.exp(-0.5))) < 1e-12

    def test_matches_triple_sum(self):
        rng = np.random.default_rng(6)
        x, y = rng.normal(size=(10, 4)), rng.normal(loc=0.5, size=(10, 4))
        sigma = 0.9

        def k(u, v):
            return math.exp(-float(np.sum((u - v) ** 2)) / (2 * sigma ** 2))

        xx = np.mean([[k(u, v) for v in x] for u in x])
        yy = np.mean([[k(u, v) for v in y] for u in y])
        xy = np.mean([[k(u, v) for v in y] for u in x])
        assert abs(mmd2(x, y, sigma) - (xx + yy - 2 * xy)) < 1e-12

    def test_invalid_bandwidth(self):
        with pytest.raises(ValueError):
            mmd2(np.zeros((2, 2)), np.ones((2, 2)), bandwidth=0.0)

    @given(arrays(np.float64, (6, 3), elements=st.floats(-5, 5)))
    @settings(max_examples=30, deadline=None)
    def test_nonnegative(self, x):
        assert mmd2(x, x[::-1], bandwidth=1.0) >= -1e-12

    def test_median_bandwidth_positive(self):
        rng = np.random.default_rng(7)
        assert median_bandwidth(rng.normal(size=(5, 2)), rng.normal(size=(5, 2))) > 0


class TestPsnr:
    def test_identical_capped(self):
        x = np.linspace(-1, 1, 12).reshape(3, 2, 2)
        assert psnr(x, x.copy()) == 100.0

    def test_analytic(self):
        x = np.zeros((3, 4, 4))
        y = np.full((3, 4, 4), 0.2)  # MSE = 0.04
        assert abs(psnr(x, y, data_range=2.0) - 20.0) < 1e-10

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(8)
        x, y = rng.uniform(-1, 1, (3, 8, 8)), rng.uniform(-1, 1, (3, 8, 8))
        mse = np.mean((x - y) ** 2)
        assert abs(psnr(x, y) - 10 * math.log10(4.0 / mse)) < 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((3, 2, 2)), np.zeros((3, 2, 3)))


class TestAttributeMatch:
    def test_self_consistency(self):
        rng = np.random.default_rng(9)
        labels = np.stack([rng.integers(0, k, size=50) for k in (3, 4, 2, 2)], axis=1)
        acc = attribute_match(labels, labels.copy())
        assert all(acc[h] == 1.0 for h in ("shape", "color", "size", "background", "overall"))

    def test_shuffled_targets_near_chance(self):
        rng = np.random.default_rng(10)
        n = 1000
        labels = np.stack([rng.integers(0, k, size=n) for k in (3, 4, 2, 2)], axis=1)
        shuffled = labels[rng.permutation(n)]
        acc = attribute_match(labels, shuffled)
        for head, chance in (("shape", 1 / 3), ("color", 1 / 4), ("size", 1 / 2), ("background", 1 / 2)):
            assert abs(acc[head] - chance) < 0.1

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            attribute_match(np.zeros((0, 4)), np.zeros((0, 4)))


class TestProjection:
    def test_planar_points_preserve_distances(self):
        rng = np.random.default_rng(11)
        basis = np.linalg.qr(rng.normal(size=(6, 2)))[0]
        plane = rng.normal(size=(20, 2))
        points = plane @ basis.T + 3.0
        ca, cb = project_latents(points[:10], points[10:])
        coords = np.concatenate([ca, cb])
        orig = np.linalg.norm(points[:, None] - points[None, :], axis=-1)
        proj = np.linalg.norm(coords[:, None] - coords[None, :], axis=-1)
        assert np.allclose(orig, proj, atol=1e-8)

    def test_duplicated_set_identical_coords(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(15, 4))
        ca, cb = project_latents(x, x.copy())
        assert np.allclose(ca, cb, atol=1e-12)

    def test_reconstruction_error_equals_trailing_eigenvalues(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(50, 6)) * np.array([3.0, 2.0, 1.0, 0.5, 0.2, 0.1])
        ca, cb = project_latents(x[:25], x[25:])
        coords = np.concatenate([ca, cb])
        centered = x - x.mean(axis=0)
        # independent eigendecomposition oracle
        eigval = np.sort(np.linalg.eigvalsh(np.cov(centered.T)))[::-1]
        residual = (centered ** 2).sum() - (coords ** 2).sum()
        assert abs(residual - eigval[2:].sum() * (len(x) - 1)) < 1e-8

    def test_degenerate_rank_one(self):
        line = np.outer(np.arange(10, dtype=float), np.array([1.0, 2.0]))
        ca, cb = project_latents(line[:5], line[5:])
        assert np.allclose(np.concatenate([ca, cb])[:, 1], 0.0)

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            project_latents(np.zeros((1, 2)), np.zeros((1, 2)))
