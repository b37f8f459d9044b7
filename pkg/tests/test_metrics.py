import itertools
import math

import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st

from lanit.errors import ConfigError, InputError
from lanit.metrics import FeatureSet, accuracy, density_coverage, f1_multihot, fid, mfid


def fid_oracle(a, b):
    """Textbook formula with a general (non-symmetric) matrix square root."""
    mu1, mu2 = a.mean(0), b.mean(0)
    s1 = np.cov(a, rowvar=False) + 1e-6 * np.eye(a.shape[1])
    s2 = np.cov(b, rowvar=False) + 1e-6 * np.eye(a.shape[1])
    cross = scipy.linalg.sqrtm(s1 @ s2).real
    return float(((mu1 - mu2) ** 2).sum() + np.trace(s1 + s2 - 2 * cross))


def dc_oracle(real, fake, k):
    n = len(real)
    radius = []
    for i in range(n):
        ds = sorted(math.dist(real[i], real[j]) for j in range(n) if j != i)
        radius.append(ds[k - 1])
    inside = [[math.dist(real[i], f) < radius[i] for f in fake] for i in range(n)]
    density = sum(sum(inside[i][j] for i in range(n)) for j in range(len(fake))) / (k * len(fake))
    coverage = sum(any(row) for row in inside) / n
    return density, coverage


def test_fid_identity_and_symmetry():
    x = np.random.default_rng(0).normal(size=(200, 6))
    y = np.random.default_rng(1).normal(size=(150, 6)) + 0.5
    assert fid(x, x) <= 1e-6
    assert fid(x, y) == pytest.approx(fid(y, x), rel=1e-9)
    assert fid(x, y) > 0


def test_fid_closed_form_identity_covariance():
    rng = np.random.default_rng(2)
    mu = np.array([1.0, -2.0, 0.5, 0.0])
    a = rng.normal(size=(10000, 4))
    b = rng.normal(size=(10000, 4)) + mu
    assert abs(fid(a, b) - mu @ mu) / (mu @ mu) < 0.05


def test_fid_matches_oracle_small_samples():
    rng = np.random.default_rng(3)
    for _ in range(5):
        a = rng.normal(size=(12, 5))
        b = rng.normal(size=(9, 5)) * 1.5 + 0.3
        assert abs(fid(a, b) - fid_oracle(a, b)) < 1e-6


def test_fid_singular_covariance_is_finite():
    a = np.random.default_rng(4).normal(size=(3, 10))  # rank-deficient
    assert math.isfinite(fid(a, a + 1.0))


def test_fid_errors():
    with pytest.raises(InputError):
        fid(np.ones((1, 3)), np.ones((5, 3)))
    with pytest.raises(InputError):
        FeatureSet(np.array([[np.nan, 1.0]]))


def test_mfid():
    x = np.random.default_rng(5).normal(size=(30, 3))
    assert mfid([x, x], [x, x])[0] <= 1e-6
    a0, a1 = np.zeros((4, 1)), np.zeros((4, 1))
    a0[:2] = 1
    a1[:2] = 1
    # mean shift sqrt(2) and 2 (FID 2 and 4) with identical spread
    m, per = mfid([a0 + math.sqrt(2), a1 + 2], [a0, a1])
    assert per == pytest.approx([2, 4], abs=1e-6)
    assert m == pytest.approx(3, abs=1e-6)


def test_density_coverage_self_and_far():
    x = np.random.default_rng(6).normal(size=(50, 3))
    d, c = density_coverage(x, x, 5)
    assert c == 1.0 and d >= 1 - 1 / 5
    assert density_coverage(x, x + 100, 5) == (0.0, 0.0)
    with pytest.raises(ConfigError):
        density_coverage(x[:5], x, 5)


def test_density_coverage_matches_oracle():
    rng = np.random.default_rng(7)
    for _ in range(10):
        real, fake = rng.normal(size=(20, 2)), rng.normal(size=(20, 2)) * 1.3
        for k in (1, 3, 5):
            assert density_coverage(real, fake, k) == dc_oracle(real.tolist(), fake.tolist(), k)


def test_coverage_monotone_in_k():
    rng = np.random.default_rng(8)
    real, fake = rng.normal(size=(40, 3)), rng.normal(size=(30, 3)) + 0.7
    cov = [density_coverage(real, fake, k)[1] for k in range(1, 10)]
    assert all(a <= b for a, b in zip(cov, cov[1:]))


def test_accuracy_examples():
    pred = [[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]]
    assert accuracy(pred, [0, 1, 0, 1]) == 1.0
    assert accuracy(pred, [1, 0, 1, 0]) == 0.0
    assert accuracy(pred, [0, 1, 0, 0]) == 0.75
    assert accuracy(pred, [[1, 0], [0, 1], [1, 0], [1, 0]]) == 0.75
    assert accuracy([[0.1, 0.5, 0.4]], [[1, 0, 1]], any_match=True) == 0.0
    with pytest.raises(InputError):
        accuracy([[0.1, 0.5, 0.4]], [[1, 1, 0]])


def test_f1_examples():
    gt = [[1, 0, 1], [0, 1, 1]]
    assert f1_multihot(gt, gt) == 1.0
    assert f1_multihot([[0, 1, 0], [1, 0, 0]], gt) == 0.0
    assert f1_multihot([[1], [1], [0]], [[1], [0], [1]]) == pytest.approx(0.5)
    # an absent, never-predicted domain contributes 0
    assert f1_multihot([[1, 0]], [[1, 0]]) == 0.5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_f1_and_accuracy_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pred = rng.integers(0, 2, (10, 4))
    gt = rng.integers(0, 2, (10, 4))
    scores = rng.uniform(size=(10, 4))
    cls = rng.integers(0, 4, 10)
    perm = rng.permutation(4)
    inv = np.argsort(perm)
    assert f1_multihot(pred[:, perm], gt[:, perm]) == pytest.approx(f1_multihot(pred, gt))
    assert accuracy(scores[:, perm], inv[cls]) == accuracy(scores, cls)
