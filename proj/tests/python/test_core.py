import itertools

import numpy as np
import pytest

import pkgnet


def pairwise_auroc(scores, labels):
    pos = [s for s, l in zip(scores, labels) if l]
    neg = [s for s, l in zip(scores, labels) if not l]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def test_auroc_matches_pairwise_count():
    rng = np.random.default_rng(0)
    for _ in range(20):
        scores = rng.integers(0, 5, size=30).astype(float)
        labels = rng.random(30) < 0.4
        labels[:2] = [False, True]
        assert pkgnet.auroc(scores, labels) == pytest.approx(pairwise_auroc(scores, labels), abs=1e-12)


def test_auroc_single_class_raises():
    with pytest.raises(pkgnet.PkgnetError, match="single-class"):
        pkgnet.auroc([0.1, 0.2], [0, 0])


def test_smooth_and_aggregate():
    assert pkgnet.smooth_series([1, 1, 9, 2], 3) == [1, 1, 2, 2]
    assert pkgnet.aggregate_frame([0.1, 0.9, 0.5], "max") == 0.9
    assert pkgnet.aggregate_frame([0.1, 0.9, 0.5], "top_k_mean:2") == pytest.approx(0.7)
    with pytest.raises(pkgnet.PkgnetError):
        pkgnet.smooth_series([1, 2], 2)


def test_combined_score():
    got = pkgnet.combined_score(2.0, {1: 0.4}, 1.0, 0.5, {1: 0.2}, {1: 0.1}, 0.5, {1: 0.5})
    assert got == pytest.approx(2.0)


def test_losses_against_numpy():
    rng = np.random.default_rng(1)
    p, t = rng.random((2, 5, 6)), rng.random((2, 5, 6))
    assert pkgnet.prediction_loss(p, t) == pytest.approx(np.mean((p - t) ** 2), abs=1e-12)

    def grad_diff(axis):
        return np.mean(np.abs(np.abs(np.diff(p, axis=axis)) - np.abs(np.diff(t, axis=axis))) ** 2)

    assert pkgnet.gradient_loss(p, t, 2) == pytest.approx(grad_diff(1) + grad_diff(2), abs=1e-12)

    s, f = rng.normal(size=(8, 3, 3)), rng.normal(size=(8, 3, 3))
    cos = (s * f).sum(0) / (np.linalg.norm(s, axis=0) * np.linalg.norm(f, axis=0))
    assert pkgnet.feature_inconsistency_loss([(s, f)]) == pytest.approx(np.mean(1 - cos), abs=1e-9)


def test_config_validation():
    cfg = pkgnet.default_config()
    cfg["train"]["epochs"] = 3
    assert pkgnet.validate_config(cfg)["train"]["epochs"] == 3
    cfg["train"]["batch_size"] = 0
    with pytest.raises(pkgnet.ConfigError, match="batch_size"):
        pkgnet.validate_config(cfg)
