import csv

import numpy as np
import pytest

from cyclegan3d.metrics import (ExternalFeatures, FeatureMatrix, MetricError, Moments, RandomProjection,
                                compare_volumes, embed, evaluate_translation, fid, kid, moments,
                                trace_sqrt_product, write_report)
from cyclegan3d.voldata import Volume, save_volume


def denman_beavers(a, iters=100):
    """Principal square root by the coupled Denman-Beavers iteration."""
    y, z = a.astype(np.float64), np.eye(len(a))
    for _ in range(iters):
        y, z = (y + np.linalg.inv(z)) / 2, (z + np.linalg.inv(y)) / 2
    return y


def random_psd(r, d):
    a = r.normal(size=(d, d + 3))
    return a @ a.T / d + 0.05 * np.eye(d)


def test_fid_of_identical_moments_is_zero():
    r = np.random.default_rng(0)
    m = moments(r.normal(size=(40, 16)))
    assert abs(fid(m, m)) <= 1e-8


def test_fid_mean_shift_example():
    a = Moments(np.zeros(2), np.eye(2))
    b = Moments(np.array([3.0, 4.0]), np.eye(2))
    assert fid(a, b) == pytest.approx(25.0, abs=1e-8)


def test_fid_equal_covariance_is_mean_distance():
    r = np.random.default_rng(1)
    c = random_psd(r, 6)
    mu1, mu2 = r.normal(size=6), r.normal(size=6)
    assert fid(Moments(mu1, c), Moments(mu2, c)) == pytest.approx(np.sum((mu1 - mu2) ** 2), abs=1e-8)


def test_trace_sqrt_matches_denman_beavers_on_50_pairs():
    r = np.random.default_rng(2)
    for k in range(50):
        d = int(r.integers(2, 33))
        sr, sg = random_psd(r, d), random_psd(r, d)
        oracle = np.trace(denman_beavers(sr @ sg))
        assert abs(trace_sqrt_product(sr, sg) - oracle) <= 1e-8 * max(1.0, abs(oracle)), (k, d)


def test_fid_against_oracle_formula():
    r = np.random.default_rng(3)
    for _ in range(10):
        d = 8
        mr, mg = Moments(r.normal(size=d), random_psd(r, d)), Moments(r.normal(size=d), random_psd(r, d))
        oracle = (np.sum((mr.mean - mg.mean) ** 2) + np.trace(mr.cov + mg.cov)
                  - 2 * np.trace(denman_beavers(mr.cov @ mg.cov)))
        assert fid(mr, mg) == pytest.approx(oracle, abs=1e-8)
        assert fid(mr, mg) == pytest.approx(fid(mg, mr), abs=1e-8)


def test_fid_rejects_bad_input():
    with pytest.raises(MetricError, match="symmetric"):
        fid(Moments(np.zeros(2), np.array([[1.0, 0.5], [0.0, 1.0]])), Moments(np.zeros(2), np.eye(2)))
    with pytest.raises(MetricError, match="dims"):
        fid(Moments(np.zeros(2), np.eye(2)), Moments(np.zeros(3), np.eye(3)))


def brute_kid(x, y):
    k = lambda a, b: (np.dot(a, b) / len(a) + 1) ** 3
    m, n = len(x), len(y)
    sxx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j)
    syy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j)
    sxy = sum(k(x[i], y[j]) for i in range(m) for j in range(n))
    return sxx / (m * (m - 1)) + syy / (n * (n - 1)) - 2 * sxy / (m * n)


def test_kid_hand_fixture():
    x = np.array([[0.0], [2.0]])
    assert kid(x, x) == pytest.approx(-62.0, abs=1e-12)
    assert brute_kid(x, x) == -62.0


def test_kid_matches_brute_force_on_100_fixtures():
    r = np.random.default_rng(4)
    for _ in range(100):
        m, n, d = (int(v) for v in r.integers(2, 12, size=3))
        x, y = r.normal(size=(m, d)), r.normal(0.3, 1.2, size=(n, d))
        assert kid(x, y) == pytest.approx(brute_kid(x, y), abs=1e-10)


def test_kid_degenerate_and_near_zero():
    r = np.random.default_rng(5)
    assert kid(np.zeros((4, 3)), np.zeros((5, 3))) == 0.0
    x, y = r.normal(size=(500, 16)), r.normal(size=(500, 16))
    assert abs(kid(x, y)) < 0.01
    with pytest.raises(MetricError):
        kid(x[:1], y)


def test_moments_examples():
    m = moments(np.array([[0.0, 0.0], [2.0, 2.0]]))
    np.testing.assert_array_equal(m.mean, [1, 1])
    np.testing.assert_array_equal(m.cov, [[2, 2], [2, 2]])
    assert np.all(moments(np.ones((5, 3))).cov == 0)
    with pytest.raises(MetricError):
        moments(np.ones((1, 3)))


def test_moments_two_pass_oracle():
    x = np.random.default_rng(6).normal(3, 2, size=(37, 9))
    n = len(x)
    mu = [sum(x[:, j]) / n for j in range(9)]
    cov = np.array([[sum((x[i, a] - mu[a]) * (x[i, b] - mu[b]) for i in range(n)) / (n - 1)
                     for b in range(9)] for a in range(9)])
    m = moments(FeatureMatrix(x))
    np.testing.assert_allclose(m.mean, mu, rtol=0, atol=1e-12)
    np.testing.assert_allclose(m.cov, cov, rtol=0, atol=1e-12)


def test_feature_matrix_validation():
    with pytest.raises(MetricError):
        FeatureMatrix(np.zeros(3))
    with pytest.raises(MetricError, match="non-finite"):
        FeatureMatrix(np.array([[np.nan]]))


def test_projection_properties():
    r = np.random.default_rng(7)
    vols = [r.uniform(-1, 1, (1, 3, 8, 8)).astype(np.float32) for _ in range(4)]
    a, b = RandomProjection(96, 1)(vols), RandomProjection(96, 1)(vols)
    np.testing.assert_array_equal(a.values, b.values)
    assert not np.array_equal(a.values, RandomProjection(96, 2)(vols).values)
    np.testing.assert_array_equal(RandomProjection(32, 1)(vols).values, a.values[:, :32])
    assert np.all(RandomProjection(16)([np.zeros((1, 2, 4, 4))]).values == 0)


def test_projection_distance_distortion():
    # E|Px|^2 = d |x|^2 / n_vox, so scaled pairwise distances concentrate near 1
    r = np.random.default_rng(8)
    d = 768
    vols = [r.uniform(-1, 1, (1, 3, 16, 16)).astype(np.float32) for _ in range(100)]
    f = RandomProjection(d, 0)(vols).values
    x = np.stack([v.ravel().astype(np.float64) for v in vols])
    n_vox = x.shape[1]
    ratios = []
    for i in range(100):
        for j in range(i + 1, 100):
            ratios.append(np.sum((f[i] - f[j]) ** 2) / (d * np.sum((x[i] - x[j]) ** 2) / n_vox))
    ratios = np.array(ratios)
    # JL: with d = 768, eps = 0.25 bounds all 4950 pairs with high probability
    assert np.all(np.abs(ratios - 1) < 0.25)
    assert abs(ratios.mean() - 1) < 0.02


def _vols(seed, n, modality="confocal", shape=(2, 8, 8)):
    r = np.random.default_rng(seed)
    c = 3 if modality == "confocal" else 1
    return [Volume(r.uniform(-1, 1, (c,) + shape).astype(np.float32), modality, f"v{i}") for i in range(n)]


def test_compare_volumes_report_and_errors(tmp_path):
    real, gen = _vols(0, 5), _vols(1, 5)
    rep = compare_volumes(real, gen, dims=(16, 32), method="m", scenario="s")
    assert rep.header() == ["method", "scenario", "fid16", "fid32", "kid"]
    assert all(v >= 0 for v in rep.fids.values())
    same = compare_volumes(real, real, dims=(16,))
    assert same.fids[16] <= 1e-8
    write_report(tmp_path / "r.csv", [rep])
    rows = list(csv.reader(open(tmp_path / "r.csv")))
    assert rows[0] == rep.header() and rows[1][:2] == ["m", "s"]
    with pytest.raises(MetricError, match=">= 2"):
        compare_volumes(real[:1], gen, dims=(16,))
    with pytest.raises(MetricError, match="shape"):
        compare_volumes(real, _vols(2, 3, shape=(2, 8, 4)), dims=(16,))


def test_external_features(tmp_path):
    real, gen = _vols(0, 3), _vols(1, 3)
    r = np.random.default_rng(9)
    rows = {f"real/{v.name}": r.normal(size=4) for v in real}
    rows.update({f"generated/{v.name}": r.normal(size=4) + 1 for v in gen})
    path = tmp_path / "f.csv"
    with open(path, "w") as f:
        f.write("id," + ",".join(f"f{i}" for i in range(4)) + "\n")
        for k, v in rows.items():
            f.write(k + "," + ",".join(repr(float(a)) for a in v) + "\n")
    ext = ExternalFeatures(str(path))
    rep = compare_volumes(real, gen, external=ext)
    fr = np.stack([rows[f"real/{v.name}"] for v in real])
    fg = np.stack([rows[f"generated/{v.name}"] for v in gen])
    assert rep.fids[4] == pytest.approx(fid(moments(fr), moments(fg)), abs=1e-12)
    assert rep.kid == pytest.approx(kid(fr, fg), abs=1e-12)
    with pytest.raises(MetricError, match="no features"):
        ext.lookup(["real/zzz"])
    with pytest.raises(MetricError, match="4-dimensional"):
        ExternalFeatures(str(path), dim=8)


def test_evaluate_translation_dirs(tmp_path):
    for sub, seed in (("real", 0), ("gen", 1)):
        (tmp_path / sub).mkdir()
        for v in _vols(seed, 3, shape=(2, 12, 12)):
            save_volume(tmp_path / sub / f"{v.name}.vvf", v)
    rep = evaluate_translation(str(tmp_path / "real"), str(tmp_path / "real"), dims=(8, 16))
    assert max(rep.fids.values()) <= 1e-8
    rep = evaluate_translation(str(tmp_path / "real"), str(tmp_path / "gen"), dims=(8,))
    assert rep.method == "gen" and rep.fids[8] > 0
    with pytest.raises(MetricError, match="embedder"):
        evaluate_translation(str(tmp_path / "real"), str(tmp_path / "gen"), embedder="inception")


def test_embed_rejects_mixed_shapes():
    with pytest.raises(MetricError):
        embed([np.zeros((1, 2, 2, 2)), np.zeros((1, 2, 2, 3))], RandomProjection(4))
    with pytest.raises(MetricError):
        embed([], RandomProjection(4))
