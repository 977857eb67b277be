"""Distribution metrics over feature embeddings: FID and KID.

Features come from a pluggable embedder.  The built-in one is a seeded
Gaussian random projection of the flattened volume; precomputed features
from any external network can be read from CSV instead.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .rng import Rng
from .voldata import list_volumes, load_volume

PROJECTION_BLOCK = 64


class MetricError(ValueError):
    pass


@dataclass
class FeatureMatrix:
    values: np.ndarray
    ids: tuple = ()
    provenance: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise MetricError(f"features must be 2-D (n, d), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise MetricError("features contain non-finite entries")

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def d(self):
        return self.values.shape[1]


@dataclass
class Moments:
    mean: np.ndarray
    cov: np.ndarray


# ---------------------------------------------------------------- embedders

class RandomProjection:
    """x -> P x / sqrt(n_voxels) with P ~ N(0, 1)^(d x n_voxels) fixed by ``seed``.

    P is regenerated block by block on every call instead of being stored; a
    block depends only on (seed, n_voxels, block index), so the first rows of
    a wide projection equal those of a narrower one.
    """

    def __init__(self, d, seed=0):
        if d < 1:
            raise MetricError("projection dimension must be >= 1")
        self.d = int(d)
        self.seed = int(seed)

    def __call__(self, arrays, ids=()):
        x = np.stack([np.asarray(a, dtype=np.float32).ravel() for a in arrays])
        n_vox = x.shape[1]
        out = np.empty((x.shape[0], self.d), dtype=np.float64)
        root = Rng(self.seed).spawn("projection", n_vox)
        for start in range(0, self.d, PROJECTION_BLOCK):
            rows = min(PROJECTION_BLOCK, self.d - start)
            block = root.spawn(start // PROJECTION_BLOCK).generator.standard_normal(
                (PROJECTION_BLOCK, n_vox), dtype=np.float32)[:rows]
            out[:, start:start + rows] = x @ block.T
        out /= np.sqrt(n_vox)
        return FeatureMatrix(out, tuple(ids), f"random_projection(seed={self.seed},d={self.d})")


def read_feature_csv(path):
    """Rows of ``id,f0,...,f{d-1}`` -> (ids, array)."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[0] != "id":
            raise MetricError(f"{path}: header must start with 'id'")
        d = len(header) - 1
        if header[1:] != [f"f{i}" for i in range(d)]:
            raise MetricError(f"{path}: feature columns must be f0..f{d - 1}")
        ids, rows = [], []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != d + 1:
                raise MetricError(f"{path}:{lineno}: expected {d} features, got {len(row) - 1}")
            ids.append(row[0])
            rows.append([float(v) for v in row[1:]])
    return ids, np.asarray(rows, dtype=np.float64).reshape(len(rows), d)


class ExternalFeatures:
    """Look features up by id in a precomputed CSV."""

    def __init__(self, path, dim=None):
        self.path = path
        self.ids, self.table = read_feature_csv(path)
        self.index = {k: i for i, k in enumerate(self.ids)}
        self.d = self.table.shape[1]
        if dim is not None and dim != self.d:
            raise MetricError(f"{path}: features are {self.d}-dimensional, {dim} requested")

    def lookup(self, ids):
        missing = [i for i in ids if i not in self.index]
        if missing:
            raise MetricError(f"{self.path}: no features for {missing[:3]}")
        return FeatureMatrix(self.table[[self.index[i] for i in ids]], tuple(ids), f"external({self.path})")


def embed(volumes, embedder):
    """Embed a nonempty list of :class:`Volume` (or arrays) into a FeatureMatrix."""
    if not volumes:
        raise MetricError("cannot embed an empty volume list")
    arrays = [getattr(v, "voxels", v) for v in volumes]
    ids = [getattr(v, "name", str(i)) for i, v in enumerate(volumes)]
    if isinstance(embedder, ExternalFeatures):
        return embedder.lookup(ids)
    shapes = {a.shape for a in arrays}
    if len(shapes) > 1:
        raise MetricError(f"volumes differ in shape: {sorted(shapes)}")
    return embedder(arrays, ids)


# ------------------------------------------------------------------ moments

def moments(features):
    x = features.values if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise MetricError(f"need at least 2 feature rows, got {n}")
    mu = x.mean(axis=0)
    xc = x - mu
    cov = xc.T @ xc / (n - 1)
    return Moments(mu, (cov + cov.T) / 2)


def _psd_sqrt(a):
    w, v = np.linalg.eigh(a)
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def trace_sqrt_product(sigma_r, sigma_g):
    """Tr((Σ_r Σ_g)^½) as Tr((Σ_r^½ Σ_g Σ_r^½)^½), eigenvalues clamped at 0."""
    root = _psd_sqrt(sigma_r)
    m = root @ sigma_g @ root
    w = np.linalg.eigvalsh((m + m.T) / 2)
    return float(np.sqrt(np.clip(w, 0, None)).sum())


def _check_symmetric(c, label):
    tol = 1e-9 * max(1.0, float(np.max(np.abs(c), initial=0.0)))
    if np.max(np.abs(c - c.T), initial=0.0) > tol:
        raise MetricError(f"{label} covariance is not symmetric")


def fid(mr, mg):
    if mr.mean.shape != mg.mean.shape:
        raise MetricError(f"feature dims differ: {mr.mean.shape[0]} vs {mg.mean.shape[0]}")
    _check_symmetric(mr.cov, "real")
    _check_symmetric(mg.cov, "generated")
    diff = mr.mean - mg.mean
    value = float(diff @ diff + np.trace(mr.cov) + np.trace(mg.cov)
                  - 2 * trace_sqrt_product(mr.cov, mg.cov))
    return max(value, 0.0)


def polynomial_kernel(a, b, degree=3):
    """k(x, y) = (x.y / d + 1)^degree between all rows of a and b."""
    return (a @ b.T / a.shape[1] + 1.0) ** degree


def kid(fr, fg):
    """Unbiased MMD^2 with the cubic polynomial kernel."""
    xr = fr.values if isinstance(fr, FeatureMatrix) else np.asarray(fr, dtype=np.float64)
    xg = fg.values if isinstance(fg, FeatureMatrix) else np.asarray(fg, dtype=np.float64)
    m, n = xr.shape[0], xg.shape[0]
    if m < 2 or n < 2:
        raise MetricError(f"KID needs at least 2 samples per side, got {m} and {n}")
    if xr.shape[1] != xg.shape[1]:
        raise MetricError("feature dims differ")
    krr = polynomial_kernel(xr, xr)
    kgg = polynomial_kernel(xg, xg)
    krg = polynomial_kernel(xr, xg)
    return float((krr.sum() - np.trace(krr)) / (m * (m - 1))
                 + (kgg.sum() - np.trace(kgg)) / (n * (n - 1))
                 - 2 * krg.sum() / (m * n))


# ------------------------------------------------------------------ report

REPORT_DIMS = (768, 2048)


@dataclass
class MetricsReport:
    method: str
    scenario: str
    fids: dict
    kid: float

    def header(self):
        return ["method", "scenario"] + [f"fid{d}" for d in self.fids] + ["kid"]

    def row(self):
        return [self.method, self.scenario] + [f"{v:.10g}" for v in self.fids.values()] + [f"{self.kid:.10g}"]


def write_report(path, reports):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(reports[0].header())
        for r in reports:
            w.writerow(r.row())


def compare_volumes(real, generated, dims=REPORT_DIMS, seed=0, external=None,
                    method="", scenario=""):
    """FID at each dimensionality plus KID at the widest one."""
    if len(real) < 2 or len(generated) < 2:
        raise MetricError(f"need >= 2 volumes per side, got {len(real)} real and {len(generated)} generated")
    fids, kid_value = {}, None
    if external is not None:
        fr = external.lookup([f"real/{v.name}" for v in real])
        fg = external.lookup([f"generated/{v.name}" for v in generated])
        fids[external.d] = fid(moments(fr), moments(fg))
        kid_value = kid(fr, fg)
    else:
        rs, gs = {getattr(v, "voxels", v).shape for v in real}, {getattr(v, "voxels", v).shape for v in generated}
        if rs != gs or len(rs) > 1:
            raise MetricError(f"real and generated volumes must share one shape, got {sorted(rs)} and {sorted(gs)}")
        for d in sorted(dims):
            emb = RandomProjection(d, seed)
            fr, fg = embed(real, emb), embed(generated, emb)
            fids[d] = fid(moments(fr), moments(fg))
            if d == max(dims):
                kid_value = kid(fr, fg)
    return MetricsReport(method, scenario, fids, kid_value)


def evaluate_translation(real_dir, generated_dir, embedder="random_projection", dims=REPORT_DIMS,
                         seed=0, feature_csv=None, method="", scenario=""):
    real = [load_volume(p) for p in list_volumes(real_dir)]
    generated = [load_volume(p) for p in list_volumes(generated_dir)]
    external = None
    if embedder == "external":
        if not feature_csv:
            raise MetricError("external embedder needs a feature CSV")
        external = ExternalFeatures(feature_csv)
        if dims and external.d not in dims:
            raise MetricError(f"{feature_csv}: features are {external.d}-dimensional, requested {list(dims)}")
    elif embedder != "random_projection":
        raise MetricError(f"unknown embedder {embedder!r}")
    method = method or os.path.basename(os.path.normpath(generated_dir))
    return compare_volumes(real, generated, dims, seed, external, method, scenario)
