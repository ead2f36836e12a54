"""Fréchet distance between feature distributions, in 2.5D (per-plane slices)
and 3D (whole-volume features)."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg


class MetricError(ValueError):
    pass


PLANES = ("axial", "coronal", "sagittal")


def extract_slices(voxels: np.ndarray, plane: str, stride: int = 1) -> list[np.ndarray]:
    """2D slices along the plane normal.

    Convention: axial slice i = vol[:, :, i]; coronal slice i = vol[i, :, :];
    sagittal slice i = vol[:, i, :].
    """
    if plane not in PLANES:
        raise MetricError(f"unknown plane {plane!r}")
    axis = {"axial": 2, "coronal": 0, "sagittal": 1}[plane]
    n = voxels.shape[axis]
    if stride > n:
        raise MetricError(f"stride {stride} larger than axis length {n}")
    return [np.take(voxels, i, axis=axis) for i in range(0, n, stride)]


@dataclass(frozen=True)
class GaussianSummary:
    mean: np.ndarray
    cov: np.ndarray


def gaussian_summary(features: np.ndarray) -> GaussianSummary:
    """Sample mean and unbiased, symmetrized covariance. Diagonal loading of
    1e-6 is applied (with a warning) when N <= F."""
    features = np.asarray(features, dtype=np.float64)
    n, f = features.shape
    if n < 2:
        raise MetricError(f"need at least 2 samples for a covariance, got {n}")
    mean = features.mean(axis=0)
    centered = features - mean
    cov = centered.T @ centered / (n - 1)
    cov = (cov + cov.T) / 2.0
    if n <= f:
        warnings.warn(f"covariance from {n} samples in {f} dims; "
                      "applying diagonal loading", stacklevel=2)
        cov = cov + 1e-6 * np.eye(f)
    return GaussianSummary(mean, cov)


def _psd_sqrt(mat: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    vals, vecs = linalg.eigh(mat)
    if vals.min() < -tol:
        raise MetricError(f"matrix not PSD: min eigenvalue {vals.min():.3e}")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(g1: GaussianSummary, g2: GaussianSummary) -> float:
    """||mu1 - mu2||^2 + Tr(S1 + S2 - 2 (S1 S2)^{1/2}), computed via the
    symmetric eigendecomposition of S1^{1/2} S2 S1^{1/2}."""
    if g1.mean.shape != g2.mean.shape:
        raise MetricError(f"dimension mismatch: {g1.mean.shape} vs {g2.mean.shape}")
    diff = g1.mean - g2.mean
    s1_half = _psd_sqrt(g1.cov)
    inner = s1_half @ g2.cov @ s1_half
    inner = (inner + inner.T) / 2.0
    vals = linalg.eigvalsh(inner)
    if vals.min() < -1e-6:
        raise MetricError(f"cross term not PSD: min eigenvalue {vals.min():.3e}")
    tr_sqrt = np.sqrt(np.clip(vals, 0.0, None)).sum()
    fid = float(diff @ diff + np.trace(g1.cov) + np.trace(g2.cov) - 2.0 * tr_sqrt)
    if fid < -1e-6:
        raise MetricError(f"negative distance {fid:.3e} beyond tolerance")
    return max(fid, 0.0)


def fid_from_features(real: np.ndarray, generated: np.ndarray) -> float:
    return frechet_distance(gaussian_summary(real), gaussian_summary(generated))


def fid_2_5d(real_volumes: list[np.ndarray], gen_volumes: list[np.ndarray],
             feature_fn_2d, stride: int = 1) -> dict[str, float]:
    """Per-plane FID over pooled slice features plus their arithmetic mean.

    feature_fn_2d maps a list of 2D arrays to an (N, F) feature matrix.
    """
    if not real_volumes or not gen_volumes:
        raise MetricError("both volume sets must be non-empty")
    result = {}
    for plane in PLANES:
        real_slices = [s for v in real_volumes for s in extract_slices(v, plane, stride)]
        gen_slices = [s for v in gen_volumes for s in extract_slices(v, plane, stride)]
        result[plane] = fid_from_features(feature_fn_2d(real_slices),
                                          feature_fn_2d(gen_slices))
    result["average"] = (result["axial"] + result["coronal"] + result["sagittal"]) / 3.0
    return result


def fid_3d(real_volumes: list[np.ndarray], gen_volumes: list[np.ndarray],
           feature_fn_3d) -> float:
    """FID over whole-volume features."""
    if not real_volumes or not gen_volumes:
        raise MetricError("both volume sets must be non-empty")
    return fid_from_features(feature_fn_3d(real_volumes),
                             feature_fn_3d(gen_volumes))
