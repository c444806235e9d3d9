"""Surface coverage, map entropy, reconstruction point clouds and floater volume."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Aabb, Pose
from .sensor import SdfScene, ViewCapture, backproject

DEFAULT_THRESHOLD = 0.005


@dataclass(frozen=True)
class CoverageReport:
    matched: int
    total: int
    coverage: float
    threshold: float


@dataclass(frozen=True)
class EntropyReport:
    bits: float
    resolution: int


def surface_coverage(recon: np.ndarray, gt: np.ndarray, threshold: float = DEFAULT_THRESHOLD) -> CoverageReport:
    """Fraction of ground-truth points with a reconstructed point closer than ``threshold``."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    recon = np.asarray(recon, dtype=np.float64).reshape(-1, 3)
    if gt.shape[0] == 0:
        raise ValueError("empty ground-truth point set")
    if recon.shape[0] == 0:
        return CoverageReport(0, gt.shape[0], 0.0, threshold)
    dist, _ = cKDTree(recon).query(gt, k=1)
    matched = int(np.count_nonzero(dist < threshold))
    return CoverageReport(matched, gt.shape[0], matched / gt.shape[0], threshold)


def cell_centers(box: Aabb, resolution: int) -> np.ndarray:
    """(resolution^3, 3) cell-centre positions, x slowest."""
    if resolution < 1:
        raise ValueError("resolution must be positive")
    axes = [box.p_min[i] + (np.arange(resolution) + 0.5) * (box.p_max[i] - box.p_min[i]) / resolution for i in range(3)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=-1)


def binary_entropy_bits(o: np.ndarray) -> np.ndarray:
    o = np.asarray(o, dtype=np.float64)
    out = np.zeros_like(o)
    m = (o > 0.0) & (o < 1.0)
    p = o[m]
    out[m] = -(p * np.log2(p) + (1.0 - p) * np.log2(1.0 - p))
    return out


def map_entropy(field_model, resolution: int = 128, box: Aabb | None = None, chunk: int = 262_144) -> EntropyReport:
    """Mean binary entropy (bits) of the occupancy at grid cell centres of the box."""
    box = field_model.box if box is None else box
    pts = cell_centers(box, resolution)
    total = 0.0
    for s in range(0, pts.shape[0], chunk):
        total += float(np.sum(binary_entropy_bits(field_model.occupancy(pts[s : s + chunk]))))
    return EntropyReport(total / pts.shape[0], resolution)


def accumulate_recon_points(captures: list[ViewCapture], box: Aabb, poses: list[Pose] | None = None) -> np.ndarray:
    """Back-projected depth of every capture, kept inside the box.

    ``poses`` substitutes the reconstructor's pose estimates for the capture poses.
    """
    if poses is not None and len(poses) != len(captures):
        raise ValueError("one pose per capture required")
    clouds = []
    for i, cap in enumerate(captures):
        pts = backproject(cap, None if poses is None else poses[i])
        clouds.append(pts[box.contains(pts, 0.0)])
    if not clouds:
        return np.zeros((0, 3))
    return np.concatenate(clouds, axis=0)


def floater_volume(
    field_model, scene: SdfScene, resolution: int = 64, margin: float = 0.02, box: Aabb | None = None
) -> float:
    """Fraction of probe cells predicted occupied (o > 0.5) that lie more than ``margin`` outside the object."""
    box = field_model.box if box is None else box
    pts = cell_centers(box, resolution)
    occ = field_model.occupancy(pts)
    outside = scene.object_sdf(pts) > margin
    return float(np.count_nonzero((occ > 0.5) & outside)) / pts.shape[0]


__all__ = [
    "DEFAULT_THRESHOLD",
    "CoverageReport",
    "EntropyReport",
    "surface_coverage",
    "cell_centers",
    "binary_entropy_bits",
    "map_entropy",
    "accumulate_recon_points",
    "floater_volume",
]
