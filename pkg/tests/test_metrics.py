import math

import numpy as np
import pytest

from implicit_nbv.field import constant_field
from implicit_nbv.geometry import Aabb, CameraIntrinsics, Pose, SphericalView, rotation_from_vector, spherical_to_pose
from implicit_nbv.metrics import (
    accumulate_recon_points,
    binary_entropy_bits,
    cell_centers,
    floater_volume,
    map_entropy,
    surface_coverage,
)
from implicit_nbv.sensor import builtin_scene, render_view

BOX = Aabb.cube(0.25)


class SdfField:
    """A perfectly converged field: a sharp sigmoid of the true object sdf."""

    def __init__(self, scene, sharpness=1e-3):
        self.scene = scene
        self.sharpness = sharpness
        self.box = BOX

    def occupancy(self, x):
        return 1.0 / (1.0 + np.exp(np.clip(self.scene.object_sdf(x) / self.sharpness, -700, 700)))


def test_coverage_examples():
    pts = np.random.default_rng(0).uniform(-0.2, 0.2, size=(300, 3))
    assert surface_coverage(pts, pts).coverage == 1.0
    rep = surface_coverage(np.zeros((0, 3)), pts)
    assert rep.coverage == 0.0 and rep.total == 300
    gt = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    rep = surface_coverage(gt[:1], gt)
    assert rep.coverage == 0.5 and rep.matched == 1 and rep.threshold == 0.005
    with pytest.raises(ValueError):
        surface_coverage(pts, np.zeros((0, 3)))


def test_coverage_matches_brute_force_scan():
    rng = np.random.default_rng(1)
    gt = rng.uniform(-0.1, 0.1, size=(500, 3))
    recon = gt + rng.normal(scale=0.004, size=gt.shape)
    recon = recon[rng.permutation(500)[:400]]
    dist = np.sqrt(((gt[:, None, :] - recon[None, :, :]) ** 2).sum(-1)).min(axis=1)
    assert surface_coverage(recon, gt).matched == int(np.count_nonzero(dist < 0.005))
    covs = [surface_coverage(recon, gt, th).coverage for th in (0.001, 0.003, 0.005, 0.01)]
    assert all(a <= b for a, b in zip(covs, covs[1:]))


def test_coverage_rigid_invariance():
    rng = np.random.default_rng(2)
    gt = rng.uniform(-0.2, 0.2, size=(2000, 3))
    recon = gt[:1500] + rng.normal(scale=0.004, size=(1500, 3))
    rot = rotation_from_vector([0.4, -1.1, 0.7])
    t = np.array([0.3, -0.2, 1.0])
    a = surface_coverage(recon, gt).coverage
    b = surface_coverage(recon @ rot.T + t, gt @ rot.T + t).coverage
    assert abs(a - b) <= 1e-9


def test_map_entropy_examples():
    assert map_entropy(constant_field(0.5), 16).bits == pytest.approx(1.0, abs=1e-9)
    assert map_entropy(constant_field(1 - 1e-9), 8).bits < 1e-7
    expect = -0.25 * math.log2(0.25) - 0.75 * math.log2(0.75)
    assert expect == pytest.approx(0.811278, abs=1e-6)
    assert map_entropy(constant_field(0.25), 8).bits == pytest.approx(expect, abs=1e-12)


def test_map_entropy_monotone_in_confidence():
    vals = [map_entropy(constant_field(0.5 + dlt), 4).bits for dlt in np.linspace(0, 0.49, 20)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    o = np.random.default_rng(3).uniform(0, 1, 1000)
    h = binary_entropy_bits(o)
    assert np.all((h >= 0) & (h <= 1))
    assert binary_entropy_bits(np.array([0.0, 1.0])).tolist() == [0.0, 0.0]


def test_cell_centers():
    c = cell_centers(BOX, 4)
    assert c.shape == (64, 3)
    np.testing.assert_allclose(c[0], [-0.1875] * 3)
    np.testing.assert_allclose(c.mean(axis=0), 0.0, atol=1e-15)
    with pytest.raises(ValueError):
        cell_centers(BOX, 0)


def test_accumulate_points():
    intr = CameraIntrinsics.square(32, 1.75)
    scene = builtin_scene("sphere")
    assert accumulate_recon_points([], BOX).shape == (0, 3)
    cap = render_view(scene, spherical_to_pose(SphericalView(0.5, 0.3, 1.0)), intr)
    pts = accumulate_recon_points([cap], BOX)
    assert len(pts) > 50
    assert np.max(np.abs(scene.object_sdf(pts))) < 3 * (0.0 + 1e-5)
    assert len(accumulate_recon_points([cap, cap], BOX)) == 2 * len(pts)
    sigma = 0.002
    noisy = render_view(scene, cap.pose, intr, noise_sigma=sigma, seed=4)
    pts = accumulate_recon_points([noisy], BOX)
    assert np.max(np.abs(scene.object_sdf(pts))) < 5 * (sigma + 1e-5)
    with pytest.raises(ValueError):
        accumulate_recon_points([cap], BOX, [Pose.identity(), Pose.identity()])


def test_accumulate_drops_points_outside_box():
    intr = CameraIntrinsics.square(16, 1.75)
    scene = builtin_scene("sphere", background=True)
    cap = render_view(scene, spherical_to_pose(SphericalView(0.0, 0.2, 1.0)), intr, sensor_range=8.0, d_max=8.0)
    pts = accumulate_recon_points([cap], BOX)
    assert np.all(BOX.contains(pts, 0.0))
    assert np.count_nonzero(np.isfinite(cap.depth)) > len(pts)


def test_floater_volume_examples():
    scene = builtin_scene("sphere")
    assert floater_volume(constant_field(1e-9), scene) == 0.0
    radius = scene.primitives[0].size[0]
    res, margin = 64, 0.02
    r = radius + margin
    box_vol = 0.5**3
    expect = (box_vol - 4 / 3 * math.pi * r**3) / box_vol
    shell = 4 * math.pi * r**2 * 2 * (0.5 / res) / box_vol  # two cells of boundary
    got = floater_volume(constant_field(1 - 1e-9), scene, res, margin)
    assert abs(got - expect) < shell
    assert floater_volume(SdfField(scene), scene) < 0.001
