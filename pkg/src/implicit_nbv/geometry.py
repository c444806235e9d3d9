"""Rigid transforms, pinhole cameras, rays, boxes and the spherical view manifold.

Conventions: a :class:`Pose` maps camera coordinates to world coordinates,
``x_world = R @ x_cam + t``, so ``t`` is the camera centre.  Cameras look
along their +z axis with image rows increasing along +y (OpenCV style).
World up is +z.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diff as d

WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        rt = self.rotation.T
        return Pose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) @ self.rotation.T + self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @staticmethod
    def square(size: int, focal_ratio: float = 1.75) -> "CameraIntrinsics":
        """Square image with the principal point at the centre; fx = focal_ratio * size."""
        f = focal_ratio * size
        return CameraIntrinsics(f, f, size / 2.0, size / 2.0, size, size)

    def camera_directions(self, px: np.ndarray) -> np.ndarray:
        """Unit camera-frame directions through pixel coordinates ``px`` (N, 2)."""
        px = np.asarray(px, dtype=np.float64)
        dirs = np.stack(
            [(px[..., 0] - self.cx) / self.fx, (px[..., 1] - self.cy) / self.fy, np.ones(px.shape[:-1])],
            axis=-1,
        )
        return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)

    def pixel_centers(self) -> np.ndarray:
        """(height*width, 2) pixel-centre coordinates, row-major."""
        v, u = np.mgrid[0 : self.height, 0 : self.width]
        return np.stack([u.ravel() + 0.5, v.ravel() + 0.5], axis=-1).astype(np.float64)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray


@dataclass(frozen=True)
class Aabb:
    p_min: np.ndarray
    p_max: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "p_min", np.asarray(self.p_min, dtype=np.float64).reshape(3))
        object.__setattr__(self, "p_max", np.asarray(self.p_max, dtype=np.float64).reshape(3))
        if not np.all(self.p_min < self.p_max):
            raise ValueError("p_min must be below p_max componentwise")

    @staticmethod
    def cube(half: float = 0.25) -> "Aabb":
        return Aabb(np.full(3, -half), np.full(3, half))

    @property
    def extent(self) -> np.ndarray:
        return self.p_max - self.p_min

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.p_min + self.p_max)

    def contains(self, x: np.ndarray, tol: float = 0.0) -> np.ndarray:
        x = np.asarray(x)
        return np.all((x >= self.p_min - tol) & (x <= self.p_max + tol), axis=-1)


def ray_aabb_batch(origins: np.ndarray, dirs: np.ndarray, box: Aabb) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised slab test.

    Returns ``(d_near, d_far, hit)``; ``d_near`` is clamped to 0 for origins
    inside the box.  Rays whose interval in front of the origin is empty (or a
    single point) are misses.
    """
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    parallel = np.abs(dirs) < 1e-15
    safe = np.where(parallel, 1.0, dirs)
    t0 = (box.p_min - origins) / safe
    t1 = (box.p_max - origins) / safe
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    inside_slab = (origins >= box.p_min) & (origins <= box.p_max)
    lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), hi)
    d_near = np.max(lo, axis=-1)
    d_far = np.min(hi, axis=-1)
    d_near = np.maximum(d_near, 0.0)
    hit = d_far > d_near
    return d_near, d_far, hit


def ray_aabb_intersect(ray: Ray, box: Aabb) -> tuple[float, float] | None:
    d_near, d_far, hit = ray_aabb_batch(ray.origin[None], ray.direction[None], box)
    if not hit[0]:
        return None
    return float(d_near[0]), float(d_far[0])


def pixel_to_ray(intr: CameraIntrinsics, pose: Pose, px) -> Ray:
    u, v = float(px[0]), float(px[1])
    if not (0.0 <= u <= intr.width and 0.0 <= v <= intr.height):
        raise ValueError(f"pixel {px} outside a {intr.width}x{intr.height} image")
    d_cam = intr.camera_directions(np.array([[u, v]]))[0]
    return Ray(pose.translation.copy(), pose.rotation @ d_cam)


# ---------------------------------------------------------------------------
# spherical view manifold


@dataclass(frozen=True)
class ViewManifold:
    """Bounded 2-DoF sphere of look-at views around ``center``."""

    radius: float = 1.0
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    elev_min: float = math.radians(-10.0)
    elev_max: float = math.radians(80.0)

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        limit = math.pi / 2 - 1e-6
        if not (-limit < self.elev_min < self.elev_max < limit):
            raise ValueError("elevation limits must lie strictly inside (-pi/2, pi/2)")

    def view(self, azimuth: float, elevation: float) -> "SphericalView":
        return SphericalView(float(azimuth) % (2 * math.pi), float(elevation), self.radius, self.center)

    def clamp_elevation(self, elevation: float) -> float:
        return min(max(elevation, self.elev_min), self.elev_max)

    def contains(self, view: "SphericalView", tol: float = 1e-12) -> bool:
        return (
            0.0 <= view.azimuth < 2 * math.pi
            and self.elev_min - tol <= view.elevation <= self.elev_max + tol
        )

    def sample(self, rng: np.random.Generator, n: int) -> list["SphericalView"]:
        """``n`` views uniform in (azimuth, elevation) over the bounds."""
        az = rng.uniform(0.0, 2 * math.pi, size=n)
        el = rng.uniform(self.elev_min, self.elev_max, size=n)
        return [self.view(a, e) for a, e in zip(az, el)]

    def dome_grid(self, n_azimuth: int = 12, n_elevation: int = 4) -> list["SphericalView"]:
        """Candidate grid with elevations at the centres of equal bands."""
        els = self.elev_min + (np.arange(n_elevation) + 0.5) * (self.elev_max - self.elev_min) / n_elevation
        azs = np.arange(n_azimuth) * 2 * math.pi / n_azimuth
        return [self.view(a, e) for e in els for a in azs]


@dataclass(frozen=True)
class SphericalView:
    azimuth: float
    elevation: float
    radius: float = 1.0
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def position(self) -> np.ndarray:
        return look_at_components(self.azimuth, self.elevation, self.radius, self.center)[0]

    def unit(self) -> np.ndarray:
        ce = math.cos(self.elevation)
        return np.array([ce * math.cos(self.azimuth), ce * math.sin(self.azimuth), math.sin(self.elevation)])


def look_at_components(theta, phi, radius: float, center) -> tuple:
    """Camera centre and camera-to-world rotation for a view on the sphere.

    Dual-mode in ``theta`` / ``phi``: pass :class:`diff.Var` values to record
    the construction on a tape.  The camera z axis points at ``center``; the
    x axis is ``normalize(z × up)``, horizontal, so image rows run downwards.
    """
    ct, st = d.cos(theta), d.sin(theta)
    cp, sp = d.cos(phi), d.sin(phi)
    center = np.asarray(center, dtype=np.float64)
    position = d.add(d.mul(radius, d.stack([d.mul(cp, ct), d.mul(cp, st), sp])), center)
    zero = np.zeros(())
    x_axis = d.stack([d.neg(st), ct, zero])
    y_axis = d.stack([d.mul(sp, ct), d.mul(sp, st), d.neg(cp)])
    z_axis = d.neg(d.stack([d.mul(cp, ct), d.mul(cp, st), sp]))
    rotation = d.stack([x_axis, y_axis, z_axis], axis=1)
    return position, rotation


def spherical_to_pose(view: SphericalView) -> Pose:
    limit = math.pi / 2 - 1e-6
    if not -limit < view.elevation < limit:
        raise ValueError("elevation at a pole: look-at direction parallel to world up")
    if view.radius <= 0:
        raise ValueError("radius must be positive")
    position, rotation = look_at_components(view.azimuth, view.elevation, view.radius, view.center)
    return Pose(rotation, position)


# ---------------------------------------------------------------------------
# SE(3) exponential map


def _series(kind: str, s: np.ndarray, deriv: bool) -> np.ndarray:
    # A = sin(th)/th, B = (1-cos th)/th^2, C = (th-sin th)/th^3 as power series in s = th^2
    offset = {"A": 1, "B": 2, "C": 3}[kind]
    out = np.zeros_like(s)
    for k in range(10):
        c = (-1) ** k / math.factorial(2 * k + offset)
        if deriv:
            if k == 0:
                continue
            out = out + c * k * s ** (k - 1)
        else:
            out = out + c * s**k
    return out


def _coef(kind: str, s: np.ndarray) -> np.ndarray:
    small = s < 0.25
    th = np.sqrt(np.where(small, 1.0, s))
    if kind == "A":
        closed = np.sin(th) / th
    elif kind == "B":
        closed = (1.0 - np.cos(th)) / th**2
    else:
        closed = (th - np.sin(th)) / th**3
    return np.where(small, _series(kind, s, False), closed)


def _coef_deriv(kind: str, s: np.ndarray) -> np.ndarray:
    small = s < 0.25
    th = np.sqrt(np.where(small, 1.0, s))
    if kind == "A":
        closed = (th * np.cos(th) - np.sin(th)) / (2 * th**3)
    elif kind == "B":
        closed = (th * np.sin(th) - 2 * (1.0 - np.cos(th))) / (2 * th**4)
    else:
        closed = ((1.0 - np.cos(th)) * th - 3 * (th - np.sin(th))) / (2 * th**5)
    return np.where(small, _series(kind, s, True), closed)


def _hat(w):
    """Skew matrices for (..., 3) vectors; dual-mode."""
    wv = d.value_of(w)
    zero = np.zeros(wv.shape[:-1])
    w0, w1, w2 = w[..., 0], w[..., 1], w[..., 2]
    rows = [
        d.stack([zero, d.neg(w2), w1], axis=-1),
        d.stack([w2, zero, d.neg(w0)], axis=-1),
        d.stack([d.neg(w1), w0, zero], axis=-1),
    ]
    return d.stack(rows, axis=-2)


def se3_exp(twist):
    """Rotation and translation of exp(twist) for (..., 6) twists (rotation first).

    Dual-mode; smooth through the zero twist.
    """
    tw = twist if d.is_var(twist) else np.asarray(twist, dtype=np.float64)
    w = tw[..., 0:3]
    v = tw[..., 3:6]
    s = d.sum(d.mul(w, w), axis=-1)
    a = d.unary(s, lambda x: _coef("A", x), lambda x: _coef_deriv("A", x))
    b = d.unary(s, lambda x: _coef("B", x), lambda x: _coef_deriv("B", x))
    c = d.unary(s, lambda x: _coef("C", x), lambda x: _coef_deriv("C", x))
    wx = _hat(w)
    wx2 = d.matmul(wx, wx)
    eye = np.eye(3)
    a_ = d.reshape(a, d.value_of(a).shape + (1, 1))
    b_ = d.reshape(b, d.value_of(b).shape + (1, 1))
    c_ = d.reshape(c, d.value_of(c).shape + (1, 1))
    rot = d.add(eye, d.add(d.mul(a_, wx), d.mul(b_, wx2)))
    jac = d.add(eye, d.add(d.mul(b_, wx), d.mul(c_, wx2)))
    trans = d.reshape(d.matmul(jac, d.reshape(v, d.value_of(v).shape + (1,))), d.value_of(v).shape)
    return rot, trans


def apply_twist(pose: Pose, twist) -> Pose:
    """exp(twist) ∘ pose."""
    rot, trans = se3_exp(np.asarray(twist, dtype=np.float64))
    return Pose(rot @ pose.rotation, rot @ pose.translation + trans)


def so3_log(rotation: np.ndarray) -> np.ndarray:
    r = np.asarray(rotation, dtype=np.float64)
    cos_th = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    th = math.acos(cos_th)
    vee = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if th < 1e-8:
        return 0.5 * vee
    if math.pi - th < 1e-6:
        # near pi: axis from the symmetric part
        m = (r + np.eye(3)) / 2.0
        axis = m[np.argmax(np.diag(m))]
        axis = axis / np.linalg.norm(axis)
        return th * axis
    return th / (2.0 * math.sin(th)) * vee


def se3_log(pose: Pose) -> np.ndarray:
    w = so3_log(pose.rotation)
    s = np.array(float(w @ w))
    b = float(_coef("B", s))
    c = float(_coef("C", s))
    wx = np.array(_hat(w))
    jac = np.eye(3) + b * wx + c * wx @ wx
    v = np.linalg.solve(jac, pose.translation)
    return np.concatenate([w, v])


def rotation_angle(rotation: np.ndarray) -> float:
    """Geodesic angle of a rotation matrix, radians."""
    return float(np.linalg.norm(so3_log(rotation)))


def rotation_from_vector(w) -> np.ndarray:
    return se3_exp(np.concatenate([np.asarray(w, dtype=np.float64), np.zeros(3)]))[0]
