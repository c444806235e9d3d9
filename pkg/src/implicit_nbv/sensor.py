"""Analytic signed-distance scenes and a sphere-traced RGB-D sensor."""

from __future__ import annotations

import configparser
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Aabb, CameraIntrinsics, Pose

TRACE_TOL = 1e-5
TRACE_STEPS = 256
BACKGROUND_COLOR = np.array([0.8, 0.8, 0.8])
WALL_COLOR = np.array([0.6, 0.6, 0.65])
LIGHT_DIR = np.array([0.3, 0.2, 1.0]) / np.linalg.norm([0.3, 0.2, 1.0])
AMBIENT = 0.3


@dataclass(frozen=True)
class Primitive:
    kind: str  # "sphere" | "box" | "torus"
    center: tuple[float, float, float]
    size: tuple[float, ...]  # sphere: (r,), box: half extents, torus: (major, minor)
    albedo: tuple[float, float, float] = (0.7, 0.7, 0.7)

    def sdf(self, x: np.ndarray) -> np.ndarray:
        p = x - np.asarray(self.center)
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=-1) - self.size[0]
        if self.kind == "box":
            q = np.abs(p) - np.asarray(self.size)
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            return outside + np.minimum(np.max(q, axis=-1), 0.0)
        if self.kind == "torus":
            ring = np.linalg.norm(p[..., :2], axis=-1) - self.size[0]
            return np.hypot(ring, p[..., 2]) - self.size[1]
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        c = np.asarray(self.center)
        if self.kind == "sphere":
            h = np.full(3, self.size[0])
        elif self.kind == "box":
            h = np.asarray(self.size, dtype=np.float64)
        else:
            r = self.size[0] + self.size[1]
            h = np.array([r, r, self.size[1]])
        return c - h, c + h


@dataclass(frozen=True)
class SdfScene:
    """Union of primitives, plus optional ground plane and enclosing room.

    ``smooth_k`` > 0 selects a polynomial smooth union with that blending
    radius.  The room is a sphere of radius ``room_radius`` seen from inside;
    it and the ground plane only affect rendering, never :meth:`object_sdf`.
    """

    primitives: tuple[Primitive, ...]
    smooth_k: float = 0.0
    ground_z: float | None = None
    room_radius: float | None = None
    name: str = "custom"

    def check_inside(self, box: Aabb) -> None:
        for prim in self.primitives:
            lo, hi = prim.bounds()
            if np.any(lo < box.p_min) or np.any(hi > box.p_max):
                raise ValueError(f"primitive {prim} does not fit inside the object box")
        if self.ground_z is not None and self.ground_z > box.p_min[2]:
            raise ValueError("ground plane cuts the object box")

    def object_sdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        dists = [p.sdf(x) for p in self.primitives]
        out = dists[0]
        for dist in dists[1:]:
            out = _union(out, dist, self.smooth_k)
        return out

    def sdf(self, x: np.ndarray) -> np.ndarray:
        """Full scene distance, including ground and room."""
        out = self.object_sdf(x)
        x = np.asarray(x, dtype=np.float64)
        if self.ground_z is not None:
            out = np.minimum(out, x[..., 2] - self.ground_z)
        if self.room_radius is not None:
            out = np.minimum(out, self.room_radius - np.linalg.norm(x, axis=-1))
        return out

    def albedo(self, x: np.ndarray) -> np.ndarray:
        """Albedo of the nearest primitive (smoothly blended for smooth unions)."""
        dists = np.stack([p.sdf(x) for p in self.primitives], axis=-1)
        cols = np.array([p.albedo for p in self.primitives])
        if self.smooth_k > 0 and len(self.primitives) > 1:
            w = np.exp(-(dists - dists.min(axis=-1, keepdims=True)) / (0.5 * self.smooth_k))
            w /= w.sum(axis=-1, keepdims=True)
            return w @ cols
        return cols[np.argmin(dists, axis=-1)]

    def gradient(self, x: np.ndarray, h: float = 1e-6, object_only: bool = True) -> np.ndarray:
        f = self.object_sdf if object_only else self.sdf
        x = np.asarray(x, dtype=np.float64)
        g = np.empty_like(x)
        for a in range(3):
            e = np.zeros(3)
            e[a] = h
            g[..., a] = (f(x + e) - f(x - e)) / (2 * h)
        return g


def _union(a: np.ndarray, b: np.ndarray, k: float) -> np.ndarray:
    if k <= 0:
        return np.minimum(a, b)
    h = np.clip(0.5 + 0.5 * (b - a) / k, 0.0, 1.0)
    return b * (1 - h) + a * h - k * h * (1 - h)


def scene_sdf(scene: SdfScene, x) -> np.ndarray:
    return scene.object_sdf(np.asarray(x, dtype=np.float64))


@dataclass
class ViewCapture:
    """One RGB-D frame.  Missing depth is NaN."""

    color: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W), metres along the ray
    pose: Pose
    intrinsics: CameraIntrinsics
    meta: dict = field(default_factory=dict)


def sphere_trace(
    scene: SdfScene, origins: np.ndarray, dirs: np.ndarray, t_max: float, tol: float = TRACE_TOL, steps: int = TRACE_STEPS
) -> tuple[np.ndarray, np.ndarray]:
    """March every ray until ``|sdf| < tol``; returns (t, hit)."""
    n = origins.shape[0]
    t = np.zeros(n)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        dist = scene.sdf(origins[idx] + t[idx, None] * dirs[idx])
        done = dist < tol
        hit[idx[done]] = True
        t[idx[~done]] += dist[~done]
        escaped = t[idx] > t_max
        active[idx[done | escaped]] = False
    # Newton refinement along the ray; sphere tracing alone is slow to settle at grazing incidence
    idx = np.nonzero(hit)[0]
    for _ in range(3):
        if idx.size == 0:
            break
        p = origins[idx] + t[idx, None] * dirs[idx]
        dist = scene.sdf(p)
        slope = np.sum(scene.gradient(p, object_only=False) * dirs[idx], axis=-1)
        ok = slope < -1e-3
        step = np.where(ok, -dist / np.where(ok, slope, -1.0), 0.0)
        t[idx] += np.clip(step, -10 * tol, 10 * tol)
    hit &= t <= t_max
    return t, hit


def render_view(
    scene: SdfScene,
    pose: Pose,
    intr: CameraIntrinsics,
    d_max: float = 3.0,
    noise_sigma: float = 0.0,
    seed: int = 0,
    sensor_range: float | None = None,
) -> ViewCapture:
    """Render colour and ray-distance depth at every pixel centre.

    Hits farther than ``sensor_range`` (default ``d_max``) are reported as no
    measurement.  Passing a larger ``sensor_range`` lets distant background
    such as room walls come back as out-of-range depths.
    """
    t_max = d_max if sensor_range is None else sensor_range
    px = intr.pixel_centers()
    d_cam = intr.camera_directions(px)
    dirs = d_cam @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape).copy()
    t, hit = sphere_trace(scene, origins, dirs, t_max)
    n = px.shape[0]
    depth = np.full(n, np.nan)
    depth[hit] = t[hit]
    color = np.tile(BACKGROUND_COLOR, (n, 1))
    if np.any(hit):
        p = origins[hit] + t[hit, None] * dirs[hit]
        on_object = scene.object_sdf(p) < 1e-3
        normals = scene.gradient(p, object_only=False)
        normals /= np.maximum(np.linalg.norm(normals, axis=-1, keepdims=True), 1e-12)
        shade = AMBIENT + (1.0 - AMBIENT) * np.clip(normals @ LIGHT_DIR, 0.0, 1.0)
        albedo = np.where(on_object[:, None], scene.albedo(p), WALL_COLOR)
        color[hit] = albedo * shade[:, None]
    if noise_sigma > 0:
        # one stream per pixel index, so the noise does not depend on traversal order
        pix = np.nonzero(hit)[0]
        noise = np.array([np.random.default_rng([seed, int(i)]).normal() for i in pix])
        depth[pix] = np.maximum(depth[pix] + noise_sigma * noise, 1e-6)
    return ViewCapture(
        color=color.reshape(intr.height, intr.width, 3),
        depth=depth.reshape(intr.height, intr.width),
        pose=pose,
        intrinsics=intr,
    )


def gt_surface_points(scene: SdfScene, n: int, seed: int, box: Aabb | None = None) -> np.ndarray:
    """``n`` points on the object's zero level set, |sdf| < 1e-5.

    Candidates are drawn in a thin shell around the surface of the bounding
    box of the primitives and projected by Newton steps along the gradient.
    """
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    if box is None:
        lows, highs = zip(*(p.bounds() for p in scene.primitives))
        box = Aabb(np.min(lows, axis=0) - 0.01, np.max(highs, axis=0) + 0.01)
    out: list[np.ndarray] = []
    have = 0
    while have < n:
        cand = rng.uniform(box.p_min, box.p_max, size=(max(4 * (n - have), 256), 3))
        # uniform volume samples near the surface give area-proportional coverage
        cand = cand[np.abs(scene.object_sdf(cand)) < 0.01]
        ok = np.ones(len(cand), dtype=bool)
        for _ in range(50):
            dist = scene.object_sdf(cand)
            conv = np.abs(dist) < 1e-5
            if np.all(conv):
                break
            g = scene.gradient(cand)
            gn = np.sum(g * g, axis=-1)
            good = gn > 1e-12
            upd = ~conv & good
            cand[upd] -= (dist[upd] / gn[upd])[:, None] * g[upd]
            ok &= good | conv
        ok &= np.abs(scene.object_sdf(cand)) < 1e-5
        cand = cand[ok]
        out.append(cand[: n - have])
        have += len(out[-1])
    return np.concatenate(out, axis=0)


# ---------------------------------------------------------------------------
# benchmark scenes


def builtin_scene(name: str, background: bool = True) -> SdfScene:
    """Shipped scenes.  ``background`` adds room walls beyond the default range."""
    room = 4.5 if background else None
    if name == "sphere":
        prims = (Primitive("sphere", (0.0, 0.0, 0.0), (0.15,), (0.8, 0.3, 0.3)),)
        return SdfScene(prims, room_radius=room, name=name)
    if name == "blob":
        prims = (
            Primitive("sphere", (0.0, 0.0, -0.02), (0.12,), (0.85, 0.7, 0.45)),
            Primitive("sphere", (0.1, 0.03, 0.09), (0.07,), (0.75, 0.55, 0.35)),
            Primitive("sphere", (-0.09, -0.06, 0.05), (0.065,), (0.9, 0.8, 0.55)),
        )
        return SdfScene(prims, smooth_k=0.04, room_radius=room, name=name)
    if name == "barbell":
        prims = (
            Primitive("sphere", (-0.17, 0.0, 0.0), (0.07,), (0.3, 0.5, 0.8)),
            Primitive("sphere", (0.17, 0.0, 0.0), (0.07,), (0.3, 0.5, 0.8)),
            Primitive("box", (0.0, 0.0, 0.0), (0.12, 0.015, 0.015), (0.6, 0.6, 0.6)),
        )
        return SdfScene(prims, room_radius=room, name=name)
    if name == "torus-box":
        prims = (
            Primitive("torus", (0.0, 0.0, 0.04), (0.13, 0.04), (0.8, 0.6, 0.2)),
            Primitive("box", (0.0, 0.0, -0.08), (0.08, 0.08, 0.06), (0.4, 0.7, 0.4)),
        )
        return SdfScene(prims, room_radius=room, name=name)
    raise ValueError(f"unknown scene {name!r}")


BUILTIN_SCENES = ("sphere", "blob", "barbell", "torus-box")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.replace(",", " ").split())


def _section_order(name: str) -> tuple:
    suffix = name.split(".")[-1]
    return (0, int(suffix), "") if suffix.isdigit() else (1, 0, suffix)


def load_scene(path: str | Path) -> SdfScene:
    """Read a scene description.

    Format (INI)::

        [scene]
        name = myscene
        union = hard | smooth
        k = 0.03              ; smooth-union radius, metres
        ground_z = -0.3       ; optional
        room_radius = 4.5     ; optional

        [primitive.0]
        type = sphere | box | torus
        center = 0 0 0
        radius = 0.1          ; sphere
        half_extents = a b c  ; box
        radii = R r           ; torus
        albedo = 0.8 0.5 0.3
    """
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    if not cp.read(path):
        raise FileNotFoundError(path)
    head = cp["scene"] if cp.has_section("scene") else {}
    union = head.get("union", "hard")
    if union not in ("hard", "smooth"):
        raise ValueError(f"union must be hard or smooth, got {union!r}")
    k = float(head.get("k", "0.03")) if union == "smooth" else 0.0
    prims = []
    sections = [s for s in cp.sections() if s.startswith("primitive")]
    for section in sorted(sections, key=_section_order):
        sec = cp[section]
        kind = sec["type"].strip()
        if kind == "sphere":
            size = _floats(sec["radius"])
        elif kind == "box":
            size = _floats(sec["half_extents"])
        elif kind == "torus":
            size = _floats(sec["radii"])
        else:
            raise ValueError(f"{section}: unknown primitive type {kind!r}")
        albedo = _floats(sec.get("albedo", "0.7 0.7 0.7"))
        prims.append(Primitive(kind, _floats(sec["center"]), size, albedo))
    if not prims:
        raise ValueError(f"{path}: no primitives")
    ground = head.get("ground_z")
    room = head.get("room_radius")
    return SdfScene(
        tuple(prims),
        smooth_k=k,
        ground_z=float(ground) if ground is not None else None,
        room_radius=float(room) if room is not None else None,
        name=head.get("name", Path(path).stem),
    )


def resolve_scene(name_or_path: str, background: bool = True) -> SdfScene:
    if name_or_path in BUILTIN_SCENES:
        return builtin_scene(name_or_path, background)
    return load_scene(name_or_path)


# ---------------------------------------------------------------------------
# debug export


def write_ppm(path: str | Path, color: np.ndarray) -> None:
    """Binary P6 pixmap, 8 bits per channel."""
    img = np.clip(np.round(np.asarray(color) * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    pix = np.frombuffer(parts[4], dtype=np.uint8, count=w * h * 3)
    return pix.reshape(h, w, 3).astype(np.float64) / maxval


DEPTH_MAGIC = b"INBVDEP1"


def write_depth(path: str | Path, depth: np.ndarray) -> None:
    """Little-endian: magic, <II width height, then float32 row-major; NaN = no measurement."""
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(DEPTH_MAGIC)
        fh.write(struct.pack("<II", w, h))
        fh.write(np.asarray(depth, dtype="<f4").tobytes())


def read_depth(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != DEPTH_MAGIC:
        raise ValueError("not a depth file")
    w, h = struct.unpack_from("<II", data, 8)
    return np.frombuffer(data, dtype="<f4", count=w * h, offset=16).reshape(h, w).astype(np.float64)


def backproject(capture: ViewCapture, pose: Pose | None = None) -> np.ndarray:
    """World points of every finite depth pixel, optionally with a substitute pose."""
    pose = capture.pose if pose is None else pose
    intr = capture.intrinsics
    depth = capture.depth.reshape(-1)
    valid = np.isfinite(depth)
    d_cam = intr.camera_directions(intr.pixel_centers()[valid])
    return pose.apply(d_cam * depth[valid, None])


def sphere_ray_distance(origins: np.ndarray, dirs: np.ndarray, center, radius: float) -> np.ndarray:
    """Analytic first intersection distance with a sphere (NaN on miss)."""
    oc = origins - np.asarray(center)
    b = np.sum(oc * dirs, axis=-1)
    c = np.sum(oc * oc, axis=-1) - radius * radius
    disc = b * b - c
    out = np.full(origins.shape[0], np.nan)
    ok = disc >= 0
    out[ok] = -b[ok] - np.sqrt(disc[ok])
    return out


__all__ = [
    "Primitive",
    "SdfScene",
    "ViewCapture",
    "scene_sdf",
    "render_view",
    "sphere_trace",
    "gt_surface_points",
    "builtin_scene",
    "resolve_scene",
    "load_scene",
    "write_ppm",
    "read_ppm",
    "write_depth",
    "read_depth",
    "backproject",
    "sphere_ray_distance",
]
