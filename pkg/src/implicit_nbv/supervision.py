"""Ray classification, point sampling, volume rendering, losses and training rounds."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from . import diff as d
from .geometry import Aabb, CameraIntrinsics, Pose, Ray, apply_twist, ray_aabb_batch, se3_exp


class RayClass(enum.IntEnum):
    NO_INTERSECTION = 1
    NO_DEPTH = 2
    DEPTH_BEYOND_RANGE = 3
    DEPTH_BEYOND_BOX = 4
    VALID = 5

    @property
    def is_free(self) -> bool:
        return self in (RayClass.DEPTH_BEYOND_RANGE, RayClass.DEPTH_BEYOND_BOX)


@dataclass(frozen=True)
class TrainConfig:
    n_rays: int = 5000
    n_surface: int = 16
    n_free: int = 16
    sigma_d: float = 0.005
    lambda_depth: float = 2.0
    lambda_free: float = 0.5
    field_lr: float = 2e-3
    pose_lr: float = 3e-3
    iterations: int = 100
    refine_poses: bool = True
    pose_warmup: int = 50  # field-only iterations before twists start moving (>= iterations: poses held)
    twist_frame: str = "camera"  # "camera": T exp(xi); "world": exp(xi) T
    free_supervision: bool = True
    d_max: float = 3.0

    def __post_init__(self) -> None:
        if min(self.n_rays, self.n_surface, self.n_free, self.iterations) <= 0:
            raise ValueError("counts must be positive")
        if self.sigma_d <= 0:
            raise ValueError("sigma_d must be positive")
        if self.pose_warmup < 0:
            raise ValueError("pose_warmup must be non-negative")
        if self.twist_frame not in ("camera", "world"):
            raise ValueError("twist_frame must be 'camera' or 'world'")


@dataclass
class LossReport:
    color: float
    depth: float
    free: float
    total: float
    class_counts: dict[int, int] = field(default_factory=dict)


@dataclass
class TrainingView:
    """A captured frame plus the reconstructor's current estimate of its pose."""

    color: np.ndarray
    depth: np.ndarray
    pose: Pose
    intrinsics: CameraIntrinsics


# ---------------------------------------------------------------------------
# classification and sampling


def classify_rays(
    origins: np.ndarray, dirs: np.ndarray, depths: np.ndarray, box: Aabb, d_max: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorised five-way classification; NaN depth means no measurement.

    Checks run in order: no box intersection, no depth, depth beyond d_max,
    depth beyond the far box plane, otherwise valid.
    """
    d_near, d_far, hit = ray_aabb_batch(origins, dirs, box)
    depths = np.asarray(depths, dtype=np.float64)
    cls = np.full(depths.shape, int(RayClass.VALID), dtype=np.int64)
    no_depth = ~np.isfinite(depths)
    with np.errstate(invalid="ignore"):
        beyond_range = depths > d_max
        beyond_box = depths > d_far
    cls[beyond_box] = RayClass.DEPTH_BEYOND_BOX
    cls[beyond_range] = RayClass.DEPTH_BEYOND_RANGE
    cls[no_depth] = RayClass.NO_DEPTH
    cls[~hit] = RayClass.NO_INTERSECTION
    return cls, d_near, d_far


def classify_ray(ray: Ray, measured_depth: float | None, box: Aabb, d_max: float):
    """Returns ``(RayClass, d_near, d_far)``; the interval is None for misses."""
    depth = np.nan if measured_depth is None else float(measured_depth)
    cls, dn, df = classify_rays(ray.origin[None], ray.direction[None], np.array([depth]), box, d_max)
    c = RayClass(int(cls[0]))
    if c == RayClass.NO_INTERSECTION:
        return c, None, None
    return c, float(dn[0]), float(df[0])


def sample_free_points(d_near, d_far, n: int, rng: np.random.Generator) -> np.ndarray:
    """One uniform sample in each of ``n`` equal sub-intervals of [d_near, d_far].

    Accepts scalars or (R,) arrays; returns (n,) or (R, n), ascending.
    """
    d_near = np.asarray(d_near, dtype=np.float64)
    d_far = np.asarray(d_far, dtype=np.float64)
    jitter = rng.uniform(0.0, 1.0, size=d_near.shape + (n,))
    frac = (np.arange(n) + jitter) / n
    return d_near[..., None] + (d_far - d_near)[..., None] * frac


def sample_surface_points(depth, sigma: float, n: int, d_near, d_far, rng: np.random.Generator) -> np.ndarray:
    """Draws from N(depth, sigma^2), clamped to [d_near, d_far], sorted per ray."""
    depth = np.asarray(depth, dtype=np.float64)
    t = depth[..., None] + sigma * rng.standard_normal(size=depth.shape + (n,))
    t = np.clip(t, np.asarray(d_near)[..., None], np.asarray(d_far)[..., None])
    return np.sort(t, axis=-1)


# ---------------------------------------------------------------------------
# rendering


def render_weights(occ):
    """w_i = o_i * prod_{j<i} (1 - o_j) along the last axis, via log-space prefix sums.

    A sample with o = 1 makes every later transmittance 0 (floored at 1e-300
    before the log, which only matters for test doubles: field logits are clamped).
    """
    log_free = d.log(d.maximum(d.sub(1.0, occ), 1e-300))
    trans = d.exp(d.exclusive_cumsum(log_free, axis=-1))
    return d.mul(occ, trans), trans


def composite(occ, color, params: np.ndarray):
    """Rendered colour (R, 3), depth (R,) and weights (R, S) for batched samples."""
    w, _ = render_weights(occ)
    c_hat = d.sum(d.mul(d.reshape(w, d.value_of(w).shape + (1,)), color), axis=-2)
    d_hat = d.sum(d.mul(w, params), axis=-1)
    return c_hat, d_hat, w


def render_ray(field, ray: Ray, params, tape: d.Tape | None = None):
    """Colour, depth and weights for one ray at ascending ray parameters."""
    params = np.asarray(params, dtype=np.float64)
    if np.any(np.diff(params) < 0):
        raise ValueError("ray parameters must be ascending")
    x = ray.origin[None, :] + params[:, None] * ray.direction[None, :]
    occ, col = field.query(x, tape)
    c_hat, d_hat, w = composite(d.reshape(occ, (1, -1)), d.reshape(col, (1, -1, 3)), params[None, :])
    return c_hat[0], d_hat[0], w[0]


def render_image(
    field_model, pose: Pose, intr: CameraIntrinsics, n_samples: int = 128, box: Aabb | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Colour (H, W, 3) and expected depth (H, W) from evenly spaced samples on each box interval.

    Pixels whose ray misses the box get black colour and NaN depth.
    """
    box = field_model.box if box is None else box
    px = intr.pixel_centers()
    dirs = intr.camera_directions(px) @ pose.rotation.T
    origins = np.broadcast_to(pose.translation, dirs.shape)
    d_near, d_far, hit = ray_aabb_batch(origins, dirs, box)
    color = np.zeros((px.shape[0], 3))
    depth = np.full(px.shape[0], np.nan)
    rows = np.nonzero(hit)[0]
    frac = (np.arange(n_samples) + 0.5) / n_samples
    for s in range(0, rows.size, 2048):
        r = rows[s : s + 2048]
        t = d_near[r, None] + (d_far[r] - d_near[r])[:, None] * frac
        x = origins[r, None, :] + t[..., None] * dirs[r, None, :]
        occ, col = field_model.query(x.reshape(-1, 3))
        c_hat, d_hat, w = composite(occ.reshape(t.shape), col.reshape(t.shape + (3,)), t)
        color[r] = c_hat
        depth[r] = np.where(np.sum(w, axis=-1) > 1e-6, d_hat / np.maximum(np.sum(w, axis=-1), 1e-12), np.nan)
    return color.reshape(intr.height, intr.width, 3), depth.reshape(intr.height, intr.width)


# ---------------------------------------------------------------------------
# batches and losses


@dataclass
class RayBatch:
    """Frozen sample set: everything except the field and pose twists is constant.

    Valid rays carry ``n_free`` in-front samples on [d_near, depth - 3 sigma]
    (masked out when that segment is empty) followed by ``n_surface``
    depth-guided samples, all sorted.
    """

    valid_view: np.ndarray  # (Rv,)
    valid_dir_cam: np.ndarray  # (Rv, 3)
    valid_t: np.ndarray  # (Rv, S)
    valid_free_mask: np.ndarray  # (Rv, S) True for in-front free samples
    valid_render_mask: np.ndarray  # (Rv, S)
    valid_color: np.ndarray  # (Rv, 3)
    valid_depth: np.ndarray  # (Rv,)
    free_view: np.ndarray  # (Rf,)
    free_dir_cam: np.ndarray  # (Rf, 3)
    free_t: np.ndarray  # (Rf, n_free)
    class_counts: dict[int, int]

    @property
    def n_valid(self) -> int:
        return int(self.valid_view.shape[0])

    @property
    def n_free_rays(self) -> int:
        return int(self.free_view.shape[0])


def _pose_arrays(poses: list[Pose]) -> tuple[np.ndarray, np.ndarray]:
    return np.stack([p.rotation for p in poses]), np.stack([p.translation for p in poses])


def build_batch(
    views: list[TrainingView], cfg: TrainConfig, box: Aabb, rng: np.random.Generator, n_rays: int | None = None
) -> RayBatch:
    """Draw rays uniformly over all (view, pixel) pairs, classify and sample them."""
    n_rays = cfg.n_rays if n_rays is None else n_rays
    sizes = np.array([v.depth.size for v in views])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat = rng.integers(0, offsets[-1], size=n_rays)
    view_idx = np.searchsorted(offsets, flat, side="right") - 1
    pix = flat - offsets[view_idx]
    rot, trans = _pose_arrays([v.pose for v in views])
    dir_cam = np.empty((n_rays, 3))
    depth = np.empty(n_rays)
    color = np.empty((n_rays, 3))
    for i, v in enumerate(views):
        sel = view_idx == i
        if not np.any(sel):
            continue
        intr = v.intrinsics
        p = pix[sel]
        px = np.stack([p % intr.width + 0.5, p // intr.width + 0.5], axis=-1).astype(np.float64)
        dir_cam[sel] = intr.camera_directions(px)
        depth[sel] = v.depth.reshape(-1)[p]
        color[sel] = v.color.reshape(-1, 3)[p]
    origins = trans[view_idx]
    dirs = np.einsum("rij,rj->ri", rot[view_idx], dir_cam)
    cls, d_near, d_far = classify_rays(origins, dirs, depth, box, cfg.d_max)
    counts = {int(c): int(np.sum(cls == c)) for c in RayClass}

    valid = cls == RayClass.VALID
    free = (cls == RayClass.DEPTH_BEYOND_RANGE) | (cls == RayClass.DEPTH_BEYOND_BOX)
    if not cfg.free_supervision:
        free = np.zeros_like(free)

    dn, df, dep = d_near[valid], d_far[valid], depth[valid]
    seg_end = np.minimum(dep - 3.0 * cfg.sigma_d, df)
    has_seg = seg_end > dn
    t_front = sample_free_points(dn, np.where(has_seg, seg_end, dn + 1e-9), cfg.n_free, rng)
    t_front = np.where(has_seg[:, None], t_front, dn[:, None])
    t_surf = sample_surface_points(dep, cfg.sigma_d, cfg.n_surface, dn, df, rng)
    t_all = np.concatenate([t_front, t_surf], axis=1)
    is_front = np.concatenate(
        [np.broadcast_to(has_seg[:, None], t_front.shape), np.zeros(t_surf.shape, dtype=bool)], axis=1
    )
    render_mask = np.concatenate([np.broadcast_to(has_seg[:, None], t_front.shape), np.ones(t_surf.shape, dtype=bool)], axis=1)
    order = np.argsort(t_all, axis=1, kind="stable")
    t_all = np.take_along_axis(t_all, order, axis=1)
    is_front = np.take_along_axis(is_front, order, axis=1)
    render_mask = np.take_along_axis(render_mask, order, axis=1)
    if not cfg.free_supervision:
        is_front = np.zeros_like(is_front)

    t_free = sample_free_points(d_near[free], d_far[free], cfg.n_free, rng)
    return RayBatch(
        valid_view=view_idx[valid],
        valid_dir_cam=dir_cam[valid],
        valid_t=t_all,
        valid_free_mask=is_front,
        valid_render_mask=render_mask,
        valid_color=color[valid],
        valid_depth=dep,
        free_view=view_idx[free],
        free_dir_cam=dir_cam[free],
        free_t=t_free,
        class_counts=counts,
    )


def view_poses(base: list[Pose], twists=None, frame: str = "world"):
    """Per-view rotations (V, 3, 3) and centres (V, 3), optionally perturbed by twists (V, 6).

    ``frame="world"`` applies exp(xi) T, ``frame="camera"`` applies T exp(xi).
    """
    rot, trans = _pose_arrays(base)
    if twists is None:
        return rot, trans
    r_exp, t_exp = se3_exp(twists)
    if frame == "camera":
        rot_w = d.matmul(rot, r_exp)
        trans_w = d.add(d.reshape(d.matmul(rot, d.reshape(t_exp, trans.shape + (1,))), trans.shape), trans)
        return rot_w, trans_w
    if frame != "world":
        raise ValueError(f"unknown twist frame {frame!r}")
    rot_w = d.matmul(r_exp, rot)
    trans_w = d.add(d.reshape(d.matmul(r_exp, trans[..., None]), trans.shape), t_exp)
    return rot_w, trans_w


def fold_twist(pose: Pose, twist, frame: str = "world") -> Pose:
    """The pose that :func:`view_poses` produces for one view."""
    if frame == "camera":
        rot, trans = se3_exp(np.asarray(twist, dtype=np.float64))
        return pose.compose(Pose(rot, trans))
    return apply_twist(pose, twist)


def _points(rot, trans, view_idx: np.ndarray, dir_cam: np.ndarray, t: np.ndarray):
    """World sample positions (R*S, 3) for rays given per-view poses."""
    r = d.getitem(rot, view_idx) if d.is_var(rot) else rot[view_idx]
    o = d.getitem(trans, view_idx) if d.is_var(trans) else trans[view_idx]
    dirs = d.reshape(d.matmul(r, dir_cam[..., None]), dir_cam.shape)
    rays, steps = t.shape
    dirs3 = d.reshape(dirs, (rays, 1, 3))
    o3 = d.reshape(o, (rays, 1, 3))
    x = d.add(o3, d.mul(t[..., None], dirs3))
    return d.reshape(x, (rays * steps, 3))


def batch_loss(
    field_model, batch: RayBatch, poses: list[Pose], cfg: TrainConfig, tape: d.Tape | None = None, twists=None
):
    """Combined loss on a frozen batch.

    Returns ``(total, LossReport)``; ``total`` is a Var when a tape is given.
    """
    if batch.n_valid == 0 and batch.n_free_rays == 0:
        raise ValueError("empty batch: no valid or free rays")
    rot, trans = view_poses(poses, twists, cfg.twist_frame)
    pts = []
    if batch.n_valid:
        pts.append(_points(rot, trans, batch.valid_view, batch.valid_dir_cam, batch.valid_t))
    if batch.n_free_rays:
        pts.append(_points(rot, trans, batch.free_view, batch.free_dir_cam, batch.free_t))
    x = d.concatenate(pts, axis=0) if len(pts) > 1 else pts[0]
    occ, col = field_model.query(x, tape)

    n_valid_pts = batch.valid_t.size
    color_loss = depth_loss = 0.0
    free_terms = []
    if batch.n_valid:
        rv, s = batch.valid_t.shape
        o_v = d.reshape(d.getitem(occ, slice(0, n_valid_pts)) if d.is_var(occ) else occ[:n_valid_pts], (rv, s))
        c_v = d.reshape(d.getitem(col, slice(0, n_valid_pts)) if d.is_var(col) else col[:n_valid_pts], (rv, s, 3))
        o_r = d.mul(o_v, batch.valid_render_mask.astype(np.float64))
        c_hat, d_hat, _ = composite(o_r, c_v, batch.valid_t)
        diff_c = d.sub(c_hat, batch.valid_color)
        color_loss = d.mean(d.sum(d.mul(diff_c, diff_c), axis=-1))
        depth_loss = d.mean(d.absolute(d.sub(d_hat, batch.valid_depth)))
        if np.any(batch.valid_free_mask):
            flat_mask = np.nonzero(batch.valid_free_mask.reshape(-1))[0]
            free_terms.append(d.getitem(d.reshape(o_v, (-1,)), flat_mask) if d.is_var(o_v) else o_v.reshape(-1)[flat_mask])
    if batch.n_free_rays:
        free_terms.append(d.getitem(occ, slice(n_valid_pts, None)) if d.is_var(occ) else occ[n_valid_pts:])
    free_loss = 0.0
    if free_terms:
        o_f = d.concatenate(free_terms, axis=0) if len(free_terms) > 1 else free_terms[0]
        free_loss = d.mean(d.neg(d.log(d.sub(1.0, o_f))))
    total = d.add(d.add(color_loss, d.mul(cfg.lambda_depth, depth_loss)), d.mul(cfg.lambda_free, free_loss))
    report = LossReport(
        color=float(d.value_of(color_loss)),
        depth=float(d.value_of(depth_loss)),
        free=float(d.value_of(free_loss)),
        total=float(d.value_of(total)),
        class_counts=dict(batch.class_counts),
    )
    return total, report


def compute_losses(field_model, batch: RayBatch, poses: list[Pose], cfg: TrainConfig) -> LossReport:
    return batch_loss(field_model, batch, poses, cfg)[1]


def train_round(
    field_model, views: list[TrainingView], cfg: TrainConfig, rng: np.random.Generator, box: Aabb | None = None
) -> list[LossReport]:
    """``cfg.iterations`` joint steps on the field and (optionally) per-view pose twists.

    View 0's twist is held at zero.  Adam moments are reset at the start of the
    round.  Refined twists are folded into ``views[i].pose`` at the end.
    """
    if not views:
        raise ValueError("train_round needs at least one view")
    box = field_model.box if box is None else box
    store = field_model.store
    store.reset_moments("field")
    store.zero_grad("field")
    refine = cfg.refine_poses and len(views) > 1
    pose_store = d.ParamStore()
    pose_store.add("twist", np.zeros((len(views), 6)), "poses")
    poses = [v.pose for v in views]
    reports = []
    was_frozen = field_model.frozen
    field_model.frozen = False
    try:
        for it in range(cfg.iterations):
            batch = build_batch(views, cfg, box, rng)
            if batch.n_valid == 0 and batch.n_free_rays == 0:
                continue
            tape = d.Tape()
            moving = refine and it >= cfg.pose_warmup
            twists = pose_store.leaf(tape, "twist") if moving else None
            total, report = batch_loss(field_model, batch, poses, cfg, tape, twists)
            if d.is_var(total):
                tape.backward(total)
            d.adam_step(store, "field", cfg.field_lr)
            if moving:
                pose_store.grads["twist"][0] = 0.0
                d.adam_step(pose_store, "poses", cfg.pose_lr)
            reports.append(report)
    finally:
        field_model.frozen = was_frozen
    if refine:
        tw = pose_store.params["twist"]
        for i, v in enumerate(views):
            if i > 0:
                v.pose = fold_twist(v.pose, tw[i], cfg.twist_frame)
    return reports


__all__ = [
    "RayClass",
    "TrainConfig",
    "LossReport",
    "TrainingView",
    "RayBatch",
    "classify_rays",
    "classify_ray",
    "sample_free_points",
    "sample_surface_points",
    "render_weights",
    "composite",
    "render_ray",
    "render_image",
    "build_batch",
    "batch_loss",
    "compute_losses",
    "train_round",
    "view_poses",
    "fold_twist",
]
