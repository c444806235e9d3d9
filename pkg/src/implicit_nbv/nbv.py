"""View-information metrics and next-best-view search on the spherical manifold."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import diff as d
from .geometry import (
    Aabb,
    CameraIntrinsics,
    Pose,
    SphericalView,
    ViewManifold,
    look_at_components,
    ray_aabb_batch,
)
from .supervision import render_weights

METHODS = ("optimized", "candidate", "random")


@dataclass(frozen=True)
class NbvConfig:
    n_eval_rays: int = 5000
    n_points: int = 16
    n_init: int = 48
    lr: float = 1e-2
    iterations: int = 100
    nt_min_ratio: float = 0.05
    nt_period: float = 20.0
    lambda_dist: float = 0.0
    lambda_ground: float = 0.5
    ground_margin: float = 0.0
    ground_softness: float = 0.02
    smooth_window: int = 5

    def __post_init__(self) -> None:
        if min(self.n_eval_rays, self.n_points, self.n_init, self.iterations, self.smooth_window) <= 0:
            raise ValueError("counts must be positive")
        if not 0.0 < self.nt_min_ratio <= 1.0:
            raise ValueError("nt_min_ratio must lie in (0, 1]")
        if self.ground_softness <= 0:
            raise ValueError("ground_softness must be positive")


@dataclass
class NbvResult:
    view: SphericalView
    pose: Pose
    utility: float
    information: float
    method: str
    trace: list[tuple[float, float, float, float, float]] = field(default_factory=list)
    """Rows of (azimuth, elevation, information, cost, utility)."""


def point_entropy(o):
    """Binary entropy in nats; dual-mode."""
    return d.binary_entropy(o)


def schedule_nt(n_views: int, n_eval: int, min_ratio: float = 0.05, period: float = 20.0) -> int:
    """Cosine schedule for the number of top rays kept in the view information."""
    if n_views < 0:
        raise ValueError("n_views must be non-negative")
    ratio = min(max(math.cos(math.pi * n_views / period), min_ratio), 1.0)
    return int(min(max(round(n_eval * ratio), 1), n_eval))


@dataclass
class EvalSamples:
    """Frozen evaluation samples: camera-frame directions and absolute ray parameters.

    ``hit`` marks rays that met the box when the samples were drawn; the rest
    contribute a per-ray sum of zero.
    """

    dir_cam: np.ndarray  # (N_e, 3)
    t: np.ndarray  # (N_e, N_p)
    hit: np.ndarray  # (N_e,)


def draw_eval_samples(
    rotation: np.ndarray,
    position: np.ndarray,
    intr: CameraIntrinsics,
    box: Aabb,
    n_rays: int,
    n_points: int,
    rng: np.random.Generator,
) -> EvalSamples:
    """Uniform pixel positions and stratified points on each ray's box interval."""
    px = np.stack([rng.uniform(0.0, intr.width, n_rays), rng.uniform(0.0, intr.height, n_rays)], axis=-1)
    dir_cam = intr.camera_directions(px)
    dirs = dir_cam @ np.asarray(rotation).T
    origins = np.broadcast_to(np.asarray(position, dtype=np.float64), dirs.shape)
    d_near, d_far, hit = ray_aabb_batch(origins, dirs, box)
    jitter = rng.uniform(0.0, 1.0, size=(n_rays, n_points))
    frac = (np.arange(n_points) + jitter) / n_points
    d_far = np.where(hit, d_far, d_near)
    t = d_near[:, None] + (d_far - d_near)[:, None] * frac
    return EvalSamples(dir_cam, t, hit)


def per_ray_information(field_model, rotation, position, samples: EvalSamples):
    """Per-ray sums of occlusion-weighted point entropy, (N_e,); dual-mode in the pose."""
    n_rays, n_points = samples.t.shape
    rows = np.nonzero(samples.hit)[0]
    if rows.size == 0:
        return np.zeros(n_rays)
    dir_hit = samples.dir_cam[rows]
    dirs = d.reshape(d.matmul(rotation, dir_hit[..., None]), (rows.size, 1, 3))
    x = d.add(d.reshape(position, (1, 1, 3)), d.mul(samples.t[rows][..., None], dirs))
    occ, _ = field_model.query(d.reshape(x, (rows.size * n_points, 3)))
    occ = d.reshape(occ, (rows.size, n_points))
    _, trans = render_weights(occ)
    sums = d.sum(d.mul(trans, point_entropy(occ)), axis=-1)
    if rows.size == n_rays:
        return sums
    return _scatter(sums, rows, n_rays)


def _scatter(values, rows: np.ndarray, n: int):
    if not d.is_var(values):
        out = np.zeros(n)
        out[rows] = values
        return out
    vals = values.value
    out = np.zeros(n)
    out[rows] = vals

    def backward(g):
        return (g[rows],)

    return d.record(out, (values,), backward)


def top_nt_information(sums, n_t: int, n_points: int):
    """Mean of the ``n_t`` largest per-ray sums divided by the points per ray."""
    return d.div(d.topk_mean(sums, n_t), float(n_points))


def view_information(
    field_model,
    pose: Pose,
    intr: CameraIntrinsics,
    cfg: NbvConfig,
    n_t: int,
    rng: np.random.Generator,
    box: Aabb | None = None,
    samples: EvalSamples | None = None,
) -> float:
    """Top-N_t view information of a fixed pose (value only)."""
    box = field_model.box if box is None else box
    if not 1 <= n_t <= cfg.n_eval_rays:
        raise ValueError(f"n_t={n_t} outside [1, {cfg.n_eval_rays}]")
    if samples is None:
        samples = draw_eval_samples(pose.rotation, pose.translation, intr, box, cfg.n_eval_rays, cfg.n_points, rng)
    sums = per_ray_information(field_model, pose.rotation, pose.translation, samples)
    return float(top_nt_information(sums, n_t, samples.t.shape[1]))


def mean_entropy_information(field_model, pose: Pose, intr: CameraIntrinsics, cfg: NbvConfig, rng, box=None) -> float:
    """Average point entropy over the frustum samples with no occlusion weighting.

    A simple stand-in for average-energy style metrics; not used by the planner.
    """
    box = field_model.box if box is None else box
    s = draw_eval_samples(pose.rotation, pose.translation, intr, box, cfg.n_eval_rays, cfg.n_points, rng)
    if not np.any(s.hit):
        return 0.0
    dirs = s.dir_cam[s.hit] @ pose.rotation.T
    x = pose.translation + s.t[s.hit][..., None] * dirs[:, None, :]
    occ = field_model.occupancy(x.reshape(-1, 3))
    return float(np.mean(point_entropy(occ)))


def movement_cost(view_theta, view_phi, current: SphericalView | None, cfg: NbvConfig):
    """lambda_dist * great-circle angle to ``current`` + lambda_ground * softplus((margin - phi) / s).

    Dual-mode in ``view_theta`` / ``view_phi``.
    """
    ground = d.mul(cfg.lambda_ground, d.softplus(d.div(d.sub(cfg.ground_margin, view_phi), cfg.ground_softness)))
    if cfg.lambda_dist == 0.0 or current is None:
        return ground
    u = d.stack(
        [d.mul(d.cos(view_phi), d.cos(view_theta)), d.mul(d.cos(view_phi), d.sin(view_theta)), d.sin(view_phi)]
    )
    diff_v = d.sub(u, current.unit())
    chord = d.sqrt(d.add(d.sum(d.mul(diff_v, diff_v)), 1e-24))
    half = d.clamp(d.mul(0.5, chord), 0.0, 1.0)
    angle = d.mul(2.0, d.unary(half, np.arcsin, lambda h: 1.0 / np.sqrt(np.maximum(1.0 - h * h, 1e-300))))
    return d.add(d.mul(cfg.lambda_dist, angle), ground)


def _utility(field_model, view: SphericalView, current, intr, cfg, n_t, rng, box, tape=None, samples=None):
    """Returns (utility, information, cost, samples) with Var outputs when a tape is given."""
    if tape is not None:
        ang = tape.leaf(np.array([view.azimuth, view.elevation]))
        theta, phi = ang[0], ang[1]
    else:
        ang, theta, phi = None, view.azimuth, view.elevation
    position, rotation = look_at_components(theta, phi, view.radius, view.center)
    if samples is None:
        samples = draw_eval_samples(
            d.value_of(rotation), d.value_of(position), intr, box, cfg.n_eval_rays, cfg.n_points, rng
        )
    info = top_nt_information(per_ray_information(field_model, rotation, position, samples), n_t, cfg.n_points)
    cost = movement_cost(theta, phi, current, cfg)
    return d.sub(info, cost), info, cost, samples, ang


def view_utility(field_model, view: SphericalView, current, intr, cfg, n_t, rng, box=None) -> tuple[float, float, float]:
    """(utility, information, cost) of one view, value only."""
    box = field_model.box if box is None else box
    u, i, c, _, _ = _utility(field_model, view, current, intr, cfg, n_t, rng, box)
    return float(u), float(i), float(c)


def information_gradient(field_model, view: SphericalView, intr, cfg, n_t, samples: EvalSamples, box=None):
    """Value and (d/dtheta, d/dphi) of the view information on a frozen sample set."""
    box = field_model.box if box is None else box
    tape = d.Tape()
    was = field_model.frozen
    field_model.frozen = True
    try:
        _, info, _, _, ang = _utility(field_model, view, None, intr, cfg, n_t, None, box, tape, samples)
    finally:
        field_model.frozen = was
    if not d.is_var(info):
        return float(info), np.zeros(2)
    tape.backward(info)
    return float(info.value), ang.grad.copy()


def _result(view: SphericalView, utility, info, method, trace) -> NbvResult:
    return NbvResult(view, _pose_of(view), float(utility), float(info), method, trace)


def _pose_of(view: SphericalView) -> Pose:
    position, rotation = look_at_components(view.azimuth, view.elevation, view.radius, view.center)
    return Pose(rotation, position)


def initialize_by_sampling(
    field_model,
    manifold: ViewManifold,
    n_samples: int,
    cfg: NbvConfig,
    rng: np.random.Generator,
    intr: CameraIntrinsics,
    n_t: int,
    current: SphericalView | None = None,
    box: Aabb | None = None,
) -> tuple[SphericalView, float]:
    """Best of ``n_samples`` uniform manifold views by utility; ties go to the lowest index."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    views = manifold.sample(rng, n_samples)
    utils = [view_utility(field_model, v, current, intr, cfg, n_t, rng, box)[0] for v in views]
    best = int(np.argmax(utils))
    return views[best], float(utils[best])


def optimize_nbv(
    field_model,
    current: SphericalView | None,
    manifold: ViewManifold,
    intr: CameraIntrinsics,
    cfg: NbvConfig,
    n_views: int,
    rng: np.random.Generator,
    box: Aabb | None = None,
) -> NbvResult:
    """Sampling initialisation followed by Adam ascent of the utility on (azimuth, elevation).

    Rays are resampled every iteration.  The returned view is the iterate with
    the highest running median of the last ``smooth_window`` utilities.
    """
    box = field_model.box if box is None else box
    n_t = schedule_nt(n_views, cfg.n_eval_rays, cfg.nt_min_ratio, cfg.nt_period)
    was = field_model.frozen
    field_model.frozen = True
    try:
        start, _ = initialize_by_sampling(field_model, manifold, cfg.n_init, cfg, rng, intr, n_t, current, box)
        store = d.ParamStore()
        store.add("angles", np.array([start.azimuth, start.elevation]), "view")
        trace = []
        for _ in range(cfg.iterations):
            theta, phi = store.params["angles"]
            view = manifold.view(theta, phi)
            tape = d.Tape()
            u, info, cost, _, ang = _utility(field_model, view, current, intr, cfg, n_t, rng, box, tape)
            trace.append((view.azimuth, view.elevation, float(info), float(cost), float(u)))
            if d.is_var(u):
                tape.backward(u)
                store.grads["angles"] -= ang.grad  # ascent
            d.adam_step(store, "view", cfg.lr)
            a = store.params["angles"]
            a[0] = a[0] % (2 * math.pi)
            a[1] = manifold.clamp_elevation(a[1])
    finally:
        field_model.frozen = was
    utils = np.array([row[4] for row in trace])
    w = cfg.smooth_window
    smoothed = np.array([np.median(utils[max(0, k - w + 1) : k + 1]) for k in range(len(utils))])
    best = int(np.argmax(smoothed))
    row = trace[best]
    return _result(manifold.view(row[0], row[1]), row[4], row[2], "optimized", trace)


def baseline_candidate_selection(
    field_model,
    candidates: list[SphericalView],
    current: SphericalView | None,
    intr: CameraIntrinsics,
    cfg: NbvConfig,
    n_views: int,
    rng: np.random.Generator,
    box: Aabb | None = None,
) -> NbvResult:
    """Utility argmax over a fixed candidate set; ties go to the lowest index."""
    if not candidates:
        raise ValueError("empty candidate set")
    n_t = schedule_nt(n_views, cfg.n_eval_rays, cfg.nt_min_ratio, cfg.nt_period)
    trace = []
    for v in candidates:
        u, i, c = view_utility(field_model, v, current, intr, cfg, n_t, rng, box)
        trace.append((v.azimuth, v.elevation, i, c, u))
    best = int(np.argmax([row[4] for row in trace]))
    return _result(candidates[best], trace[best][4], trace[best][2], "candidate", trace)


def baseline_random(manifold: ViewManifold, rng: np.random.Generator) -> NbvResult:
    """Uniform view in (azimuth, elevation); utility and information are not evaluated (NaN)."""
    view = manifold.sample(rng, 1)[0]
    return _result(view, math.nan, math.nan, "random", [(view.azimuth, view.elevation, math.nan, math.nan, math.nan)])


__all__ = [
    "METHODS",
    "NbvConfig",
    "NbvResult",
    "EvalSamples",
    "point_entropy",
    "schedule_nt",
    "draw_eval_samples",
    "per_ray_information",
    "top_nt_information",
    "view_information",
    "mean_entropy_information",
    "movement_cost",
    "view_utility",
    "information_gradient",
    "initialize_by_sampling",
    "optimize_nbv",
    "baseline_candidate_selection",
    "baseline_random",
]
