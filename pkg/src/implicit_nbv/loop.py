"""Run configuration, the active reconstruction loop, comparisons and ablations."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import json
import math
import time
import typing
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .field import HashGridConfig, init_field, load_field, save_field
from .geometry import (
    Aabb,
    CameraIntrinsics,
    Pose,
    SphericalView,
    ViewManifold,
    rotation_angle,
    rotation_from_vector,
    spherical_to_pose,
)
from .meshing import export_ply, marching_cubes
from .metrics import (
    CoverageReport,
    EntropyReport,
    accumulate_recon_points,
    floater_volume,
    map_entropy,
    surface_coverage,
)
from .nbv import (
    NbvConfig,
    NbvResult,
    baseline_candidate_selection,
    baseline_random,
    optimize_nbv,
)
from .sensor import ViewCapture, gt_surface_points, render_view, resolve_scene
from .supervision import LossReport, TrainConfig, TrainingView, train_round

PLANNERS = ("optimized", "candidate", "random", "sum-metric")
ABLATIONS = ("free-ray", "pose-refinement", "topnt-vs-sum", "init-strategy")

# named random sub-streams: default_rng([seed, stream, round])
STREAM_GT, STREAM_TRAIN, STREAM_PLAN, STREAM_NOISE, STREAM_INIT, STREAM_SENSOR, STREAM_FIELD = range(1, 8)


@dataclass(frozen=True)
class RunConfig:
    scene: str = "blob"
    background: bool = True
    image_size: int = 64
    focal_ratio: float = 2.5
    box_half: float = 0.25
    sensor_range: float = 8.0
    depth_noise: float = 0.0
    method: str = "optimized"
    max_views: int = 10
    pose_noise: bool = False
    noise_rotation: float = 0.05
    noise_translation: float = 0.05
    seed: int = 0
    out: str = "runs/default"
    init_azimuth: float = 0.0
    init_elevation: float = math.radians(20.0)
    random_init: bool = False
    radius: float = 1.0
    elev_min: float = math.radians(-10.0)
    elev_max: float = math.radians(80.0)
    candidates_azimuth: int = 12
    candidates_elevation: int = 4
    entropy_resolution: int = 128
    floater_resolution: int = 64
    floater_margin: float = 0.02
    coverage_points: int = 20000
    coverage_threshold: float = 0.005
    mesh_resolution: int = 128
    round_meshes: bool = True
    deterministic: bool = False
    train: TrainConfig = field(default_factory=TrainConfig)
    nbv: NbvConfig = field(default_factory=NbvConfig)
    grid: HashGridConfig = field(default_factory=HashGridConfig)

    def __post_init__(self) -> None:
        if self.method not in PLANNERS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {PLANNERS}")
        if self.max_views < 1:
            raise ValueError("max_views must be at least 1")
        if self.image_size < 2 or self.focal_ratio <= 0 or self.box_half <= 0:
            raise ValueError("image_size, focal_ratio and box_half must be positive")
        if self.noise_rotation < 0 or self.noise_translation < 0 or self.depth_noise < 0:
            raise ValueError("noise magnitudes must be non-negative")
        if min(self.entropy_resolution, self.floater_resolution, self.coverage_points) < 1:
            raise ValueError("evaluation sizes must be positive")
        if self.mesh_resolution < 2:
            raise ValueError("mesh_resolution must be at least 2")
        ViewManifold(self.radius, (0.0, 0.0, 0.0), self.elev_min, self.elev_max)

    @property
    def box(self) -> Aabb:
        return Aabb.cube(self.box_half)

    @property
    def intrinsics(self) -> CameraIntrinsics:
        return CameraIntrinsics.square(self.image_size, self.focal_ratio)

    @property
    def manifold(self) -> ViewManifold:
        return ViewManifold(self.radius, (0.0, 0.0, 0.0), self.elev_min, self.elev_max)


# ---------------------------------------------------------------------------
# configuration files

_SECTIONS = {"train": TrainConfig, "nbv": NbvConfig, "field": HashGridConfig}
_NESTED = {"train": "train", "nbv": "nbv", "field": "grid"}


def _coerce(text: str, kind) -> object:
    if kind is bool:
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text.strip())


def _scalar_fields(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if hints[f.name] in (int, float, str, bool)}


def config_from_mapping(values: dict[str, dict[str, str]], base: RunConfig | None = None) -> RunConfig:
    """Build a RunConfig from ``{section: {key: text}}``; section "run" holds top-level keys."""
    base = RunConfig() if base is None else base
    top = {}
    run_fields = _scalar_fields(RunConfig)
    for key, text in values.get("run", {}).items():
        if key not in run_fields:
            raise ValueError(f"unknown key [run] {key}")
        top[key] = _coerce(text, run_fields[key])
    for section, cls in _SECTIONS.items():
        sub = values.get(section, {})
        if not sub:
            continue
        kinds = _scalar_fields(cls)
        updates = {}
        for key, text in sub.items():
            if key not in kinds:
                raise ValueError(f"unknown key [{section}] {key}")
            updates[key] = _coerce(text, kinds[key])
        top[_NESTED[section]] = dataclasses.replace(getattr(base, _NESTED[section]), **updates)
    unknown = set(values) - {"run"} - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    return dataclasses.replace(base, **top)


def load_config(path: str | Path, base: RunConfig | None = None) -> RunConfig:
    """INI file with sections [run], [train], [nbv] and [field]."""
    parser = configparser.ConfigParser()
    with open(path, encoding="utf-8") as fh:
        parser.read_file(fh)
    return config_from_mapping({s: dict(parser[s]) for s in parser.sections()}, base)


def config_to_text(cfg: RunConfig) -> str:
    """Full effective configuration in the same INI format :func:`load_config` reads."""
    parser = configparser.ConfigParser()
    parser["run"] = {k: repr(getattr(cfg, k)) if isinstance(getattr(cfg, k), float) else str(getattr(cfg, k))
                     for k in _scalar_fields(RunConfig)}
    for section, attr in _NESTED.items():
        sub = getattr(cfg, attr)
        parser[section] = {
            k: repr(getattr(sub, k)) if isinstance(getattr(sub, k), float) else str(getattr(sub, k))
            for k in _scalar_fields(type(sub))
        }
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines += [f"{k} = {v}" for k, v in parser[section].items()]
        lines.append("")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# run state


@dataclass
class StepReport:
    round: int
    views: int
    view: SphericalView
    pose: Pose
    loss: LossReport
    nbv: NbvResult | None
    coverage: CoverageReport
    entropy: EntropyReport
    floater: float
    rotation_error: float
    translation_error: float
    seconds: dict[str, float] = field(default_factory=dict)


@dataclass
class RunResult:
    steps: list[StepReport]
    out: Path
    injected_rotation_error: float
    injected_translation_error: float


def rng_for(seed: int, stream: int, round_index: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, stream, round_index])


def perturb_pose(pose: Pose, rng: np.random.Generator, rot: float, trans: float) -> Pose:
    """R' = Exp(w) R, t' = t + delta with every component uniform in [-rot, rot] / [-trans, trans]."""
    w = rng.uniform(-rot, rot, size=3)
    delta = rng.uniform(-trans, trans, size=3)
    return Pose(rotation_from_vector(w) @ pose.rotation, pose.translation + delta)


def pose_errors(estimated: list[Pose], truth: list[Pose]) -> tuple[float, float]:
    """Mean rotation angle (rad) and translation distance (m) over non-gauge views."""
    if len(truth) < 2:
        return 0.0, 0.0
    rot = [rotation_angle(e.rotation.T @ t.rotation) for e, t in zip(estimated[1:], truth[1:])]
    tr = [float(np.linalg.norm(e.translation - t.translation)) for e, t in zip(estimated[1:], truth[1:])]
    return float(np.mean(rot)), float(np.mean(tr))


METRICS_COLUMNS = [
    ("round", "round index, 0-based; one row per round"),
    ("views", "views captured and used for training in this round"),
    ("azimuth", "azimuth of the newest captured view (rad)"),
    ("elevation", "elevation of the newest captured view (rad)"),
    ("c_s", "surface coverage: fraction of ground-truth points within the threshold of the reconstruction cloud"),
    ("entropy_bits", "mean binary entropy of the occupancy on the evaluation grid (bits)"),
    ("floater_fraction", "fraction of probe cells with o > 0.5 farther than the margin outside the object"),
    ("rot_err", "mean rotation error of non-gauge pose estimates (rad)"),
    ("trans_err", "mean translation error of non-gauge pose estimates (m)"),
    ("loss_total", "mean combined loss over the round's iterations"),
]
LOSS_COLUMNS = [
    ("round", "round index"),
    ("iteration", "iteration within the round"),
    ("color", "mean squared colour error over valid rays"),
    ("depth", "mean absolute depth error over valid rays (m)"),
    ("free", "mean -log(1 - o) over free points"),
    ("total", "color + lambda_depth*depth + lambda_free*free"),
]
TRACE_COLUMNS = [
    ("round", "round after which the view was planned"),
    ("iteration", "optimisation iteration or candidate index"),
    ("theta", "azimuth (rad)"),
    ("phi", "elevation (rad)"),
    ("I", "view information (nats)"),
    ("C_p", "movement cost"),
    ("U_v", "utility I - C_p"),
    ("method", "planner"),
]
TIMING_COLUMNS = [
    ("round", "round index"),
    ("train_s", "training wall-clock seconds"),
    ("eval_s", "evaluation wall-clock seconds"),
    ("plan_s", "planning wall-clock seconds"),
    ("capture_s", "capture wall-clock seconds"),
]


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


class CsvLog:
    """CSV file whose header is preceded by '#' lines documenting every column."""

    def __init__(self, path: Path, columns: list[tuple[str, str]]) -> None:
        self.path = path
        self.columns = columns
        self.names = [c for c, _ in columns]

    def start(self, keep: typing.Callable[[dict], bool] | None = None) -> None:
        rows = self.read() if keep is not None and self.path.exists() else []
        rows = [r for r in rows if keep(r)] if keep is not None else []
        with open(self.path, "w", newline="", encoding="utf-8") as fh:
            for name, doc in self.columns:
                fh.write(f"# {name}: {doc}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.names)
            for r in rows:
                w.writerow([r[n] for n in self.names])

    def append(self, rows: list[list]) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            for r in rows:
                w.writerow([_fmt(v) for v in r])

    def read(self) -> list[dict]:
        return read_csv(self.path)


def read_csv(path: str | Path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def _pose_json(p: Pose) -> dict:
    return {"rotation": p.rotation.tolist(), "translation": p.translation.tolist()}


def _pose_from_json(obj: dict) -> Pose:
    return Pose(np.array(obj["rotation"], dtype=np.float64), np.array(obj["translation"], dtype=np.float64))


def _threads_limit(deterministic: bool):
    if not deterministic:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - optional
        return nullcontext()
    return threadpool_limits(1)


# ---------------------------------------------------------------------------
# the loop


def _plan(cfg: RunConfig, fld, current: SphericalView, n_views: int, rng: np.random.Generator) -> NbvResult:
    intr, manifold = cfg.intrinsics, cfg.manifold
    if cfg.method == "random":
        return baseline_random(manifold, rng)
    if cfg.method == "candidate":
        cands = manifold.dome_grid(cfg.candidates_azimuth, cfg.candidates_elevation)
        return baseline_candidate_selection(fld, cands, current, intr, cfg.nbv, n_views, rng)
    nbv_cfg = cfg.nbv
    if cfg.method == "sum-metric":
        nbv_cfg = dataclasses.replace(nbv_cfg, nt_min_ratio=1.0)
    res = optimize_nbv(fld, current, manifold, intr, nbv_cfg, n_views, rng)
    res.method = cfg.method
    return res


def _capture(cfg: RunConfig, scene, view: SphericalView, index: int) -> ViewCapture:
    pose = spherical_to_pose(view)
    return render_view(
        scene,
        pose,
        cfg.intrinsics,
        d_max=cfg.train.d_max,
        noise_sigma=cfg.depth_noise,
        seed=int(rng_for(cfg.seed, STREAM_SENSOR, index).integers(2**31)),
        sensor_range=cfg.sensor_range,
    )


def _initial_view(cfg: RunConfig) -> SphericalView:
    if cfg.random_init:
        return cfg.manifold.sample(rng_for(cfg.seed, STREAM_INIT), 1)[0]
    return cfg.manifold.view(cfg.init_azimuth, cfg.init_elevation)


def run_active_loop(cfg: RunConfig, resume_round: int | None = None, log=None) -> RunResult:
    """Train, evaluate, plan and capture for ``cfg.max_views`` rounds.

    Writes metrics.csv, losses.csv, nbv_trace.csv, timings.csv,
    effective_config.txt, round_###.ply (optional), final.ply and a
    checkpoint per round under ``cfg.out``.  ``resume_round=k`` restarts
    from the checkpoint written at the end of round k.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    (out / "effective_config.txt").write_text(config_to_text(cfg), encoding="utf-8")
    scene = resolve_scene(cfg.scene, cfg.background)
    box = cfg.box
    scene.check_inside(box)
    gt_points = gt_surface_points(scene, cfg.coverage_points, int(rng_for(cfg.seed, STREAM_GT).integers(2**31)))

    metrics_log = CsvLog(out / "metrics.csv", METRICS_COLUMNS)
    loss_log = CsvLog(out / "losses.csv", LOSS_COLUMNS)
    trace_log = CsvLog(out / "nbv_trace.csv", TRACE_COLUMNS)
    time_log = CsvLog(out / "timings.csv", TIMING_COLUMNS)

    with _threads_limit(cfg.deterministic):
        if resume_round is None:
            fld = init_field(cfg.grid, box, int(rng_for(cfg.seed, STREAM_FIELD).integers(2**31)))
            views = [_initial_view(cfg)]
            captures = [_capture(cfg, scene, views[0], 0)]
            est_poses = [captures[0].pose]
            injected: list[tuple[float, float]] = []
            start = 0
            for lg in (metrics_log, loss_log, trace_log, time_log):
                lg.start()
        else:
            state = json.loads((ckpt_dir / f"state_{resume_round:03d}.json").read_text(encoding="utf-8"))
            fld = load_field(ckpt_dir / f"field_{resume_round:03d}.bin")
            views = [cfg.manifold.view(a, e) for a, e in state["views"]]
            captures = [_capture(cfg, scene, v, i) for i, v in enumerate(views)]
            est_poses = [_pose_from_json(p) for p in state["est_poses"]]
            injected = [tuple(x) for x in state["injected"]]
            k = resume_round
            metrics_log.start(lambda r: int(r["round"]) <= k)
            loss_log.start(lambda r: int(r["round"]) <= k)
            time_log.start(lambda r: int(r["round"]) <= k)
            trace_log.start(lambda r: int(r["round"]) < k)
            # round k's checkpoint precedes its planning step, so resume by planning
            start = k
        steps: list[StepReport] = []
        for r in range(start, cfg.max_views):
            resumed_plan_only = resume_round is not None and r == resume_round
            timings: dict[str, float] = {}
            if not resumed_plan_only:
                t0 = time.perf_counter()
                train_views = [
                    TrainingView(c.color, c.depth, p, c.intrinsics) for c, p in zip(captures, est_poses)
                ]
                reports = train_round(fld, train_views, cfg.train, rng_for(cfg.seed, STREAM_TRAIN, r), box)
                est_poses = [tv.pose for tv in train_views]
                timings["train_s"] = time.perf_counter() - t0
                loss_log.append([[r, i, rp.color, rp.depth, rp.free, rp.total] for i, rp in enumerate(reports)])

                t0 = time.perf_counter()
                recon = accumulate_recon_points(captures, box, est_poses)
                cov = surface_coverage(recon, gt_points, cfg.coverage_threshold)
                ent = map_entropy(fld, cfg.entropy_resolution)
                floats = floater_volume(fld, scene, cfg.floater_resolution, cfg.floater_margin)
                rot_err, tr_err = pose_errors(est_poses, [c.pose for c in captures])
                timings["eval_s"] = time.perf_counter() - t0
                mean_loss = float(np.mean([rp.total for rp in reports])) if reports else math.nan
                metrics_log.append(
                    [[r, len(views), views[-1].azimuth, views[-1].elevation, cov.coverage, ent.bits, floats,
                      rot_err, tr_err, mean_loss]]
                )
                if cfg.round_meshes:
                    export_ply(marching_cubes(fld, cfg.mesh_resolution), out / f"round_{r:03d}.ply")
                save_field(fld, ckpt_dir / f"field_{r:03d}.bin")
                state = {
                    "round": r,
                    "views": [[v.azimuth, v.elevation] for v in views],
                    "est_poses": [_pose_json(p) for p in est_poses],
                    "injected": [list(x) for x in injected],
                }
                (ckpt_dir / f"state_{r:03d}.json").write_text(json.dumps(state), encoding="utf-8")
                last_loss = reports[-1] if reports else LossReport(math.nan, math.nan, math.nan, math.nan)
            nbv_res = None
            if r + 1 < cfg.max_views:
                t0 = time.perf_counter()
                fld.frozen = True
                nbv_res = _plan(cfg, fld, views[-1], len(views), rng_for(cfg.seed, STREAM_PLAN, r))
                fld.frozen = False
                timings["plan_s"] = time.perf_counter() - t0
                trace_log.append(
                    [[r, i, th, ph, info, cost, u, nbv_res.method] for i, (th, ph, info, cost, u) in enumerate(nbv_res.trace)]
                )
                t0 = time.perf_counter()
                views.append(nbv_res.view)
                cap = _capture(cfg, scene, nbv_res.view, len(views) - 1)
                captures.append(cap)
                handed = cap.pose
                if cfg.pose_noise:
                    handed = perturb_pose(
                        cap.pose, rng_for(cfg.seed, STREAM_NOISE, len(views) - 1), cfg.noise_rotation,
                        cfg.noise_translation,
                    )
                    injected.append(pose_errors([est_poses[0], handed], [est_poses[0], cap.pose]))
                est_poses.append(handed)
                timings["capture_s"] = time.perf_counter() - t0
            time_log.append([[r, timings.get("train_s", 0.0), timings.get("eval_s", 0.0), timings.get("plan_s", 0.0),
                              timings.get("capture_s", 0.0)]])
            if not resumed_plan_only:
                steps.append(
                    StepReport(r, len(views) - (1 if nbv_res else 0), views[-2] if nbv_res else views[-1],
                               est_poses[-2] if nbv_res else est_poses[-1], last_loss, nbv_res, cov, ent, floats,
                               rot_err, tr_err, timings)
                )
            if log is not None and not resumed_plan_only:
                log(f"round {r}: views={steps[-1].views} c_s={cov.coverage:.4f} entropy={ent.bits:.4f} "
                    f"floaters={floats:.4f} rot_err={rot_err:.4f}")
        export_ply(marching_cubes(fld, cfg.mesh_resolution), out / "final.ply")
        save_field(fld, out / "final_field.bin")
    inj_rot = float(np.mean([x[0] for x in injected])) if injected else 0.0
    inj_tr = float(np.mean([x[1] for x in injected])) if injected else 0.0
    return RunResult(steps, out, inj_rot, inj_tr)


# ---------------------------------------------------------------------------
# experiments


COMPARISON_COLUMNS = [
    ("method", "planner tag"),
    ("seed", "master seed"),
    ("round", "round index"),
    ("c_s", "surface coverage"),
    ("entropy", "map entropy (bits)"),
]


def run_comparison(base: RunConfig, methods: list[str], seeds: list[int], out: str | Path, log=None) -> Path:
    """Every (method, seed) pair into its own directory plus a long-format comparison.csv.

    ``methods`` entries may be ``name`` or ``label=name`` to run one planner under several labels.
    """
    if len(methods) < 2:
        raise ValueError("a comparison needs at least two methods")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    agg = CsvLog(out / "comparison.csv", COMPARISON_COLUMNS)
    agg.start()
    for spec in methods:
        label, _, method = spec.partition("=") if "=" in spec else (spec, "", spec)
        for seed in seeds:
            cfg = dataclasses.replace(base, method=method, seed=seed, out=str(out / f"{label}_seed{seed}"))
            res = run_active_loop(cfg, log=log)
            agg.append([[label, seed, s.round, s.coverage.coverage, s.entropy.bits] for s in res.steps])
    return out / "comparison.csv"


ABLATION_COLUMNS = [
    ("kind", "ablation kind"),
    ("variant", "with / without the feature"),
    ("seed", "master seed"),
    ("round", "round index"),
    ("c_s", "surface coverage"),
    ("entropy_bits", "map entropy (bits)"),
    ("floater_fraction", "floater volume fraction"),
    ("rot_err", "mean rotation error of non-gauge pose estimates (rad)"),
    ("trans_err", "mean translation error of non-gauge pose estimates (m)"),
    ("injected_rot", "mean injected rotation error (rad)"),
    ("injected_trans", "mean injected translation error (m)"),
]


def ablation_pair(kind: str, base: RunConfig) -> list[tuple[str, RunConfig]]:
    """The matched (with, without) configurations for one ablation."""
    if kind == "free-ray":
        return [
            ("with", dataclasses.replace(base, train=dataclasses.replace(base.train, free_supervision=True))),
            ("without", dataclasses.replace(base, train=dataclasses.replace(base.train, free_supervision=False))),
        ]
    if kind == "pose-refinement":
        noisy = dataclasses.replace(base, pose_noise=True)
        return [
            ("with", dataclasses.replace(noisy, train=dataclasses.replace(base.train, refine_poses=True))),
            ("without", dataclasses.replace(noisy, train=dataclasses.replace(base.train, refine_poses=False))),
        ]
    if kind == "topnt-vs-sum":
        return [("with", dataclasses.replace(base, method="optimized")), ("without", dataclasses.replace(base, method="sum-metric"))]
    if kind == "init-strategy":
        return [
            ("with", dataclasses.replace(base, method="optimized")),
            ("without", dataclasses.replace(base, method="optimized", nbv=dataclasses.replace(base.nbv, n_init=1))),
        ]
    raise ValueError(f"unknown ablation {kind!r}; expected one of {ABLATIONS}")


def run_ablation(kind: str, base: RunConfig, seeds: list[int], out: str | Path, log=None) -> Path:
    pairs = ablation_pair(kind, base)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    agg = CsvLog(out / "ablation.csv", ABLATION_COLUMNS)
    agg.start()
    for seed in seeds:
        for variant, cfg in pairs:
            cfg = dataclasses.replace(cfg, seed=seed, out=str(out / f"{kind}_{variant}_seed{seed}"))
            res = run_active_loop(cfg, log=log)
            agg.append(
                [[kind, variant, seed, s.round, s.coverage.coverage, s.entropy.bits, s.floater, s.rotation_error,
                  s.translation_error, res.injected_rotation_error, res.injected_translation_error] for s in res.steps]
            )
    return out / "ablation.csv"


__all__ = [
    "PLANNERS",
    "ABLATIONS",
    "RunConfig",
    "StepReport",
    "RunResult",
    "config_from_mapping",
    "load_config",
    "config_to_text",
    "rng_for",
    "perturb_pose",
    "pose_errors",
    "read_csv",
    "run_active_loop",
    "run_comparison",
    "ablation_pair",
    "run_ablation",
]
