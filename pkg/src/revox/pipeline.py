"""Round orchestration: train on originals, synthesize and mask in-between
views from the trained model, retrain from scratch, iterate.

Round 0 is the baseline fit on the original views.  Each later round renders
interpolated views with the previous round's model, masks their uncertain
pixels, and trains a fresh grid on originals plus the masked synthetic views
(synthetic rays are only sampled early in the schedule).  Evaluation is
always against ground-truth renders of the held-out test cameras.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, format_config
from .field import VoxelGrid, build_scene, init_grid, save_grid
from .geometry import Camera, Pose, interpolate_pose, order_poses_by_proximity
from .metrics import MetricsRow, psnr, ssim, write_metrics_csv
from .optim import (
    TrainConfig,
    TrainingDivergedError,
    TrainingView,
    original_view,
    save_loss_curve,
    train,
)
from .render import render_image, save_float_sidecar, save_gray16_png, save_image_png
from .scenes import orbit_cameras, scene_from_preset
from .uncertainty import (
    DeformationField,
    MaskRule,
    UncertaintyField,
    accumulate_hessian,
    build_ray_pool,
    make_mask,
    render_uncertainty,
    sigma_field,
)

THREADS_ENV = "RENERF_THREADS"


class TrainingAbort(RuntimeError):
    """Training diverged inside a round; carries the round and the cause."""

    def __init__(self, round_index: int, cause: TrainingDivergedError):
        super().__init__(f"round {round_index}: {cause}")
        self.round_index = round_index
        self.cause = cause

# Seed-stream tags so every stochastic stage gets an independent generator.
_SEED_INIT = 0
_SEED_TRAIN = 1
_SEED_POOL = 2
_SEED_RANDOM_POSES = 3


def derive_seed(base: int, tag: int, round_index: int) -> int:
    return int(np.random.SeedSequence((base, tag, round_index)).generate_state(1)[0])


def worker_count() -> int:
    raw = os.environ.get(THREADS_ENV, "").strip()
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be >= 1, got {n}")
        return n
    return os.cpu_count() or 1


def parallel_map(fn, items):
    """Ordered map over independent items, capped by RENERF_THREADS."""
    items = list(items)
    workers = min(worker_count(), len(items))
    if workers <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass
class ExperimentContext:
    """Immutable per-experiment assets shared by all rounds."""

    config: ExperimentConfig
    gt_grid: VoxelGrid
    background: np.ndarray
    train_cameras: list[Camera]
    test_cameras: list[Camera]
    train_images: list[np.ndarray]
    test_images: list[np.ndarray]


def prepare_experiment(config: ExperimentConfig) -> ExperimentContext:
    """Build the ground-truth scene and render the train/test images once."""
    scene = scene_from_preset(config.scene_preset)
    gt_grid = build_scene(scene, config.gt_resolution, config.bbox_min, config.bbox_max)
    rig = dict(
        radius=config.orbit_radius,
        height=config.orbit_height,
        target=config.orbit_target,
        image_width=config.image_width,
        image_height=config.image_height,
        focal=config.focal,
        near=config.near,
        far=config.far,
    )
    train_cameras = orbit_cameras(config.n_train_cameras, phase=0.0, **rig)
    test_cameras = orbit_cameras(
        config.n_test_cameras, phase=np.pi / config.n_train_cameras, **rig
    )
    for tc in test_cameras:
        for trc in train_cameras:
            if np.linalg.norm(tc.pose.position - trc.pose.position) < 1e-9:
                raise ValueError("train and test camera sets must be disjoint")
    bg = scene.background_color

    def _render(cam):
        return render_image(gt_grid, cam, config.gt_n_samples, bg)[0]

    train_images = parallel_map(_render, train_cameras)
    test_images = parallel_map(_render, test_cameras)
    return ExperimentContext(
        config, gt_grid, bg, train_cameras, test_cameras, train_images, test_images
    )


def resolved_factors(config: ExperimentConfig) -> tuple[float, ...]:
    from .geometry import interpolation_factors, preset_factors

    if config.factor_preset is not None:
        return preset_factors(config.factor_preset)
    if config.factor_n is not None:
        return interpolation_factors(config.factor_n)
    return ()


@dataclass
class SynthesisResult:
    views: list[TrainingView]
    umaps: list[np.ndarray | None]
    mus: list[float]

    def extend(self, other: "SynthesisResult") -> None:
        self.views.extend(other.views)
        self.umaps.extend(other.umaps)
        self.mus.extend(other.mus)


def _masked_view(
    grid: VoxelGrid,
    camera: Camera,
    ufield: UncertaintyField | None,
    mask_rule: MaskRule,
    n_samples: int,
    background,
    round_index: int,
):
    image, _ = render_image(grid, camera, n_samples, background)
    if ufield is None:
        keep = np.ones((camera.height, camera.width), dtype=bool)
        umap, mu = None, float("inf")
    else:
        umap = render_uncertainty(grid, ufield, camera, n_samples)
        keep, mu = make_mask(umap, mask_rule)
    view = TrainingView(camera, image, keep, "synthetic", round_index)
    return view, umap, mu


def synthesize_views(
    grid: VoxelGrid,
    train_cameras: list[Camera],
    factors,
    *,
    ufield: UncertaintyField | None,
    mask_rule: MaskRule,
    n_samples: int,
    background,
    round_index: int,
) -> SynthesisResult:
    """Render masked views at interpolated poses between neighboring cameras.

    Cameras are chained by position proximity; each consecutive pair (open
    chain, no wrap-around) contributes one view per interpolation factor, with
    intrinsics copied from the pair's first camera.
    """
    if len(train_cameras) < 2:
        raise ValueError("need at least 2 train cameras to interpolate")
    order = order_poses_by_proximity([cam.pose for cam in train_cameras])
    jobs = []
    for a, b in zip(order[:-1], order[1:]):
        cam_a = train_cameras[a]
        cam_b = train_cameras[b]
        for beta in factors:
            pose = interpolate_pose(cam_a.pose, cam_b.pose, beta)
            jobs.append(cam_a.with_pose(pose))
    results = parallel_map(
        lambda cam: _masked_view(grid, cam, ufield, mask_rule, n_samples, background, round_index),
        jobs,
    )
    views = [r[0] for r in results]
    return SynthesisResult(views, [r[1] for r in results], [r[2] for r in results])


def random_interpolated_poses(
    train_cameras: list[Camera], count: int, rng: np.random.Generator
) -> list[Pose]:
    """Poses at uniformly random factors in random gaps of the proximity chain."""
    order = order_poses_by_proximity([cam.pose for cam in train_cameras])
    gaps = list(zip(order[:-1], order[1:]))
    poses = []
    for _ in range(count):
        a, b = gaps[int(rng.integers(0, len(gaps)))]
        beta = float(rng.uniform(0.05, 0.95))
        poses.append(interpolate_pose(train_cameras[a].pose, train_cameras[b].pose, beta))
    return poses


def target_views(
    grid: VoxelGrid,
    target_poses: list[Pose],
    template_camera: Camera,
    *,
    ufield: UncertaintyField | None,
    mask_rule: MaskRule,
    n_samples: int,
    background,
    round_index: int,
) -> SynthesisResult:
    """Render masked views at explicit poses (densification around viewpoints
    of interest); intrinsics come from the template camera."""
    cams = [template_camera.with_pose(p) for p in target_poses]
    results = parallel_map(
        lambda cam: _masked_view(grid, cam, ufield, mask_rule, n_samples, background, round_index),
        cams,
    )
    views = [r[0] for r in results]
    return SynthesisResult(views, [r[1] for r in results], [r[2] for r in results])


@dataclass
class RoundArtifacts:
    round_index: int
    grid: VoxelGrid
    train_views: list[TrainingView]       # everything the round's model saw
    synthetic_views: list[TrainingView]   # empty for round 0
    umaps: list[np.ndarray | None]
    mus: list[float]
    metrics: list[MetricsRow]
    loss_curve: list[tuple[int, float]]


def evaluate_grid(grid: VoxelGrid, context: ExperimentContext, round_index: int) -> list[MetricsRow]:
    cfg = context.config

    def _eval(pair):
        cam, gt = pair
        image, _ = render_image(grid, cam, cfg.render_n_samples, context.background)
        return psnr(image, gt), ssim(image, gt)

    scores = parallel_map(_eval, list(zip(context.test_cameras, context.test_images)))
    return [
        MetricsRow(round_index, f"test_{i:02d}", p, s) for i, (p, s) in enumerate(scores)
    ]


def run_round(
    config: ExperimentConfig,
    round_index: int,
    source: RoundArtifacts | None = None,
    context: ExperimentContext | None = None,
) -> RoundArtifacts:
    """Execute one round; round 0 takes no source, later rounds need round k-1."""
    ctx = context if context is not None else prepare_experiment(config)
    originals = [
        original_view(cam, img) for cam, img in zip(ctx.train_cameras, ctx.train_images)
    ]
    synthesis = SynthesisResult([], [], [])
    if round_index == 0:
        if source is not None:
            raise ValueError("round 0 takes no source artifacts")
    else:
        if source is None or source.round_index != round_index - 1:
            raise ValueError(f"round {round_index} needs round {round_index - 1} artifacts")
        ufield = None
        if config.masks_enabled:
            pool_rng = np.random.default_rng(derive_seed(config.seed, _SEED_POOL, round_index))
            pool = build_ray_pool(source.train_views, config.hessian_max_rays, pool_rng)
            dfield = DeformationField.for_grid(source.grid, config.hessian_lam)
            hessian = accumulate_hessian(
                source.grid, dfield, pool, config.hessian_n_samples, ctx.background
            )
            ufield = sigma_field(hessian, dfield.lam, dfield.bbox_min, dfield.bbox_max)
        rule = MaskRule(config.mask_kind, config.mask_value)
        common = dict(
            ufield=ufield,
            mask_rule=rule,
            n_samples=config.render_n_samples,
            background=ctx.background,
            round_index=round_index,
        )
        factors = resolved_factors(config)
        if factors:
            synthesis.extend(
                synthesize_views(source.grid, ctx.train_cameras, factors, **common)
            )
        if config.random_views > 0:
            rng = np.random.default_rng(derive_seed(config.seed, _SEED_RANDOM_POSES, round_index))
            poses = random_interpolated_poses(ctx.train_cameras, config.random_views, rng)
            synthesis.extend(target_views(source.grid, poses, ctx.train_cameras[0], **common))
        if config.target_poses:
            synthesis.extend(
                target_views(source.grid, config.target_poses, ctx.train_cameras[0], **common)
            )

    views = originals + synthesis.views
    if round_index > 0 and config.ablation == "no_reset":
        initial = source.grid.copy()
    else:
        initial = init_grid(
            config.grid_resolution,
            config.bbox_min,
            config.bbox_max,
            derive_seed(config.seed, _SEED_INIT, round_index),
        )
    train_cfg = replace(config.train, seed=derive_seed(config.seed, _SEED_TRAIN, round_index))
    if config.ablation == "keep_synthetic":
        train_cfg = replace(train_cfg, synthetic_stop_fraction=1.0)
    try:
        grid, curve = train(initial, views, train_cfg, ctx.background)
    except TrainingDivergedError as exc:
        raise TrainingAbort(round_index, exc) from exc
    rows = evaluate_grid(grid, ctx, round_index)
    return RoundArtifacts(
        round_index, grid, views, synthesis.views, synthesis.umaps, synthesis.mus, rows, curve
    )


@dataclass
class ExperimentResult:
    rows: list[MetricsRow]
    artifacts: list[RoundArtifacts]
    round_seconds: list[float]
    out_dir: Path | None


def persist_round(run_dir: Path, art: RoundArtifacts) -> Path:
    round_dir = run_dir / f"round_{art.round_index}"
    views_dir = round_dir / "views"
    masks_dir = round_dir / "masks"
    views_dir.mkdir(parents=True, exist_ok=True)
    masks_dir.mkdir(parents=True, exist_ok=True)
    save_grid(art.grid, round_dir / "grid.rnfgrid")
    write_metrics_csv(round_dir / "metrics.csv", art.metrics)
    save_loss_curve(round_dir / "loss_curve.csv", art.loss_curve)
    for i, view in enumerate(art.synthetic_views):
        save_image_png(views_dir / f"view_{i:03d}.png", view.image)
        save_gray16_png(masks_dir / f"mask_{i:03d}.png", view.mask.astype(np.float64))
        umap = art.umaps[i]
        if umap is not None:
            peak = float(umap.max())
            save_gray16_png(
                masks_dir / f"uncertainty_{i:03d}.png", umap / peak if peak > 0 else umap
            )
            save_float_sidecar(masks_dir / f"uncertainty_{i:03d}.npy", umap)
    return round_dir


def write_manifest(path: Path, config: ExperimentConfig, result: ExperimentResult) -> None:
    lines = [
        "# revox run manifest",
        f"version = {__version__}",
        f"seed = {config.seed}",
        f"rounds = {config.rounds}",
    ]
    for art, seconds in zip(result.artifacts, result.round_seconds):
        k = art.round_index
        lines.append(f"round_{k}_dir = round_{k}")
        lines.append(f"round_{k}_seconds = {seconds:.3f}")
        for i, mu in enumerate(art.mus):
            lines.append(f"round_{k}_mu_{i:03d} = {mu!r}")
    lines.append("")
    lines.append("[config]")
    lines.append(format_config(config))
    path.write_text("\n".join(lines))


def manifest_config_text(path) -> str:
    """Extract the embedded config snapshot from a run manifest."""
    text = Path(path).read_text()
    marker = "\n[config]\n"
    at = text.find(marker)
    if at < 0:
        raise ValueError(f"{path}: no [config] section")
    return text[at + len(marker) :]


def run_experiment(config: ExperimentConfig, out_dir: Path | None = None) -> ExperimentResult:
    """Execute rounds 0..rounds-1, optionally persisting a run directory."""
    ctx = prepare_experiment(config)
    artifacts: list[RoundArtifacts] = []
    seconds: list[float] = []
    rows: list[MetricsRow] = []
    prev: RoundArtifacts | None = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    for k in range(config.rounds):
        started = time.perf_counter()
        art = run_round(config, k, prev, context=ctx)
        seconds.append(time.perf_counter() - started)
        artifacts.append(art)
        rows.extend(art.metrics)
        if out_dir is not None:
            persist_round(out_dir, art)
        prev = art
    result = ExperimentResult(rows, artifacts, seconds, out_dir)
    if out_dir is not None:
        write_metrics_csv(out_dir / "metrics.csv", rows)
        write_manifest(out_dir / "manifest.txt", config, result)
    return result
