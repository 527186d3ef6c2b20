"""Photometric training of a voxel grid with hand-derived analytic gradients.

The loss is mean squared error between composited and ground-truth ray colors,
optionally plus a total-variation penalty on raw density restricted to edges
incident to batch-touched vertices.  Gradients chain through compositing, the
density/color activations, and the trilinear interpolation weights; parameter
updates use Adam-style moments with separate density and color step sizes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .field import VoxelGrid, corner_flat_indices, corner_weights, sigmoid, trilinear_cells
from .geometry import Camera, generate_rays
from .render import DEFAULT_BACKGROUND


class TrainingDivergedError(RuntimeError):
    """Raised when the loss goes non-finite; carries where it happened."""

    def __init__(self, iteration: int, block: str):
        super().__init__(f"non-finite loss at iteration {iteration} (parameter block: {block})")
        self.iteration = iteration
        self.block = block


@dataclass
class TrainingView:
    """One training image with its camera, usable-pixel mask, and provenance."""

    camera: Camera
    image: np.ndarray          # (H, W, 3) in [0, 1]
    mask: np.ndarray           # (H, W) bool, True = usable pixel
    kind: str                  # "original" | "synthetic"
    round_created: int = 0

    def __post_init__(self):
        self.image = np.asarray(self.image, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        h, w = self.camera.height, self.camera.width
        if self.image.shape != (h, w, 3):
            raise ValueError(f"image shape {self.image.shape} != camera {h}x{w}")
        if self.mask.shape != (h, w):
            raise ValueError(f"mask shape {self.mask.shape} != image {h}x{w}")
        if self.kind not in ("original", "synthetic"):
            raise ValueError(f"unknown view kind {self.kind!r}")
        if self.kind == "original" and not self.mask.all():
            raise ValueError("original views must have all-true masks")


def original_view(camera: Camera, image: np.ndarray) -> TrainingView:
    return TrainingView(camera, image, np.ones((camera.height, camera.width), dtype=bool), "original")


@dataclass
class TrainConfig:
    iterations: int = 600
    batch_rays: int = 2048
    learning_rate: float = 0.05         # raw density step size
    learning_rate_color: float = 0.01   # raw color step size
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-8
    n_samples: int = 96
    synthetic_stop_fraction: float = 0.27
    tv_weight: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_rays < 1:
            raise ValueError("batch_rays must be >= 1")
        if not 0.0 <= self.synthetic_stop_fraction <= 1.0:
            raise ValueError("synthetic_stop_fraction must be in [0, 1]")
        if self.tv_weight < 0.0:
            raise ValueError("tv_weight must be >= 0")


def photometric_loss(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean squared error over all ray-channel entries."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise ValueError("empty batch")
    return float(np.mean((pred - gt) ** 2))


@dataclass
class RayBatch:
    """Flat batch of training rays with their ground-truth colors."""

    origins: np.ndarray      # (B, 3)
    directions: np.ndarray   # (B, 3)
    t_near: np.ndarray       # (B,)
    t_far: np.ndarray        # (B,)
    gt: np.ndarray           # (B, 3)
    view_indices: np.ndarray  # (B,) index into the sampled view list
    synthetic: np.ndarray     # (B,) bool

    def __len__(self) -> int:
        return self.origins.shape[0]


class ViewPool:
    """Precomputed per-pixel rays of a view set, for uniform batch sampling.

    Sampling is uniform (with replacement) over the union of unmasked pixels
    of the eligible views: every view while iteration < stop fraction times
    total iterations, only original views afterwards.
    """

    def __init__(self, views: list[TrainingView]):
        if not any(v.kind == "original" for v in views):
            raise ValueError("need at least one original view")
        self.views = views
        dirs, origins, t_near, t_far, gt, view_idx = [], [], [], [], [], []
        for i, view in enumerate(views):
            bundle = generate_rays(view.camera)
            o, d = bundle.flat()
            keep = view.mask.reshape(-1)
            dirs.append(d[keep])
            origins.append(o[keep])
            n = int(keep.sum())
            t_near.append(np.full(n, bundle.t_near))
            t_far.append(np.full(n, bundle.t_far))
            gt.append(view.image.reshape(-1, 3)[keep])
            view_idx.append(np.full(n, i, dtype=np.int64))
        self.origins = np.concatenate(origins)
        self.directions = np.concatenate(dirs)
        self.t_near = np.concatenate(t_near)
        self.t_far = np.concatenate(t_far)
        self.gt = np.concatenate(gt)
        self.view_indices = np.concatenate(view_idx)
        self.synthetic = np.array([v.kind == "synthetic" for v in views])[self.view_indices]
        self.original_pool = np.flatnonzero(~self.synthetic)

    def sample(self, iteration: int, config: TrainConfig, rng: np.random.Generator) -> RayBatch:
        use_synthetic = iteration < config.synthetic_stop_fraction * config.iterations
        if use_synthetic:
            chosen = rng.integers(0, len(self.origins), size=config.batch_rays)
        else:
            chosen = self.original_pool[
                rng.integers(0, len(self.original_pool), size=config.batch_rays)
            ]
        return RayBatch(
            origins=self.origins[chosen],
            directions=self.directions[chosen],
            t_near=self.t_near[chosen],
            t_far=self.t_far[chosen],
            gt=self.gt[chosen],
            view_indices=self.view_indices[chosen],
            synthetic=self.synthetic[chosen],
        )


def sample_ray_batch(
    views: list[TrainingView], iteration: int, config: TrainConfig, rng: np.random.Generator
) -> RayBatch:
    """Stateless batch sampler; train() keeps a ViewPool around instead."""
    return ViewPool(views).sample(iteration, config, rng)


# --- forward / backward -------------------------------------------------------


def _batch_t(batch: RayBatch, n_samples: int, offsets) -> tuple[np.ndarray, np.ndarray]:
    """Per-ray stratified sample parameters (B, S) and bin widths (B,)."""
    width = (batch.t_far - batch.t_near) / n_samples
    if offsets is None:
        offsets = 0.5
    t = batch.t_near[:, None] + (np.arange(n_samples) + offsets) * width[:, None]
    return t, width


def _forward(grid: VoxelGrid, batch: RayBatch, n_samples: int, background, offsets):
    """Shared forward pass; returns intermediates needed by the backward pass."""
    t, width = _batch_t(batch, n_samples, offsets)
    positions = batch.origins[:, None, :] + t[..., None] * batch.directions[:, None, :]
    b, s = t.shape
    pts = positions.reshape(-1, 3)
    cell, local, inside, _ = trilinear_cells(grid.bbox_min, grid.bbox_max, grid.resolution, pts)
    local = np.clip(local, 0.0, 1.0)
    flat = corner_flat_indices(cell, grid.resolution)
    w8 = corner_weights(local)
    raw = np.einsum("mc,mcf->mf", w8, grid.params.reshape(-1, 4)[flat])

    sp = sigmoid(raw[:, 0])                      # softplus'(raw density)
    density = np.where(inside, np.logaddexp(0.0, raw[:, 0]), 0.0)
    color = sigmoid(raw[:, 1:4])
    background = np.asarray(background, dtype=np.float64)
    color = np.where(inside[:, None], color, background)

    density = density.reshape(b, s)
    color = color.reshape(b, s, 3)
    dd = density * width[:, None]
    alpha = -np.expm1(-dd)
    one_minus = 1.0 - alpha
    cp = np.cumprod(one_minus, axis=1)
    trans = np.empty_like(cp)
    trans[:, 0] = 1.0
    trans[:, 1:] = cp[:, :-1]
    weights = trans * alpha
    residual = cp[:, -1]
    pred = np.einsum("bs,bsc->bc", weights, color) + residual[:, None] * background
    return {
        "t": t,
        "width": width,
        "flat": flat,
        "w8": w8,
        "inside": inside,
        "softplus_deriv": sp,
        "density": density,
        "color": color,
        "alpha": alpha,
        "trans": trans,
        "weights": weights,
        "residual": residual,
        "pred": pred,
        "background": background,
        "shape": (b, s),
    }


def _suffix_color(weights, color, residual, background):
    """Z[b, i, k] = sum_{j > i} w_j c_jk + residual * bg_k (color behind sample i,
    scaled by the transmittance past sample i)."""
    wc = weights[..., None] * color
    z = np.zeros_like(wc)
    z[:, :-1] = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1][:, 1:]
    z += residual[:, None, None] * background
    return z


def _touched_vertices(flat: np.ndarray, w8: np.ndarray, inside: np.ndarray, n_vertices: int):
    contributing = w8 * inside[:, None] != 0.0
    touched = np.zeros(n_vertices, dtype=bool)
    touched[flat[contributing]] = True
    return touched


def _tv_loss_and_grad(raw_density: np.ndarray, touched: np.ndarray):
    """Mean squared difference over grid edges incident to touched vertices.

    Returns (loss, grad over raw density).  Restricting the stencil to the
    batch keeps gradients local: vertices away from every sampled cell stay
    untouched even by the regularizer.
    """
    shape = raw_density.shape
    touched3 = touched.reshape(shape)
    grad = np.zeros(shape)
    total = 0.0
    n_edges = 0
    slices_a = [np.s_[:-1, :, :], np.s_[:, :-1, :], np.s_[:, :, :-1]]
    slices_b = [np.s_[1:, :, :], np.s_[:, 1:, :], np.s_[:, :, 1:]]
    selections = []
    for sa, sb in zip(slices_a, slices_b):
        sel = touched3[sa] | touched3[sb]
        selections.append(sel)
        n_edges += int(sel.sum())
    if n_edges == 0:
        return 0.0, grad
    for sa, sb, sel in zip(slices_a, slices_b, selections):
        diff = np.where(sel, raw_density[sb] - raw_density[sa], 0.0)
        total += float(np.sum(diff * diff))
        g = 2.0 * diff / n_edges
        grad[sb] += g
        grad[sa] -= g
    return total / n_edges, grad


def forward_loss(
    grid: VoxelGrid,
    batch: RayBatch,
    n_samples: int,
    background=DEFAULT_BACKGROUND,
    tv_weight: float = 0.0,
    offsets=None,
) -> float:
    """Loss only, via the same forward path backward() differentiates."""
    state = _forward(grid, batch, n_samples, background, offsets)
    loss = photometric_loss(state["pred"], batch.gt)
    if tv_weight > 0.0:
        touched = _touched_vertices(state["flat"], state["w8"], state["inside"], grid.n_vertices)
        tv, _ = _tv_loss_and_grad(grid.raw_density, touched)
        loss += tv_weight * tv
    return loss


def backward(
    grid: VoxelGrid,
    batch: RayBatch,
    n_samples: int,
    background=DEFAULT_BACKGROUND,
    tv_weight: float = 0.0,
    offsets=None,
):
    """Analytic gradient of the photometric(+TV) loss for one ray batch.

    Returns (loss, grads) where grads has the grid's params shape
    (nx, ny, nz, 4): channel 0 is the raw-density gradient, 1:4 raw color.
    """
    state = _forward(grid, batch, n_samples, background, offsets)
    b, s = state["shape"]
    pred = state["pred"]
    loss = photometric_loss(pred, batch.gt)
    dldc_out = 2.0 * (pred - batch.gt) / pred.size  # (B, 3)

    weights = state["weights"]
    color = state["color"]
    z = _suffix_color(weights, color, state["residual"], state["background"])
    t_next = state["trans"] * (1.0 - state["alpha"])  # transmittance past sample i

    # d loss / d raw density_i = softplus' * delta_i * sum_k dLdC_k (T_{i+1} c_ik - Z_ik)
    inner = np.einsum("bk,bsk->bs", dldc_out, t_next[..., None] * color - z)
    dl_ddensity = inner * state["width"][:, None]
    dl_draw_density = dl_ddensity.reshape(-1) * state["softplus_deriv"]
    dl_draw_density = np.where(state["inside"], dl_draw_density, 0.0)

    # d loss / d raw color_ik = dLdC_k * w_i * sigmoid'(raw color)
    dl_dcolor = dldc_out[:, None, :] * weights[..., None]  # (B, S, 3)
    dl_draw_color = (dl_dcolor * color * (1.0 - color)).reshape(-1, 3)
    dl_draw_color = np.where(state["inside"][:, None], dl_draw_color, 0.0)

    flat = state["flat"]
    w8 = state["w8"]
    n = grid.n_vertices
    grads = np.zeros((n, 4))
    keys = flat.ravel()
    grads[:, 0] = np.bincount(keys, weights=(dl_draw_density[:, None] * w8).ravel(), minlength=n)
    for ch in range(3):
        grads[:, 1 + ch] = np.bincount(
            keys, weights=(dl_draw_color[:, ch : ch + 1] * w8).ravel(), minlength=n
        )
    grads = grads.reshape(*grid.resolution, 4)

    if tv_weight > 0.0:
        touched = _touched_vertices(flat, w8, state["inside"], n)
        tv, tv_grad = _tv_loss_and_grad(grid.raw_density, touched)
        loss += tv_weight * tv
        grads[..., 0] += tv_weight * tv_grad
    return loss, grads


# --- training loop --------------------------------------------------------------


def train(
    grid: VoxelGrid,
    views: list[TrainingView],
    config: TrainConfig,
    background=DEFAULT_BACKGROUND,
):
    """Optimize a copy of the grid against the views; returns (grid, loss curve).

    The loss curve holds (iteration, mean loss) per 100-iteration block.  The
    input grid is never mutated; with zero learning rates the returned grid
    equals the input bit for bit.  Raises TrainingDivergedError on non-finite
    loss.
    """
    pool = ViewPool(views)
    out = grid.copy()
    params = out.params
    m = np.zeros_like(params)
    v = np.zeros_like(params)
    lr = np.array(
        [config.learning_rate] + [config.learning_rate_color] * 3
    )
    rng = np.random.default_rng(config.seed)
    curve: list[tuple[int, float]] = []
    block_sum = 0.0
    block_start = 0
    for it in range(config.iterations):
        batch = pool.sample(it, config, rng)
        offsets = rng.uniform(0.0, 1.0, size=(config.batch_rays, config.n_samples))
        loss, grads = backward(
            out, batch, config.n_samples, background, config.tv_weight, offsets
        )
        if not np.isfinite(loss):
            block = "density" if not np.isfinite(grads[..., 0]).all() else "color"
            raise TrainingDivergedError(it, block)
        step = it + 1
        m += (1.0 - config.adam_beta1) * (grads - m)
        v += (1.0 - config.adam_beta2) * (grads * grads - v)
        m_hat = m / (1.0 - config.adam_beta1**step)
        v_hat = v / (1.0 - config.adam_beta2**step)
        params -= lr * m_hat / (np.sqrt(v_hat) + config.adam_eps)
        block_sum += loss
        if (it + 1) % 100 == 0 or it + 1 == config.iterations:
            curve.append((block_start, block_sum / (it + 1 - block_start)))
            block_sum = 0.0
            block_start = it + 1
    return out, curve


def save_loss_curve(path, curve: list[tuple[int, float]]) -> None:
    import os

    new = not os.path.exists(path)
    with open(path, "a") as fh:
        if new:
            fh.write("iteration,mean_loss\n")
        for iteration, mean_loss in curve:
            fh.write(f"{iteration},{mean_loss:.10g}\n")
