"""Spatial uncertainty via a Laplace approximation of a deformation field.

A coarse grid of per-vertex spatial offsets (all zero) perturbs the positions
at which the radiance field is queried.  The diagonal Gauss-Newton Hessian of
the rendered colors with respect to those offsets, accumulated over a pool of
training rays plus a prior floor, yields per-vertex variances; their inverse
square-norm is the uncertainty rendered along rays and thresholded into
pixel masks for synthetic views.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .field import (
    VoxelGrid,
    corner_flat_indices,
    corner_weight_gradients,
    corner_weights,
    sigmoid,
    trilinear_cells,
)
from .geometry import Camera, generate_rays
from .optim import TrainingView
from .render import DEFAULT_BACKGROUND, stratified_t

DEFAULT_PRIOR_LAMBDA = 1e-2
DEFAULT_MAX_POOL_RAYS = 200_000


@dataclass
class DeformationField:
    """Coarse grid of 3-vector offsets; parameters are implicitly zero here
    (the approximation is taken around the unperturbed radiance field)."""

    resolution: tuple[int, int, int]
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    lam: float = DEFAULT_PRIOR_LAMBDA

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if any(n < 2 for n in self.resolution):
            raise ValueError(f"deformation resolution must be >= 2 per axis, got {self.resolution}")
        if self.lam <= 0.0:
            raise ValueError("prior strength lambda must be positive")

    @property
    def n_vertices(self) -> int:
        mx, my, mz = self.resolution
        return mx * my * mz

    @staticmethod
    def for_grid(grid: VoxelGrid, lam: float = DEFAULT_PRIOR_LAMBDA) -> "DeformationField":
        res = tuple(max(2, n // 2) for n in grid.resolution)
        return DeformationField(res, grid.bbox_min.copy(), grid.bbox_max.copy(), lam)


@dataclass
class UncertaintyField:
    """Per-vertex Hessian diagonal, axis variances, and scalar uncertainty."""

    resolution: tuple[int, int, int]
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    lam: float
    hessian_diag: np.ndarray  # (mx, my, mz, 3), entries >= 2*lam
    sigma_axes: np.ndarray    # (mx, my, mz, 3) = 1 / hessian_diag
    sigma: np.ndarray         # (mx, my, mz) Euclidean norm of sigma_axes

    @property
    def sigma_max(self) -> float:
        return float(self.sigma.max())


@dataclass
class RayPool:
    origins: np.ndarray
    directions: np.ndarray
    t_near: np.ndarray
    t_far: np.ndarray

    def __len__(self) -> int:
        return self.origins.shape[0]


def build_ray_pool(
    views: list[TrainingView],
    max_rays: int = DEFAULT_MAX_POOL_RAYS,
    rng: np.random.Generator | None = None,
) -> RayPool:
    """All unmasked training-view rays, subsampled to at most max_rays."""
    origins, dirs, t_near, t_far = [], [], [], []
    for view in views:
        bundle = generate_rays(view.camera)
        o, d = bundle.flat()
        keep = view.mask.reshape(-1)
        origins.append(o[keep])
        dirs.append(d[keep])
        n = int(keep.sum())
        t_near.append(np.full(n, bundle.t_near))
        t_far.append(np.full(n, bundle.t_far))
    origins = np.concatenate(origins)
    dirs = np.concatenate(dirs)
    t_near = np.concatenate(t_near)
    t_far = np.concatenate(t_far)
    if len(origins) == 0:
        raise ValueError("ray pool is empty")
    if len(origins) > max_rays:
        if rng is None:
            rng = np.random.default_rng(0)
        pick = rng.choice(len(origins), size=max_rays, replace=False)
        origins, dirs, t_near, t_far = origins[pick], dirs[pick], t_near[pick], t_far[pick]
    return RayPool(origins, dirs, t_near, t_far)


def _color_jacobian_terms(grid: VoxelGrid, origins, directions, t_near, t_far, n_samples, background):
    """Per-sample pieces of dC_k/dx_a for a chunk of rays.

    Returns (positions (B,S,3), weights (B,S), dcdx (B,S,3,3) indexed
    [ray, sample, axis, channel]).
    """
    b = origins.shape[0]
    width = (t_far - t_near) / n_samples
    t = t_near[:, None] + (np.arange(n_samples) + 0.5) * width[:, None]
    positions = origins[:, None, :] + t[..., None] * directions[:, None, :]
    pts = positions.reshape(-1, 3)

    cell, local, inside, cell_size = trilinear_cells(
        grid.bbox_min, grid.bbox_max, grid.resolution, pts
    )
    local_c = np.clip(local, 0.0, 1.0)
    flat = corner_flat_indices(cell, grid.resolution)
    vals = grid.params.reshape(-1, 4)[flat]  # (M, 8, 4)
    w8 = corner_weights(local_c)
    raw = np.einsum("mc,mcf->mf", w8, vals)
    dw8 = corner_weight_gradients(local_c)  # (M, 8, 3)
    draw = np.einsum("mca,mcf->maf", dw8, vals) / cell_size[None, :, None]  # (M, 3, 4)

    sp = sigmoid(raw[:, 0])
    density = np.where(inside, np.logaddexp(0.0, raw[:, 0]), 0.0)
    color = sigmoid(raw[:, 1:4])
    background = np.asarray(background, dtype=np.float64)
    color = np.where(inside[:, None], color, background)

    dodx = np.where(inside[:, None], sp[:, None] * draw[:, :, 0], 0.0)  # (M, 3)
    dcdx = np.where(
        inside[:, None, None],
        (color * (1.0 - color))[:, None, :] * draw[:, :, 1:4],
        0.0,
    )  # (M, 3, 3) [axis, channel]

    s = n_samples
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

    wc = weights[..., None] * color
    z = np.zeros_like(wc)
    z[:, :-1] = np.cumsum(wc[:, ::-1], axis=1)[:, ::-1][:, 1:]
    z += residual[:, None, None] * background
    t_next = trans * one_minus
    dcd_density = width[:, None, None] * (t_next[..., None] * color - z)  # dC_k/d density_i

    dcdx_total = (
        dcd_density.reshape(b, s, 1, 3) * dodx.reshape(b, s, 3, 1)
        + weights.reshape(b, s, 1, 1) * dcdx.reshape(b, s, 3, 3)
    )
    return positions, weights, dcdx_total


def accumulate_hessian(
    grid: VoxelGrid,
    dfield: DeformationField,
    pool: RayPool,
    n_samples: int,
    background=DEFAULT_BACKGROUND,
    chunk: int = 1024,
) -> np.ndarray:
    """Diagonal Gauss-Newton Hessian of rendered colors w.r.t. deformation
    offsets: (2/|R|) sum_rays diag(J^T J) + 2*lambda, shape (mx, my, mz, 3)."""
    if len(pool) == 0:
        raise ValueError("ray pool must be non-empty")
    n_def = dfield.n_vertices
    acc = np.zeros((n_def, 3))
    for lo in range(0, len(pool), chunk):
        hi = min(lo + chunk, len(pool))
        positions, _, dcdx = _color_jacobian_terms(
            grid,
            pool.origins[lo:hi],
            pool.directions[lo:hi],
            pool.t_near[lo:hi],
            pool.t_far[lo:hi],
            n_samples,
            background,
        )
        b, s = positions.shape[:2]
        pts = positions.reshape(-1, 3)
        cell, local, _, _ = trilinear_cells(
            dfield.bbox_min, dfield.bbox_max, dfield.resolution, pts, clamp=True
        )
        flat_d = corner_flat_indices(cell, dfield.resolution)  # (M, 8)
        w8_d = corner_weights(local)

        ray_local = np.repeat(np.arange(b, dtype=np.int64), s)
        keys = (ray_local[:, None] * n_def + flat_d).ravel()  # (M*8,)
        order = np.argsort(keys, kind="stable")
        keys_sorted = keys[order]
        starts = np.flatnonzero(np.diff(keys_sorted)) + 1
        starts = np.concatenate([[0], starts])
        vertex = keys_sorted[starts] % n_def

        for axis in range(3):
            sq = np.zeros(starts.shape[0])
            for ch in range(3):
                contrib = (dcdx[..., axis, ch].reshape(-1, 1) * w8_d).ravel()[order]
                j = np.add.reduceat(contrib, starts)
                sq += j * j
            acc[:, axis] += np.bincount(vertex, weights=sq, minlength=n_def)
    h = (2.0 / len(pool)) * acc + 2.0 * dfield.lam
    return h.reshape(*dfield.resolution, 3)


def sigma_field(hessian_diag: np.ndarray, lam: float, bbox_min, bbox_max) -> UncertaintyField:
    """Invert the Hessian diagonal into axis variances and scalar uncertainty."""
    hessian_diag = np.asarray(hessian_diag, dtype=np.float64)
    if hessian_diag.ndim != 4 or hessian_diag.shape[-1] != 3:
        raise ValueError(f"expected (mx, my, mz, 3) Hessian diagonal, got {hessian_diag.shape}")
    if np.any(hessian_diag <= 0.0):
        raise ValueError("Hessian diagonal entries must be positive")
    if np.any(hessian_diag < 2.0 * lam * (1.0 - 1e-12)):
        raise ValueError("Hessian diagonal below the 2*lambda prior floor")
    with np.errstate(divide="ignore"):
        sigma_axes = 1.0 / hessian_diag
    sigma = np.sqrt(np.einsum("...a,...a->...", sigma_axes, sigma_axes))
    return UncertaintyField(
        resolution=hessian_diag.shape[:3],
        bbox_min=np.asarray(bbox_min, dtype=np.float64).reshape(3),
        bbox_max=np.asarray(bbox_max, dtype=np.float64).reshape(3),
        lam=float(lam),
        hessian_diag=hessian_diag,
        sigma_axes=sigma_axes,
        sigma=sigma,
    )


def sample_uncertainty(ufield: UncertaintyField, pts: np.ndarray) -> np.ndarray:
    """Trilinear interpolation of the scalar sigma field (edge-clamped)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    cell, local, _, _ = trilinear_cells(
        ufield.bbox_min, ufield.bbox_max, ufield.resolution, pts, clamp=True
    )
    flat = corner_flat_indices(cell, ufield.resolution)
    w8 = corner_weights(local)
    return np.einsum("mc,mc->m", w8, ufield.sigma.reshape(-1)[flat])


def render_uncertainty(
    grid: VoxelGrid,
    ufield: UncertaintyField,
    camera: Camera,
    n_samples: int,
    chunk: int = 8192,
) -> np.ndarray:
    """Composite the uncertainty field along each pixel's ray.

    Uses the color-compositing weights of the radiance grid; rays with zero
    accumulated weight (empty space) get the field's maximum sigma.
    """
    bundle = generate_rays(camera)
    origins, directions = bundle.flat()
    n = origins.shape[0]
    out = np.empty(n)
    t, width = stratified_t(bundle.t_near, bundle.t_far, n_samples)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        o = origins[lo:hi]
        d = directions[lo:hi]
        positions = o[:, None, :] + t[None, :, None] * d[:, None, :]
        pts = positions.reshape(-1, 3)
        cell, local, inside, _ = trilinear_cells(
            grid.bbox_min, grid.bbox_max, grid.resolution, pts
        )
        flat = corner_flat_indices(cell, grid.resolution)
        w8 = corner_weights(np.clip(local, 0.0, 1.0))
        raw_density = np.einsum("mc,mc->m", w8, grid.raw_density.reshape(-1)[flat])
        density = np.where(inside, np.logaddexp(0.0, raw_density), 0.0)
        density = density.reshape(hi - lo, n_samples)
        alpha = -np.expm1(-density * width)
        cp = np.cumprod(1.0 - alpha, axis=1)
        trans = np.empty_like(cp)
        trans[:, 0] = 1.0
        trans[:, 1:] = cp[:, :-1]
        weights = trans * alpha
        u_samples = sample_uncertainty(ufield, pts).reshape(hi - lo, n_samples)
        u = np.einsum("bs,bs->b", weights, u_samples)
        total = weights.sum(axis=1)
        out[lo:hi] = np.where(total == 0.0, ufield.sigma_max, u)
    return out.reshape(camera.height, camera.width)


# --- pixel masks --------------------------------------------------------------


@dataclass
class MaskRule:
    """Either an absolute uncertainty threshold or a masked-fraction quantile."""

    kind: str    # "absolute" | "quantile"
    value: float

    def __post_init__(self):
        if self.kind not in ("absolute", "quantile"):
            raise ValueError(f"unknown mask rule kind {self.kind!r}")
        if self.kind == "quantile" and not 0.0 <= self.value <= 1.0:
            raise ValueError(f"quantile must be in [0, 1], got {self.value}")


def save_uncertainty_field(path, ufield: UncertaintyField) -> None:
    """Persist a sigma field as .npz (Hessian diagonal, bbox, lambda)."""
    np.savez(
        path,
        hessian_diag=ufield.hessian_diag,
        bbox_min=ufield.bbox_min,
        bbox_max=ufield.bbox_max,
        lam=np.float64(ufield.lam),
    )


def load_uncertainty_field(path) -> UncertaintyField:
    with np.load(path) as data:
        return sigma_field(
            data["hessian_diag"], float(data["lam"]), data["bbox_min"], data["bbox_max"]
        )


def make_mask(umap: np.ndarray, rule: MaskRule):
    """Keep-mask for an uncertainty map plus the resolved threshold.

    Absolute rule: keep pixels with U <= mu.  Quantile rule: mu is the
    nearest-rank (1 - q)-quantile of the map, i.e. the most-uncertain fraction
    q of pixels is masked out.
    """
    umap = np.asarray(umap, dtype=np.float64)
    if rule.kind == "absolute":
        mu = float(rule.value)
    else:
        n = umap.size
        rank = min(n, max(1, math.ceil((1.0 - rule.value) * n)))
        mu = float(np.sort(umap, axis=None)[rank - 1])
    return umap <= mu, mu
