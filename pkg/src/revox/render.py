"""Volumetric rendering: alpha compositing of color, depth, and sample weights.

Per sample i along a ray, opacity alpha_i = 1 - exp(-density_i * delta_i) and
transmittance T_i is the product of (1 - alpha_j) over preceding samples.  The
pixel color is sum_i T_i alpha_i c_i plus the residual transmittance times the
background color; depth is the weight-expectation of the ray parameter with
the residual assigned to t_far.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .field import VoxelGrid, sample_field_batch
from .geometry import Camera, Ray, generate_rays

DEFAULT_BACKGROUND = (1.0, 1.0, 1.0)


@dataclass
class RaySamples:
    """Samples along one ray: parameters t, spacings, activated density/color."""

    t: np.ndarray          # (S,) ray parameters, strictly increasing
    positions: np.ndarray  # (S, 3)
    deltas: np.ndarray     # (S,) world-unit spacings
    density: np.ndarray    # (S,) activated, >= 0
    color: np.ndarray      # (S, 3) activated, in (0, 1)
    t_far: float

    def __len__(self) -> int:
        return self.t.shape[0]


@dataclass
class RenderOutput:
    color: np.ndarray                 # (3,)
    depth: float
    weights: np.ndarray               # (S,) compositing weights T_i * alpha_i
    residual_transmittance: float     # T_{S+1}


def composite_batch(density, color, deltas, t, t_far, background):
    """Vectorized compositing over a batch of rays.

    density, deltas, t: (B, S); color: (B, S, 3); t_far: scalar or (B,);
    background: (3,).  Returns (colors (B, 3), depths (B,), weights (B, S),
    residual (B,)).  Rows are independent, so any chunking of the batch
    reproduces the per-ray sequential result bit-for-bit.
    """
    background = np.asarray(background, dtype=np.float64)
    dd = density * deltas
    alpha = -np.expm1(-dd)                       # (B, S)
    one_minus = 1.0 - alpha
    cp = np.cumprod(one_minus, axis=1)
    trans = np.empty_like(cp)
    trans[:, 0] = 1.0
    trans[:, 1:] = cp[:, :-1]
    weights = trans * alpha
    residual = cp[:, -1] if alpha.shape[1] > 0 else np.ones(alpha.shape[0])
    colors = np.einsum("bs,bsc->bc", weights, color) + residual[:, None] * background
    depths = np.einsum("bs,bs->b", weights, t) + residual * np.asarray(t_far, dtype=np.float64)
    return colors, depths, weights, residual


def composite(samples: RaySamples, background=DEFAULT_BACKGROUND) -> RenderOutput:
    """Composite one ray's samples front to back against a background color."""
    if len(samples) == 0:
        return RenderOutput(
            color=np.asarray(background, dtype=np.float64).copy(),
            depth=float(samples.t_far),
            weights=np.zeros(0),
            residual_transmittance=1.0,
        )
    if np.any(samples.deltas <= 0.0):
        raise ValueError("sample spacings must be positive")
    if np.any(samples.density < 0.0):
        raise ValueError("densities must be nonnegative")
    colors, depths, weights, residual = composite_batch(
        samples.density[None, :],
        samples.color[None, :, :],
        samples.deltas[None, :],
        samples.t[None, :],
        samples.t_far,
        background,
    )
    return RenderOutput(
        color=colors[0],
        depth=float(depths[0]),
        weights=weights[0],
        residual_transmittance=float(residual[0]),
    )


def stratified_t(t_near, t_far, n_samples, offsets=None):
    """Bin-stratified ray parameters: n equal bins, sample at center or at the
    given in-bin offsets in [0, 1).  Spacings are the constant bin width."""
    width = (t_far - t_near) / n_samples
    if offsets is None:
        offsets = 0.5
    return t_near + (np.arange(n_samples) + offsets) * width, width


def sample_ray(grid: VoxelGrid, ray: Ray, n_samples: int, jitter=False, rng=None) -> RaySamples:
    """Place n_samples along the ray and query the field at each position."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    offsets = None
    if jitter:
        if rng is None:
            raise ValueError("jitter=True requires an rng")
        offsets = rng.uniform(0.0, 1.0, size=n_samples)
    t, width = stratified_t(ray.t_near, ray.t_far, n_samples, offsets)
    positions = ray.origin[None, :] + t[:, None] * ray.direction[None, :]
    density, rgb = sample_field_batch(grid, positions)
    return RaySamples(
        t=t,
        positions=positions,
        deltas=np.full(n_samples, width),
        density=density,
        color=rgb,
        t_far=float(ray.t_far),
    )


def render_rays(grid, origins, directions, t_near, t_far, n_samples, background, offsets=None):
    """Render a flat batch of rays; returns (colors (B,3), depths (B,))."""
    t, width = stratified_t(t_near, t_far, n_samples, offsets)
    positions = origins[:, None, :] + t[None, :, None] * directions[:, None, :]
    b, s = positions.shape[:2]
    density, rgb = sample_field_batch(grid, positions.reshape(-1, 3), background)
    colors, depths, _, _ = composite_batch(
        density.reshape(b, s),
        rgb.reshape(b, s, 3),
        np.full((1, s), width),
        np.broadcast_to(t, (b, s)),
        t_far,
        background,
    )
    return colors, depths


def render_image(
    grid: VoxelGrid,
    camera: Camera,
    n_samples: int,
    background=DEFAULT_BACKGROUND,
    chunk: int = 8192,
):
    """Render one image and depth map from a camera; values clipped to [0, 1]."""
    bundle = generate_rays(camera)
    origins, directions = bundle.flat()
    n = origins.shape[0]
    colors = np.empty((n, 3))
    depths = np.empty(n)
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        c, d = render_rays(
            grid, origins[lo:hi], directions[lo:hi], bundle.t_near, bundle.t_far, n_samples, background
        )
        colors[lo:hi] = c
        depths[lo:hi] = d
    image = np.clip(colors.reshape(camera.height, camera.width, 3), 0.0, 1.0)
    depth = depths.reshape(camera.height, camera.width)
    return image, depth


# --- image files ----------------------------------------------------------------


def save_image_png(path, image: np.ndarray) -> None:
    """8-bit RGB PNG from a float image in [0, 1]."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_gray16_png(path, values01: np.ndarray) -> None:
    """16-bit grayscale PNG from values already normalized to [0, 1]."""
    arr = np.clip(np.round(np.asarray(values01) * 65535.0), 0, 65535).astype("<u2")
    Image.fromarray(arr, mode="I;16").save(path)


def save_float_sidecar(path, values: np.ndarray) -> None:
    """Raw float32 sidecar next to a normalized PNG."""
    np.save(path, np.asarray(values, dtype=np.float32))


def save_depth_png(path, depth: np.ndarray, t_far: float) -> None:
    save_gray16_png(path, np.asarray(depth) / t_far)
