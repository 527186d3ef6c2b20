"""Dense voxel radiance grid, procedural scene construction, and checkpoints.

The grid stores raw (pre-activation) parameters at vertices: softplus maps raw
density to nonnegative density, sigmoid maps raw color to (0,1) RGB.  Values
are interpolated trilinearly in raw space and activated afterwards, so the
activated field stays smooth and gradients stay simple.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GRID_MAGIC = "RNFGRID1"
EMPTY_RAW_DENSITY_TARGET = 1e-5  # activated density assigned to empty space


def softplus(x):
    return np.logaddexp(0.0, x)


def inv_softplus(y):
    y = np.asarray(y, dtype=np.float64)
    if np.any(y <= 0.0):
        raise ValueError("inverse softplus needs positive input")
    return np.log(np.expm1(y))


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), 1e-7, 1.0 - 1e-7)
    return np.log(p) - np.log1p(-p)


@dataclass
class VoxelGrid:
    """Vertex-sampled raw density and color over an axis-aligned bounding box.

    params has shape (nx, ny, nz, 4): channel 0 is raw density, channels 1:4
    raw color.  resolution counts vertices per axis (cells are resolution-1).
    """

    resolution: tuple[int, int, int]
    bbox_min: np.ndarray
    bbox_max: np.ndarray
    params: np.ndarray

    def __post_init__(self):
        self.resolution = tuple(int(n) for n in self.resolution)
        self.bbox_min = np.asarray(self.bbox_min, dtype=np.float64).reshape(3)
        self.bbox_max = np.asarray(self.bbox_max, dtype=np.float64).reshape(3)
        if any(n < 2 for n in self.resolution):
            raise ValueError(f"resolution must be >= 2 per axis, got {self.resolution}")
        if not np.all(self.bbox_min < self.bbox_max):
            raise ValueError("bbox_min must be strictly below bbox_max componentwise")
        expected = (*self.resolution, 4)
        if self.params.shape != expected:
            raise ValueError(f"params shape {self.params.shape} != {expected}")

    @property
    def raw_density(self) -> np.ndarray:
        return self.params[..., 0]

    @property
    def raw_color(self) -> np.ndarray:
        return self.params[..., 1:4]

    @property
    def n_vertices(self) -> int:
        nx, ny, nz = self.resolution
        return nx * ny * nz

    @property
    def cell_size(self) -> np.ndarray:
        res = np.array(self.resolution, dtype=np.float64)
        return (self.bbox_max - self.bbox_min) / (res - 1.0)

    def vertex_positions(self) -> np.ndarray:
        """World positions of all vertices, shape (nx, ny, nz, 3)."""
        axes = [
            np.linspace(self.bbox_min[a], self.bbox_max[a], self.resolution[a])
            for a in range(3)
        ]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.resolution, self.bbox_min.copy(), self.bbox_max.copy(), self.params.copy())


def trilinear_cells(bbox_min, bbox_max, resolution, pts, clamp=False):
    """Cell indices and local coordinates of query points in a vertex grid.

    Returns (cell (M,3) int64, local (M,3) in [0,1] inside the grid, inside
    (M,) bool, cell_size (3,)).  With clamp=True, out-of-box points are
    projected onto the boundary (edge extension).
    """
    pts = np.asarray(pts, dtype=np.float64)
    res = np.asarray(resolution, dtype=np.int64)
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    cell_size = (bbox_max - bbox_min) / (res - 1)
    g = (pts - bbox_min) / cell_size
    inside = np.all((pts >= bbox_min) & (pts <= bbox_max), axis=-1)
    cell = np.clip(np.floor(g).astype(np.int64), 0, res - 2)
    local = g - cell
    if clamp:
        local = np.clip(local, 0.0, 1.0)
    return cell, local, inside, cell_size


_CORNER_OFFSETS = np.array(
    [[dx, dy, dz] for dx in (0, 1) for dy in (0, 1) for dz in (0, 1)], dtype=np.int64
)  # (8, 3)


def corner_flat_indices(cell: np.ndarray, resolution) -> np.ndarray:
    """Flat vertex indices (C order over (nx, ny, nz)) of a cell's 8 corners."""
    nx, ny, nz = resolution
    corners = cell[:, None, :] + _CORNER_OFFSETS[None, :, :]  # (M, 8, 3)
    return (corners[..., 0] * ny + corners[..., 1]) * nz + corners[..., 2]


def corner_weights(local: np.ndarray) -> np.ndarray:
    """Trilinear weights (M, 8) for local cell coordinates, corner order matching _CORNER_OFFSETS."""
    u, v, w = local[:, 0], local[:, 1], local[:, 2]
    wx = np.stack([1.0 - u, u], axis=1)  # (M, 2)
    wy = np.stack([1.0 - v, v], axis=1)
    wz = np.stack([1.0 - w, w], axis=1)
    dx = _CORNER_OFFSETS[:, 0]
    dy = _CORNER_OFFSETS[:, 1]
    dz = _CORNER_OFFSETS[:, 2]
    return wx[:, dx] * wy[:, dy] * wz[:, dz]


def corner_weight_gradients(local: np.ndarray) -> np.ndarray:
    """d(weight)/d(local coord): shape (M, 8, 3), in local cell units."""
    u, v, w = local[:, 0], local[:, 1], local[:, 2]
    wx = np.stack([1.0 - u, u], axis=1)
    wy = np.stack([1.0 - v, v], axis=1)
    wz = np.stack([1.0 - w, w], axis=1)
    sx = np.array([-1.0, 1.0])
    dx = _CORNER_OFFSETS[:, 0]
    dy = _CORNER_OFFSETS[:, 1]
    dz = _CORNER_OFFSETS[:, 2]
    gx = sx[dx][None, :] * wy[:, dy] * wz[:, dz]
    gy = wx[:, dx] * sx[dy][None, :] * wz[:, dz]
    gz = wx[:, dx] * wy[:, dy] * sx[dz][None, :]
    return np.stack([gx, gy, gz], axis=-1)


def interpolate_raw(grid: VoxelGrid, pts: np.ndarray):
    """Raw trilinear interpolation of grid params at pts.

    Returns (raw (M, 4), inside (M,) bool).  Out-of-box points get the raw
    value of the clamped boundary cell; callers decide what to do with them.
    """
    cell, local, inside, _ = trilinear_cells(grid.bbox_min, grid.bbox_max, grid.resolution, pts)
    flat = corner_flat_indices(cell, grid.resolution)
    w8 = corner_weights(np.clip(local, 0.0, 1.0))
    vals = grid.params.reshape(-1, 4)[flat]  # (M, 8, 4)
    raw = np.einsum("mc,mcf->mf", w8, vals)
    return raw, inside


def sample_field_batch(grid: VoxelGrid, pts: np.ndarray, background=(1.0, 1.0, 1.0)):
    """Activated (density, rgb) at many points; outside the bbox density is 0
    and the color is the background."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    raw, inside = interpolate_raw(grid, pts)
    density = np.where(inside, softplus(raw[:, 0]), 0.0)
    rgb = np.where(inside[:, None], sigmoid(raw[:, 1:4]), np.asarray(background, dtype=np.float64))
    return density, rgb


def sample_field(grid: VoxelGrid, x, background=(1.0, 1.0, 1.0)):
    """Single-point convenience wrapper around sample_field_batch."""
    density, rgb = sample_field_batch(grid, np.asarray(x, dtype=np.float64).reshape(1, 3), background)
    return float(density[0]), rgb[0]


# --- procedural scenes --------------------------------------------------------


@dataclass
class Primitive:
    """Solid sphere or axis-aligned box with uniform density and color.

    size is a radius for spheres and full edge lengths (3-vector) for boxes.
    """

    kind: str
    center: np.ndarray
    size: np.ndarray
    color: np.ndarray
    density: float

    def __post_init__(self):
        if self.kind not in ("sphere", "box"):
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        self.center = np.asarray(self.center, dtype=np.float64).reshape(3)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)
        if self.kind == "sphere":
            self.size = np.float64(self.size)
            if self.size <= 0:
                raise ValueError("sphere radius must be positive")
        else:
            self.size = np.asarray(self.size, dtype=np.float64).reshape(3)
            if np.any(self.size <= 0):
                raise ValueError("box extents must be positive")
        if self.density <= 0:
            raise ValueError("primitive density must be positive")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("primitive color must be in [0, 1]")

    def bounds(self):
        if self.kind == "sphere":
            r = np.full(3, float(self.size))
        else:
            r = self.size / 2.0
        return self.center - r, self.center + r

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - self.center
        if self.kind == "sphere":
            return np.einsum("...i,...i->...", d, d) <= float(self.size) ** 2
        return np.all(np.abs(d) <= self.size / 2.0, axis=-1)


@dataclass
class SceneSpec:
    primitives: list[Primitive] = field(default_factory=list)
    background_color: np.ndarray = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.background_color = np.asarray(self.background_color, dtype=np.float64).reshape(3)
        if np.any(self.background_color < 0) or np.any(self.background_color > 1):
            raise ValueError("background color must be in [0, 1]")


def build_scene(spec: SceneSpec, resolution, bbox_min, bbox_max) -> VoxelGrid:
    """Rasterize a scene spec into raw grid parameters.

    Inside primitives, the activated density equals the primitive density and
    the activated color equals the primitive color; overlaps take the densest
    primitive (earlier primitive wins ties).  Empty space gets activated
    density EMPTY_RAW_DENSITY_TARGET and the background color.
    """
    grid = VoxelGrid(
        tuple(resolution),
        np.asarray(bbox_min, dtype=np.float64),
        np.asarray(bbox_max, dtype=np.float64),
        np.zeros((*resolution, 4), dtype=np.float64),
    )
    for i, prim in enumerate(spec.primitives):
        lo, hi = prim.bounds()
        if np.any(lo < grid.bbox_min) or np.any(hi > grid.bbox_max):
            raise ValueError(f"primitive {i} ({prim.kind}) extends outside the bbox")

    pts = grid.vertex_positions()
    best_density = np.zeros(grid.resolution, dtype=np.float64)
    color = np.broadcast_to(spec.background_color, (*grid.resolution, 3)).copy()
    for prim in spec.primitives:
        mask = prim.contains(pts) & (prim.density > best_density)
        best_density[mask] = prim.density
        color[mask] = prim.color

    occupied = best_density > 0.0
    grid.raw_density[...] = inv_softplus(
        np.where(occupied, best_density, EMPTY_RAW_DENSITY_TARGET)
    )
    grid.raw_color[...] = logit(color)
    return grid


def init_grid(resolution, bbox_min, bbox_max, seed: int) -> VoxelGrid:
    """Fresh trainable grid: uniform low density, near-gray randomized color."""
    rng = np.random.default_rng(seed)
    params = np.empty((*resolution, 4), dtype=np.float64)
    params[..., 0] = inv_softplus(0.01)
    params[..., 1:4] = rng.uniform(-1e-2, 1e-2, size=(*resolution, 3))
    return VoxelGrid(
        tuple(resolution),
        np.asarray(bbox_min, dtype=np.float64),
        np.asarray(bbox_max, dtype=np.float64),
        params,
    )


# --- checkpoint format ---------------------------------------------------------
#
# Text header line: "RNFGRID1 nx ny nz minx miny minz maxx maxy maxz\n",
# then little-endian float32 blocks, x varying fastest within each block:
# raw density (nx*ny*nz floats), then raw color as three channel planes
# (R plane, G plane, B plane).


def save_grid(grid: VoxelGrid, path) -> None:
    nx, ny, nz = grid.resolution
    header = " ".join(
        [GRID_MAGIC, str(nx), str(ny), str(nz)]
        + [format(v, ".17g") for v in (*grid.bbox_min, *grid.bbox_max)]
    )
    with open(path, "wb") as fh:
        fh.write((header + "\n").encode("ascii"))
        fh.write(grid.raw_density.astype("<f4").ravel(order="F").tobytes())
        for ch in range(3):
            fh.write(grid.raw_color[..., ch].astype("<f4").ravel(order="F").tobytes())


def load_grid(path) -> VoxelGrid:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").strip().split()
        if len(header) != 10 or header[0] != GRID_MAGIC:
            raise ValueError(f"{path}: not a {GRID_MAGIC} checkpoint")
        nx, ny, nz = (int(tok) for tok in header[1:4])
        bbox = [float(tok) for tok in header[4:10]]
        count = nx * ny * nz
        blob = np.frombuffer(fh.read(4 * count * 4), dtype="<f4")
        if blob.size != count * 4:
            raise ValueError(f"{path}: truncated parameter data")
    params = np.empty((nx, ny, nz, 4), dtype=np.float64)
    params[..., 0] = blob[:count].reshape((nx, ny, nz), order="F")
    for ch in range(3):
        block = blob[(1 + ch) * count : (2 + ch) * count]
        params[..., 1 + ch] = block.reshape((nx, ny, nz), order="F")
    return VoxelGrid((nx, ny, nz), np.array(bbox[:3]), np.array(bbox[3:]), params)
