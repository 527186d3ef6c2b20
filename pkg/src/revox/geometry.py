"""Rigid-body poses, quaternion interpolation, pinhole cameras and ray generation.

Camera convention: x right, y down, z forward (camera-to-world pose). Rays are
cast through pixel centers, i.e. pixel (ix, iy) maps to image-plane coordinates
(ix + 0.5, iy + 0.5).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

UNIT_NORM_TOL = 1e-9
SLERP_SIN_EPS = 1e-6


@dataclass(frozen=True)
class Quaternion:
    """Unit quaternion (w, x, y, z) representing a 3D rotation."""

    w: float
    x: float
    y: float
    z: float

    def __post_init__(self):
        n = self.norm()
        if abs(n * n - 1.0) > 1e-6:
            raise ValueError(f"quaternion must be unit-norm, got |q| = {n}")

    def norm(self) -> float:
        return math.sqrt(self.w**2 + self.x**2 + self.y**2 + self.z**2)

    def dot(self, other: "Quaternion") -> float:
        return self.w * other.w + self.x * other.x + self.y * other.y + self.z * other.z

    def __neg__(self) -> "Quaternion":
        return Quaternion(-self.w, -self.x, -self.y, -self.z)

    def as_array(self) -> np.ndarray:
        return np.array([self.w, self.x, self.y, self.z], dtype=np.float64)

    def to_matrix(self) -> np.ndarray:
        """Rotation matrix (3x3) applying this quaternion to column vectors."""
        w, x, y, z = self.w, self.x, self.y, self.z
        return np.array(
            [
                [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
                [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
                [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
            ],
            dtype=np.float64,
        )

    def rotate(self, v) -> np.ndarray:
        return self.to_matrix() @ np.asarray(v, dtype=np.float64)

    @staticmethod
    def identity() -> "Quaternion":
        return Quaternion(1.0, 0.0, 0.0, 0.0)

    @staticmethod
    def from_array(q) -> "Quaternion":
        q = np.asarray(q, dtype=np.float64)
        n = np.linalg.norm(q)
        if n == 0.0:
            raise ValueError("cannot normalize zero quaternion")
        q = q / n
        return Quaternion(float(q[0]), float(q[1]), float(q[2]), float(q[3]))

    @staticmethod
    def from_axis_angle(axis, angle: float) -> "Quaternion":
        axis = np.asarray(axis, dtype=np.float64)
        n = np.linalg.norm(axis)
        if n == 0.0:
            raise ValueError("rotation axis must be nonzero")
        axis = axis / n
        h = 0.5 * angle
        s = math.sin(h)
        return Quaternion.from_array([math.cos(h), axis[0] * s, axis[1] * s, axis[2] * s])

    @staticmethod
    def from_matrix(m) -> "Quaternion":
        """Quaternion from a rotation matrix, w >= 0 canonical form."""
        m = np.asarray(m, dtype=np.float64)
        t = np.trace(m)
        if t > 0.0:
            s = math.sqrt(t + 1.0) * 2.0
            w = 0.25 * s
            x = (m[2, 1] - m[1, 2]) / s
            y = (m[0, 2] - m[2, 0]) / s
            z = (m[1, 0] - m[0, 1]) / s
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = math.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2.0
            w = (m[2, 1] - m[1, 2]) / s
            x = 0.25 * s
            y = (m[0, 1] + m[1, 0]) / s
            z = (m[0, 2] + m[2, 0]) / s
        elif m[1, 1] > m[2, 2]:
            s = math.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2.0
            w = (m[0, 2] - m[2, 0]) / s
            x = (m[0, 1] + m[1, 0]) / s
            y = 0.25 * s
            z = (m[1, 2] + m[2, 1]) / s
        else:
            s = math.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2.0
            w = (m[1, 0] - m[0, 1]) / s
            x = (m[0, 2] + m[2, 0]) / s
            y = (m[1, 2] + m[2, 1]) / s
            z = 0.25 * s
        q = np.array([w, x, y, z])
        if q[0] < 0.0:
            q = -q
        return Quaternion.from_array(q)


def quat_angle(q_a: Quaternion, q_b: Quaternion) -> float:
    """Geodesic angle between two unit quaternions (shortest arc, in [0, pi/2])."""
    d = min(1.0, abs(q_a.dot(q_b)))
    return math.acos(d)


def slerp(q_a: Quaternion, q_b: Quaternion, beta: float) -> Quaternion:
    """Spherical linear interpolation between two unit quaternions.

    Takes the shortest arc (q_b is negated when dot(q_a, q_b) < 0) and falls
    back to normalized linear interpolation when sin(theta) < 1e-6.
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    a = q_a.as_array()
    b = q_b.as_array()
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b = -b
        dot = -dot
    dot = min(1.0, dot)
    theta = math.acos(dot)
    sin_theta = math.sin(theta)
    if sin_theta < SLERP_SIN_EPS:
        out = (1.0 - beta) * a + beta * b
    else:
        out = (math.sin((1.0 - beta) * theta) / sin_theta) * a + (
            math.sin(beta * theta) / sin_theta
        ) * b
    return Quaternion.from_array(out)


@dataclass
class Pose:
    """Rigid transform: world-space position plus unit-quaternion rotation."""

    position: np.ndarray
    rotation: Quaternion

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)

    def copy(self) -> "Pose":
        return Pose(self.position.copy(), self.rotation)


def interpolate_pose(pose_a: Pose, pose_b: Pose, beta: float) -> Pose:
    """Linear position blend plus slerp rotation blend at factor beta."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must be in [0, 1], got {beta}")
    if beta == 0.0:
        return pose_a.copy()
    if beta == 1.0:
        return pose_b.copy()
    position = (1.0 - beta) * pose_a.position + beta * pose_b.position
    return Pose(position, slerp(pose_a.rotation, pose_b.rotation, beta))


def interpolation_factors(n: int) -> tuple[float, ...]:
    """Equally spaced interpolation factors {j/n : j = 1..n-1}, ascending."""
    if n < 2:
        raise ValueError(f"augmentation factor must be >= 2, got {n}")
    return tuple(j / n for j in range(1, n))


# Named factor sets.  "<k>x" multiplies the view count per camera gap by k:
# the original pair plus k-1 interpolated views.  The three_x variants differ
# in how far the pair of factors sits from the gap midpoint.
_FACTOR_PRESETS: dict[str, tuple[float, ...]] = {
    "two_x": (0.5,),
    "three_x_mid": (0.33, 0.66),
    "three_x_narrow": (0.2, 0.8),
    "three_x_wide": (0.1, 0.9),
    "four_x": (0.25, 0.5, 0.75),
    "five_x": (0.2, 0.4, 0.6, 0.8),
    "seven_x": (0.1, 0.2, 0.4, 0.6, 0.8, 0.9),
    "eleven_x": (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95),
}


def preset_factors(name: str) -> tuple[float, ...]:
    """Look up a named interpolation-factor set (see _FACTOR_PRESETS)."""
    try:
        return _FACTOR_PRESETS[name]
    except KeyError:
        known = ", ".join(sorted(_FACTOR_PRESETS))
        raise ValueError(f"unknown factor preset {name!r}; known presets: {known}") from None


def factor_preset_names() -> tuple[str, ...]:
    return tuple(sorted(_FACTOR_PRESETS))


def order_poses_by_proximity(poses: list[Pose]) -> list[int]:
    """Greedy nearest-neighbor chain over pose positions.

    Starts from the pose with lexicographically smallest position and
    repeatedly steps to the closest unvisited pose (Euclidean distance,
    ties broken by original index).  Returns a permutation of indices.
    """
    if len(poses) < 2:
        raise ValueError("need at least 2 poses to order")
    positions = np.stack([p.position for p in poses])
    start = min(range(len(poses)), key=lambda i: (tuple(positions[i]), i))
    order = [start]
    visited = np.zeros(len(poses), dtype=bool)
    visited[start] = True
    current = start
    for _ in range(len(poses) - 1):
        d = np.linalg.norm(positions - positions[current], axis=1)
        d[visited] = np.inf
        nxt = int(np.argmin(d))  # argmin takes the first (lowest-index) minimum
        order.append(nxt)
        visited[nxt] = True
        current = nxt
    return order


@dataclass
class Camera:
    """Pinhole camera: camera-to-world pose plus intrinsics in pixels."""

    pose: Pose
    focal_x: float
    focal_y: float
    principal_x: float
    principal_y: float
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be >= 1, got {self.width}x{self.height}")
        if not 0.0 < self.near < self.far:
            raise ValueError(f"need 0 < near < far, got near={self.near} far={self.far}")

    def with_pose(self, pose: Pose) -> "Camera":
        """Same intrinsics and clip range at a different pose."""
        return Camera(
            pose,
            self.focal_x,
            self.focal_y,
            self.principal_x,
            self.principal_y,
            self.width,
            self.height,
            self.near,
            self.far,
        )


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValueError(f"need t_near < t_far, got {self.t_near} >= {self.t_far}")


class RayBundle:
    """Per-pixel rays of a camera, stored as (H, W, 3) origin/direction arrays."""

    def __init__(self, origins: np.ndarray, directions: np.ndarray, t_near: float, t_far: float):
        self.origins = origins
        self.directions = directions
        self.t_near = float(t_near)
        self.t_far = float(t_far)

    @property
    def shape(self) -> tuple[int, int]:
        return self.origins.shape[:2]

    def ray(self, iy: int, ix: int) -> Ray:
        return Ray(self.origins[iy, ix], self.directions[iy, ix], self.t_near, self.t_far)

    def flat(self) -> tuple[np.ndarray, np.ndarray]:
        """Origins and directions flattened to (H*W, 3), row-major."""
        return self.origins.reshape(-1, 3), self.directions.reshape(-1, 3)


def generate_rays(camera: Camera) -> RayBundle:
    """One world-space ray per pixel center of the camera image plane."""
    ix = np.arange(camera.width, dtype=np.float64) + 0.5
    iy = np.arange(camera.height, dtype=np.float64) + 0.5
    u, v = np.meshgrid(ix, iy)  # (H, W)
    dirs_cam = np.stack(
        [
            (u - camera.principal_x) / camera.focal_x,
            (v - camera.principal_y) / camera.focal_y,
            np.ones_like(u),
        ],
        axis=-1,
    )
    rot = camera.pose.rotation.to_matrix()
    dirs_world = dirs_cam @ rot.T
    dirs_world /= np.linalg.norm(dirs_world, axis=-1, keepdims=True)
    origins = np.broadcast_to(camera.pose.position, dirs_world.shape).copy()
    return RayBundle(origins, dirs_world, camera.near, camera.far)


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """Pose at `eye` with camera +z toward `target` and image −y toward `up`."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(forward)
    if n == 0.0:
        raise ValueError("eye and target coincide")
    forward = forward / n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(-up, forward)
    rn = np.linalg.norm(right)
    if rn < 1e-12:
        # Looking straight along up; pick an arbitrary perpendicular.
        alt = np.array([1.0, 0.0, 0.0]) if abs(forward[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        right = np.cross(alt, forward)
        rn = np.linalg.norm(right)
    right = right / rn
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward], axis=1)
    return Pose(eye, Quaternion.from_matrix(rot))


# --- plain-text camera table -------------------------------------------------

_CAMERA_HEADER = (
    "# id px py pz qw qx qy qz focal_x focal_y cx cy width height near far"
)


def save_cameras(path, cameras: list[Camera]) -> None:
    """Write cameras as a whitespace-separated text table, one row per camera."""
    lines = [_CAMERA_HEADER]
    for i, cam in enumerate(cameras):
        p = cam.pose.position
        q = cam.pose.rotation
        fields = [
            str(i),
            *(format(val, ".17g") for val in (p[0], p[1], p[2], q.w, q.x, q.y, q.z)),
            *(
                format(val, ".17g")
                for val in (cam.focal_x, cam.focal_y, cam.principal_x, cam.principal_y)
            ),
            str(cam.width),
            str(cam.height),
            format(cam.near, ".17g"),
            format(cam.far, ".17g"),
        ]
        lines.append(" ".join(fields))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_cameras(path) -> list[Camera]:
    """Read a camera table written by save_cameras; '#' starts a comment."""
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            parts = text.split()
            if len(parts) != 16:
                raise ValueError(f"{path}:{lineno}: expected 16 fields, got {len(parts)}")
            rows.append(parts)
    cameras = []
    for parts in rows:
        vals = [float(tok) for tok in parts[1:]]
        pose = Pose(np.array(vals[0:3]), Quaternion.from_array(vals[3:7]))
        cameras.append(
            Camera(
                pose,
                focal_x=vals[7],
                focal_y=vals[8],
                principal_x=vals[9],
                principal_y=vals[10],
                width=int(vals[11]),
                height=int(vals[12]),
                near=vals[13],
                far=vals[14],
            )
        )
    return cameras
