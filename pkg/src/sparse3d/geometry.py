"""Cameras, rays, Plücker coordinates, projection, and relative transforms.

Conventions (fixed for the whole package):
  * world -> camera:  x_cam = R @ x_world + t, camera looks down +Z,
    x maps to image u (right), y to image v (down); frames are right-handed.
  * "depth" always means camera-frame Z, not Euclidean ray distance.
All functions are pure and operate on float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCamera, InvalidRange


@dataclass
class CameraPose:
    """Pinhole camera: world->camera rotation/translation plus intrinsics."""

    rotation: np.ndarray      # (3, 3), orthonormal, det +1
    translation: np.ndarray   # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self):
        r = self.rotation
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside image")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_cam(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return pts @ self.rotation.T + self.translation

    def matrix4(self) -> np.ndarray:
        """World->camera transform as a 4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


@dataclass
class Ray:
    origin: np.ndarray     # (3,)
    direction: np.ndarray  # (3,), unit
    near: float
    far: float

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if not (0 <= self.near < self.far):
            raise InvalidRange(f"need 0 <= near < far, got [{self.near}, {self.far}]")


@dataclass
class PluckerCoords:
    direction: np.ndarray  # (3,), unit
    moment: np.ndarray     # (3,), origin x direction


def plucker(ray: Ray) -> PluckerCoords:
    """Line coordinates (d, o x d); identical for any origin on the line."""
    d = ray.direction / np.linalg.norm(ray.direction)
    return PluckerCoords(direction=d, moment=np.cross(ray.origin, d))


def project(camera: CameraPose, point) -> tuple[float, float, float]:
    """Pinhole projection of a single world point to (u, v, depth).

    Raises BehindCamera when the camera-frame Z is <= 0.
    """
    x, y, z = camera.world_to_cam(point)[0]
    if z <= 0:
        raise BehindCamera(f"point has camera-frame depth {z}")
    return camera.cx + camera.fx * x / z, camera.cy + camera.fy * y / z, z


def project_many(camera: CameraPose, points: np.ndarray):
    """Batch projection: returns (uv (N,2), depth (N,), valid (N,) bool).

    Points behind the camera get valid=False instead of raising; their uv
    entries are filled with 0 and must not be used.
    """
    cam = camera.world_to_cam(points)
    z = cam[:, 2]
    valid = z > 1e-9
    zs = np.where(valid, z, 1.0)
    u = camera.cx + camera.fx * cam[:, 0] / zs
    v = camera.cy + camera.fy * cam[:, 1] / zs
    uv = np.stack([np.where(valid, u, 0.0), np.where(valid, v, 0.0)], axis=-1)
    return uv, z, valid


def unproject(camera: CameraPose, u: float, v: float, depth: float) -> np.ndarray:
    """Inverse of project: pixel (u, v) at camera-frame depth back to world."""
    x = (u - camera.cx) / camera.fx * depth
    y = (v - camera.cy) / camera.fy * depth
    cam = np.array([x, y, depth])
    return camera.rotation.T @ (cam - camera.translation)


def relative_transform(query: CameraPose, input: CameraPose) -> np.ndarray:
    """4x4 rigid transform T_input o T_query^-1 (query-camera to input-camera)."""
    return input.matrix4() @ np.linalg.inv(query.matrix4())


def camera_ray(camera: CameraPose, u: float, v: float, near: float, far: float) -> Ray:
    """World-space ray through pixel (u, v)."""
    d_cam = np.array([(u - camera.cx) / camera.fx, (v - camera.cy) / camera.fy, 1.0])
    d_world = camera.rotation.T @ d_cam
    d_world /= np.linalg.norm(d_world)
    return Ray(origin=camera.center, direction=d_world, near=near, far=far)


def pixel_grid_rays(camera: CameraPose, width: int, height: int):
    """Rays through the centers of a width x height pixel grid.

    Returns (origins (H*W, 3), directions (H*W, 3), cos_z (H*W,)) where cos_z
    is the camera-frame Z component of each unit direction: a point at ray
    parameter tau has camera-frame depth tau * cos_z.
    """
    u = (np.arange(width) + 0.5) * (camera.width / width)
    v = (np.arange(height) + 0.5) * (camera.height / height)
    uu, vv = np.meshgrid(u, v)
    d_cam = np.stack(
        [
            (uu - camera.cx) / camera.fx,
            (vv - camera.cy) / camera.fy,
            np.ones_like(uu),
        ],
        axis=-1,
    ).reshape(-1, 3)
    d_world = d_cam @ camera.rotation
    cos_z = 1.0 / np.linalg.norm(d_cam, axis=-1)
    d_world = d_world * cos_z[:, None]
    origins = np.broadcast_to(camera.center, d_world.shape).copy()
    return origins, d_world, cos_z


def look_at_pose(
    eye,
    target,
    fx: float,
    fy: float,
    width: int,
    height: int,
    up=(0.0, 0.0, 1.0),
) -> CameraPose:
    """Camera at `eye` looking toward `target`, world up axis `up`."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    forward = target - eye
    forward = forward / np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(forward @ up) > 1 - 1e-8:
        up = np.array([0.0, 1.0, 0.0])
    x = np.cross(forward, up)
    x /= np.linalg.norm(x)
    y = np.cross(forward, x)
    rotation = np.stack([x, y, forward])
    return CameraPose(
        rotation=rotation,
        translation=-rotation @ eye,
        fx=fx,
        fy=fy,
        cx=width / 2.0,
        cy=height / 2.0,
        width=width,
        height=height,
    )


def sample_ray_depths(
    near: float,
    far: float,
    count: int,
    stratified: bool = False,
    rng_seed: int = 0,
) -> np.ndarray:
    """`count` sorted depths in [near, far).

    Non-stratified mode returns the midpoints of `count` equal bins, so the
    result is deterministic; stratified mode draws one uniform sample per bin
    from a generator seeded with `rng_seed`.
    """
    if near >= far:
        raise InvalidRange(f"need near < far, got [{near}, {far}]")
    if count < 1:
        raise ValueError("count must be >= 1")
    edges = np.linspace(near, far, count + 1)
    if not stratified:
        return 0.5 * (edges[:-1] + edges[1:])
    rng = np.random.default_rng(rng_seed)
    return edges[:-1] + rng.random(count) * (edges[1:] - edges[:-1])
