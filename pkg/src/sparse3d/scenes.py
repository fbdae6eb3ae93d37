"""Synthetic posed multi-view datasets with exact color/depth/mask ground truth.

Scenes are unions of textured SDF primitives (sphere, box, capsule). Albedo is
attached to geometry (no lighting), so every surface point has the same color
in every view and ground truth is perfectly multiview-consistent. Background
is white, mask == (depth > 0).

Dataset directory layout (all little-endian):
    meta.json        version, intrinsics, poses (row-major), category id, s
    view_{i:03}.png  8-bit RGB
    depth_{i:03}.f32 raw float32 raster, H*W*4 bytes, 0 = background
    mask_{i:03}.png  8-bit, 0 or 255
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import EmptySpec, IoFailure, SchemaMismatch
from .geometry import CameraPose, look_at_pose, pixel_grid_rays

META_VERSION = 1
TRACE_MAX_STEPS = 256
TRACE_EPS = 1e-4


def _euler_deg_to_matrix(angles) -> np.ndarray:
    ax, ay, az = np.deg2rad(np.asarray(angles, dtype=np.float64))
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


@dataclass
class Primitive:
    kind: str                  # sphere | box | capsule
    params: dict
    rotation: np.ndarray       # local->world
    center: np.ndarray
    color: np.ndarray
    color2: np.ndarray
    pattern: str               # plain | stripes | checker
    pattern_scale: float
    phase: float

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (points - self.center) @ self.rotation

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = self.to_local(points)
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=-1) - self.params["radius"]
        if self.kind == "box":
            q = np.abs(p) - np.asarray(self.params["half_extents"])
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            inside = np.minimum(q.max(axis=-1), 0.0)
            return outside + inside
        if self.kind == "capsule":
            h, r = self.params["half_height"], self.params["radius"]
            q = p.copy()
            q[..., 2] -= np.clip(q[..., 2], -h, h)
            return np.linalg.norm(q, axis=-1) - r
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def albedo(self, points: np.ndarray) -> np.ndarray:
        p = self.to_local(points)
        if self.pattern == "plain":
            return np.broadcast_to(self.color, p.shape).copy()
        if self.pattern == "stripes":
            w = 0.5 + 0.5 * np.sin(self.pattern_scale * p[..., 0] + self.phase)
        else:  # checker
            cells = np.floor(self.pattern_scale * p + self.phase).astype(np.int64)
            w = (cells.sum(axis=-1) % 2).astype(np.float64)
        return self.color * (1 - w[..., None]) + self.color2 * w[..., None]

    def bounding_radius(self) -> float:
        if self.kind == "sphere":
            local = self.params["radius"]
        elif self.kind == "box":
            local = float(np.linalg.norm(self.params["half_extents"]))
        else:
            local = self.params["half_height"] + self.params["radius"]
        return float(np.linalg.norm(self.center)) + local


@dataclass
class SceneOracle:
    """Exact scene geometry: min-union SDF with per-primitive albedo."""

    primitives: list[Primitive]
    category_id: int = 0

    @property
    def bounding_radius(self) -> float:
        return max(p.bounding_radius() for p in self.primitives)

    def sdf(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.min([p.sdf(points) for p in self.primitives], axis=0)

    def albedo(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        dists = np.stack([p.sdf(points) for p in self.primitives])
        nearest = np.argmin(dists, axis=0)
        colors = np.stack([p.albedo(points) for p in self.primitives])
        return np.clip(colors[nearest, np.arange(points.shape[0])], 0.0, 1.0)


def make_scene(spec: dict) -> SceneOracle:
    """Build a SceneOracle from a JSON-able spec dict.

    spec = {"category_id": int, "seed": int, "primitives": [
        {"kind": "sphere", "radius": 0.8, "center": [x,y,z], ...}, ...]}
    Per-primitive keys: color, color2, pattern ("plain"/"stripes"/"checker"),
    pattern_scale, rotation_euler_deg. The seed only randomizes texture phase.
    """
    prims = spec.get("primitives", [])
    if not prims:
        raise EmptySpec("scene spec has no primitives")
    rng = np.random.default_rng(spec.get("seed", 0))
    out = []
    for p in prims:
        kind = p["kind"]
        if kind == "sphere":
            params = {"radius": float(p["radius"])}
        elif kind == "box":
            params = {"half_extents": np.asarray(p["half_extents"], dtype=np.float64)}
        elif kind == "capsule":
            params = {"half_height": float(p["half_height"]), "radius": float(p["radius"])}
        else:
            raise EmptySpec(f"unknown primitive kind {kind!r}")
        out.append(
            Primitive(
                kind=kind,
                params=params,
                rotation=_euler_deg_to_matrix(p.get("rotation_euler_deg", (0, 0, 0))),
                center=np.asarray(p.get("center", (0, 0, 0)), dtype=np.float64),
                color=np.asarray(p.get("color", (0.7, 0.7, 0.7)), dtype=np.float64),
                color2=np.asarray(p.get("color2", (0.25, 0.25, 0.3)), dtype=np.float64),
                pattern=p.get("pattern", "plain"),
                pattern_scale=float(p.get("pattern_scale", 6.0)),
                phase=float(rng.uniform(0, 2 * np.pi)),
            )
        )
    return SceneOracle(primitives=out, category_id=int(spec.get("category_id", 0)))


@dataclass
class CameraView:
    pose: CameraPose
    rgb: np.ndarray    # (H, W, 3) in [0, 1]
    mask: np.ndarray   # (H, W) uint8 {0, 1}
    depth: np.ndarray  # (H, W) float32, camera-frame Z, 0 = background


@dataclass
class Dataset:
    views: list[CameraView] = field(default_factory=list)
    scale_s: float = 0.0
    category_id: int = 0


def sphere_trace(scene: SceneOracle, origins: np.ndarray, directions: np.ndarray,
                 t_min: np.ndarray, t_max: np.ndarray):
    """Vectorized sphere tracing. Returns (hit (N,) bool, t (N,) float)."""
    n = origins.shape[0]
    t = np.asarray(t_min, dtype=np.float64).copy()
    t_max = np.asarray(t_max, dtype=np.float64)
    hit = np.zeros(n, dtype=bool)
    active = np.ones(n, dtype=bool)
    for _ in range(TRACE_MAX_STEPS):
        idx = np.where(active)[0]
        if idx.size == 0:
            break
        pts = origins[idx] + t[idx, None] * directions[idx]
        d = scene.sdf(pts)
        converged = d < TRACE_EPS
        hit[idx[converged]] = True
        active[idx[converged]] = False
        adv = idx[~converged]
        t[adv] += d[~converged]
        escaped = t[adv] > t_max[adv]
        active[adv[escaped]] = False
    # Newton refinement along the ray: marching stops at sdf < eps, which at
    # grazing incidence leaves an along-ray error of eps / cos(incidence).
    if hit.any():
        hidx = np.where(hit)[0]
        o, d = origins[hidx], directions[hidx]
        h = 1e-5
        for _ in range(3):
            pts = o + t[hidx, None] * d
            f = scene.sdf(pts)
            deriv = (scene.sdf(pts + h * d) - scene.sdf(pts - h * d)) / (2 * h)
            deriv = np.where(np.abs(deriv) < 0.01, np.sign(deriv + 1e-12) * 0.01, deriv)
            t[hidx] = t[hidx] - f / deriv
    return hit, t


def render_ground_truth(scene: SceneOracle, camera: CameraPose) -> CameraView:
    """Sphere-trace every pixel; albedo-only shading over a white background."""
    w, h = camera.width, camera.height
    origins, dirs, cos_z = pixel_grid_rays(camera, w, h)
    dist = np.linalg.norm(camera.center)
    r = scene.bounding_radius
    t0 = np.full(origins.shape[0], max(dist - r - 0.5, 1e-3))
    t1 = np.full(origins.shape[0], dist + r + 0.5)
    hit, t = sphere_trace(scene, origins, dirs, t0, t1)

    rgb = np.ones((h * w, 3))
    depth = np.zeros(h * w, dtype=np.float64)
    if hit.any():
        pts = origins[hit] + t[hit, None] * dirs[hit]
        rgb[hit] = scene.albedo(pts)
        depth[hit] = t[hit] * cos_z[hit]
    return CameraView(
        pose=camera,
        rgb=rgb.reshape(h, w, 3),
        mask=hit.reshape(h, w).astype(np.uint8),
        depth=depth.reshape(h, w).astype(np.float32),
    )


def orbit_cameras(n_views: int, radius: float, elevation_deg: float, resolution: int,
                  fov_margin: float = 1.25, object_radius: float = 1.2,
                  azimuth_offset_deg: float = 0.0) -> list[CameraPose]:
    """Cameras on an orbit around the origin, evenly spaced in azimuth."""
    half_angle = np.arctan(object_radius * fov_margin / radius)
    f = 0.5 * resolution / np.tan(half_angle)
    elev = np.deg2rad(elevation_deg)
    cams = []
    for i in range(n_views):
        az = np.deg2rad(azimuth_offset_deg) + 2 * np.pi * i / n_views
        eye = radius * np.array(
            [np.cos(az) * np.cos(elev), np.sin(az) * np.cos(elev), np.sin(elev)]
        )
        cams.append(look_at_pose(eye, (0, 0, 0), f, f, resolution, resolution))
    return cams


def generate_dataset(scene: SceneOracle, n_views: int, orbit_radius: float = 6.0,
                     elevation_deg: float = 20.0, resolution: int = 64,
                     seed: int = 0, azimuth_offset_deg: float = 0.0) -> Dataset:
    if n_views < 2:
        raise ValueError("need at least 2 views")
    cams = orbit_cameras(
        n_views, orbit_radius, elevation_deg, resolution,
        object_radius=scene.bounding_radius,
        azimuth_offset_deg=azimuth_offset_deg,
    )
    views = [render_ground_truth(scene, c) for c in cams]
    s = float(np.mean([np.linalg.norm(c.center) for c in cams]))
    return Dataset(views=views, scale_s=s, category_id=scene.category_id)


def save_dataset(dataset: Dataset, directory: str) -> None:
    try:
        os.makedirs(directory, exist_ok=True)
        meta = {
            "version": META_VERSION,
            "scale_s": dataset.scale_s,
            "category_id": dataset.category_id,
            "views": [],
        }
        for i, view in enumerate(dataset.views):
            p = view.pose
            names = {"rgb": f"view_{i:03}.png", "depth": f"depth_{i:03}.f32",
                     "mask": f"mask_{i:03}.png"}
            meta["views"].append({
                "rotation": p.rotation.reshape(-1).tolist(),
                "translation": p.translation.tolist(),
                "fx": p.fx, "fy": p.fy, "cx": p.cx, "cy": p.cy,
                "width": p.width, "height": p.height,
                **names,
            })
            rgb8 = np.clip(np.round(view.rgb * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(rgb8).save(os.path.join(directory, names["rgb"]))
            Image.fromarray(view.mask * 255).save(os.path.join(directory, names["mask"]))
            with open(os.path.join(directory, names["depth"]), "wb") as f:
                f.write(view.depth.astype("<f4").tobytes())
        with open(os.path.join(directory, "meta.json"), "w") as f:
            json.dump(meta, f, indent=1, sort_keys=True)
    except OSError as e:
        raise IoFailure(f"saving dataset to {directory}: {e}") from e


def load_dataset(directory: str) -> Dataset:
    meta_path = os.path.join(directory, "meta.json")
    if not os.path.exists(meta_path):
        raise SchemaMismatch(f"missing {meta_path}")
    try:
        with open(meta_path) as f:
            meta = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IoFailure(f"reading {meta_path}: {e}") from e
    if meta.get("version") != META_VERSION:
        raise SchemaMismatch(f"unsupported dataset version {meta.get('version')!r}")
    views = []
    try:
        for v in meta["views"]:
            pose = CameraPose(
                rotation=np.asarray(v["rotation"]).reshape(3, 3),
                translation=np.asarray(v["translation"]),
                fx=v["fx"], fy=v["fy"], cx=v["cx"], cy=v["cy"],
                width=v["width"], height=v["height"],
            )
            rgb = np.asarray(Image.open(os.path.join(directory, v["rgb"])), dtype=np.float64) / 255.0
            mask = (np.asarray(Image.open(os.path.join(directory, v["mask"]))) > 127).astype(np.uint8)
            h, w = mask.shape
            depth = np.frombuffer(
                open(os.path.join(directory, v["depth"]), "rb").read(), dtype="<f4"
            ).reshape(h, w)
            views.append(CameraView(pose=pose, rgb=rgb, mask=mask, depth=depth.copy()))
    except (OSError, KeyError, ValueError) as e:
        raise IoFailure(f"reading dataset from {directory}: {e}") from e
    return Dataset(views=views, scale_s=float(meta["scale_s"]),
                   category_id=int(meta["category_id"]))


def downsample_view(view: CameraView, out_size: int):
    """Box-filtered (rgb, depth, mask) at out_size**2 for loss targets.

    Depth averages only foreground pixels inside each window; mask is the
    majority vote, so mask == (depth > 0) is preserved.
    """
    h = view.rgb.shape[0]
    assert h % out_size == 0, "resolution must be a multiple of out_size"
    k = h // out_size
    rgb = view.rgb.reshape(out_size, k, out_size, k, 3).mean(axis=(1, 3))
    m = view.mask.reshape(out_size, k, out_size, k).astype(np.float64)
    d = view.depth.reshape(out_size, k, out_size, k).astype(np.float64)
    fg = m.sum(axis=(1, 3))
    depth = np.where(fg > 0, (d * m).sum(axis=(1, 3)) / np.maximum(fg, 1), 0.0)
    mask = (fg >= (k * k) / 2.0).astype(np.uint8)
    # keep the invariant mask == (depth > 0) at the coarse scale
    depth = np.where(mask > 0, depth, 0.0)
    return rgb, depth, mask


def random_scene_spec(category_id: int, rng: np.random.Generator) -> dict:
    """Procedural scene families used as desk-scale object categories.

    0: one or two spheres, 1: one or two boxes, 2: a sphere + box compound.
    """
    def color():
        return rng.uniform(0.15, 0.95, size=3).tolist()

    def texture():
        return {
            "color": color(), "color2": color(),
            "pattern": rng.choice(["stripes", "checker"]),
            "pattern_scale": float(rng.uniform(2.5, 5.5)),
        }

    prims = []
    if category_id == 0:
        prims.append({"kind": "sphere", "radius": float(rng.uniform(0.7, 0.95)),
                      "center": [0, 0, 0], **texture()})
        if rng.random() < 0.5:
            off = rng.uniform(-0.5, 0.5, size=3)
            prims.append({"kind": "sphere", "radius": float(rng.uniform(0.3, 0.5)),
                          "center": (off / max(np.linalg.norm(off), 1e-6) * 0.7).tolist(),
                          **texture()})
    elif category_id == 1:
        prims.append({"kind": "box",
                      "half_extents": rng.uniform(0.45, 0.75, size=3).tolist(),
                      "center": [0, 0, 0],
                      "rotation_euler_deg": rng.uniform(-40, 40, size=3).tolist(),
                      **texture()})
        if rng.random() < 0.5:
            prims.append({"kind": "box",
                          "half_extents": rng.uniform(0.2, 0.4, size=3).tolist(),
                          "center": rng.uniform(-0.55, 0.55, size=3).tolist(),
                          "rotation_euler_deg": rng.uniform(-40, 40, size=3).tolist(),
                          **texture()})
    else:
        prims.append({"kind": "sphere", "radius": float(rng.uniform(0.55, 0.75)),
                      "center": [-0.35, float(rng.uniform(-0.15, 0.15)), 0.1], **texture()})
        prims.append({"kind": "box",
                      "half_extents": rng.uniform(0.35, 0.5, size=3).tolist(),
                      "center": [0.45, float(rng.uniform(-0.15, 0.15)), -0.1],
                      "rotation_euler_deg": rng.uniform(-30, 30, size=3).tolist(),
                      **texture()})
    return {"category_id": category_id, "seed": int(rng.integers(2**31)),
            "primitives": prims}


def sdf_surface_points(scene: SceneOracle, n_points: int, seed: int = 0) -> np.ndarray:
    """Points on the exact SDF zero set, for geometry evaluation.

    Marching cubes on the SDF proposes seed points; Newton projection along
    the finite-difference SDF gradient then lands them on the surface to
    |sdf| < 1e-5, so accuracy does not depend on the mesher.
    """
    from skimage import measure

    r = scene.bounding_radius * 1.1
    res = 96
    axis = np.linspace(-r, r, res)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    grid = scene.sdf(np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)).reshape(res, res, res)
    verts, faces, _, _ = measure.marching_cubes(grid, level=0.0)
    verts = verts / (res - 1) * 2 * r - r

    rng = np.random.default_rng(seed)
    tri = verts[faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=-1
    )
    chosen = rng.choice(len(faces), size=n_points, p=areas / areas.sum())
    u, v = rng.random((2, n_points))
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    pts = (tri[chosen, 0] * (1 - u - v)[:, None] + tri[chosen, 1] * u[:, None]
           + tri[chosen, 2] * v[:, None])

    eps = 1e-4
    for _ in range(8):
        d = scene.sdf(pts)
        if np.abs(d).max() < 1e-5:
            break
        grad = np.stack([
            scene.sdf(pts + np.eye(3)[i] * eps) - scene.sdf(pts - np.eye(3)[i] * eps)
            for i in range(3)
        ], axis=-1) / (2 * eps)
        grad /= np.maximum(np.linalg.norm(grad, axis=-1, keepdims=True), 1e-9)
        pts = pts - d[:, None] * grad
    return pts
