"""Isosurface extraction and the quantitative evaluation suite.

Chamfer distance is the unsquared bidirectional mean nearest-neighbor L2,
0.5 * (mean_p min_q |p-q| + mean_q min_p |q-p|). F-score uses threshold tau,
by default 5% of the ground-truth bounding-box diagonal. Both definitions are
config overrides in the CLI, so reported numbers stay interpretable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
from scipy.spatial import cKDTree

from .errors import EmptyField, EmptySet, ShapeMismatch


@dataclass
class TriangleMesh:
    vertices: np.ndarray   # (V, 3) world units
    triangles: np.ndarray  # (T, 3) int indices


@dataclass
class MetricReport:
    psnr: float = 0.0
    ssim: float = 0.0
    chamfer: float = float("nan")
    fscore: float = float("nan")
    per_view: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps({
            "psnr": self.psnr, "ssim": self.ssim,
            "chamfer": self.chamfer, "fscore": self.fscore,
            "per_view": self.per_view,
        }, sort_keys=True)


def marching_cubes_grid(values: np.ndarray, iso_level: float,
                        box_radius: float) -> TriangleMesh:
    """Marching cubes over a cubic (R, R, R) scalar grid spanning the box."""
    from skimage import measure

    if not (values.min() < iso_level < values.max()):
        raise EmptyField(f"no cell crosses iso level {iso_level}")
    verts, faces, _, _ = measure.marching_cubes(values, level=iso_level,
                                                allow_degenerate=False)
    res = values.shape[0]
    verts = verts / (res - 1) * 2 * box_radius - box_radius
    # drop any zero-area triangles left after extraction
    tri = verts[faces]
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=-1)
    faces = faces[areas > 1e-14]
    return TriangleMesh(vertices=verts, triangles=faces.astype(np.int64))


def marching_cubes(field_obj, resolution: int = 128, iso_level: float = 10.0,
                   box_radius: float = 1.5, chunk: int = 131072) -> TriangleMesh:
    """Extract the density iso-surface of a radiance field."""
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    axis = np.linspace(-1.0, 1.0, resolution)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    vals = np.empty(pts.shape[0], dtype=np.float64)
    with torch.no_grad():
        for i in range(0, pts.shape[0], chunk):
            s, _ = field_obj.query(torch.from_numpy(pts[i:i + chunk]).float())
            vals[i:i + chunk] = s.double().numpy()
    grid = vals.reshape(resolution, resolution, resolution)
    return marching_cubes_grid(grid, iso_level, box_radius)


def sample_mesh_points(mesh: TriangleMesh, n_points: int = 10_000,
                       seed: int = 0) -> np.ndarray:
    """Area-weighted uniform surface samples."""
    if len(mesh.triangles) == 0:
        raise EmptySet("mesh has no triangles")
    rng = np.random.default_rng(seed)
    tri = mesh.vertices[mesh.triangles]
    areas = 0.5 * np.linalg.norm(
        np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=-1)
    chosen = rng.choice(len(tri), size=n_points, p=areas / areas.sum())
    u, v = rng.random((2, n_points))
    flip = u + v > 1
    u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
    t = tri[chosen]
    return t[:, 0] * (1 - u - v)[:, None] + t[:, 1] * u[:, None] + t[:, 2] * v[:, None]


def _check_points(p: np.ndarray, name: str) -> np.ndarray:
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    if p.shape[0] == 0:
        raise EmptySet(f"{name} is empty")
    return p


def chamfer(points_p, points_q) -> float:
    """0.5 * (mean_p min_q |p-q| + mean_q min_p |q-p|), unsquared L2."""
    p = _check_points(points_p, "P")
    q = _check_points(points_q, "Q")
    d_pq, _ = cKDTree(q).query(p)
    d_qp, _ = cKDTree(p).query(q)
    return 0.5 * (d_pq.mean() + d_qp.mean())


def fscore(points_p, points_q, tau: float | None = None) -> float:
    """Harmonic mean of precision/recall at distance threshold tau.

    tau defaults to 5% of Q's bounding-box diagonal (Q is the ground truth by
    convention). Returns 0 when neither side has a match.
    """
    p = _check_points(points_p, "P")
    q = _check_points(points_q, "Q")
    if tau is None:
        tau = 0.05 * float(np.linalg.norm(q.max(axis=0) - q.min(axis=0)))
    if tau <= 0:
        raise ValueError("tau must be positive")
    d_pq, _ = cKDTree(q).query(p)
    d_qp, _ = cKDTree(p).query(q)
    precision = float((d_pq <= tau).mean())
    recall = float((d_qp <= tau).mean())
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def psnr(image_a, image_b) -> float:
    """10 log10(1 / mse) on [0, 1] images, capped at 100 dB."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse < 1e-10:
        return 100.0
    return float(10.0 * np.log10(1.0 / mse))


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _ssim_channel(a: np.ndarray, b: np.ndarray) -> float:
    from scipy.signal import convolve2d

    k = _gaussian_kernel()
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mu_a = convolve2d(a, k, mode="valid")
    mu_b = convolve2d(b, k, mode="valid")
    var_a = convolve2d(a * a, k, mode="valid") - mu_a ** 2
    var_b = convolve2d(b * b, k, mode="valid") - mu_b ** 2
    cov = convolve2d(a * b, k, mode="valid") - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


def ssim(image_a, image_b) -> float:
    """SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels."""
    a = np.asarray(image_a, dtype=np.float64)
    b = np.asarray(image_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if a.ndim == 2:
        return _ssim_channel(a, b)
    return float(np.mean([_ssim_channel(a[..., c], b[..., c]) for c in range(a.shape[-1])]))


def export_obj(mesh: TriangleMesh, path: str) -> None:
    """ASCII OBJ with vertices and 1-indexed faces."""
    with open(path, "w") as f:
        for v in mesh.vertices:
            f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
