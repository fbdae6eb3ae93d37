"""Radiance-field reconstruction by category-score distillation.

Per optimization step the loop renders the field from either a reference view
(reference supervision on color and opacity-mask) or a novel orbit camera.
Novel steps noise the render, query the multiview-consistent denoiser and the
category denoiser, and apply the pixel gradient

    g = omega(t) * (eps_mc - eps_cat)        (C-SDS; SDS swaps eps_cat -> eps)

through a surrogate (g . x).sum(), plus perceptual regularization against the
one-step estimate. Geometry regularizers (orientation / opacity entropy /
sparsity) apply on every step. The feature renderer and denoisers are frozen
here, so feature maps for the novel-camera pool are computed once and cached.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .diffusion import GaussianOracle, NoiseSchedule, fc_to_batch
from .errors import DivergenceDetected
from .field import OccupancyGrid, active_levels, occupancy_update, render_rays
from .geometry import pixel_grid_rays
from .scenes import downsample_view, orbit_cameras


@dataclass
class DistillationConfig:
    guidance_scale: float = 7.5
    lambda_p: float = 100.0
    lambda_c: float = 10.0
    lambda_r: float = 1000.0
    lambda_m: float = 50.0
    t_range: tuple = (0.02, 0.98)
    steps: int = 10000
    n_samples: int = 512
    render_size: int = 32
    reference_prob: float = 0.3
    lr_hash: float = 1e-2
    lr_mlp: float = 1e-3
    reg_orientation: float = 0.1
    reg_entropy: float = 1e-3
    reg_sparsity: float = 1e-3
    occupancy_every: int = 16
    camera_pool: int = 64
    pool_elevation: tuple = (-5.0, 40.0)
    perception_target: str = "reference"   # or "render"
    distill_mode: str = "csds"             # or "sds"
    seed: int = 0

    def __post_init__(self):
        for lam in (self.lambda_p, self.lambda_c, self.lambda_r, self.lambda_m):
            if lam < 0:
                raise ValueError("loss weights must be >= 0")
        lo, hi = self.t_range
        if not (0.0 < lo < hi < 1.0):
            raise ValueError("t_range must lie strictly inside (0, 1)")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.perception_target not in ("reference", "render"):
            raise ValueError("perception_target must be 'reference' or 'render'")
        if self.distill_mode not in ("csds", "sds"):
            raise ValueError("distill_mode must be 'csds' or 'sds'")


@dataclass
class StepReport:
    step: int
    kind: str                 # "reference" | "novel"
    camera: int
    t: int
    losses: dict
    grad_norm: float

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "kind": self.kind, "camera": self.camera,
                           "t": self.t, "losses": self.losses,
                           "grad_norm": self.grad_norm}, sort_keys=True)


def write_reports(path: str, reports: list) -> None:
    with open(path, "w") as f:
        for r in reports:
            f.write(r.to_json() + "\n")


def omega(t, schedule: NoiseSchedule) -> torch.Tensor:
    """Timestep weighting 1 - abar_t (the encoder Jacobian is folded in)."""
    return 1.0 - schedule._abar(t)


def _predict(model, z, t, category, fc, schedule):
    if isinstance(model, GaussianOracle):
        return model.predict(z, t, schedule)
    t_net = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t_net.numel() == 1 and z.shape[0] > 1:
        t_net = t_net.expand(z.shape[0])
    return model.predict(z, t_net, category, fc)


def csds_gradient(x: torch.Tensor, fc: torch.Tensor | None, category, t, eps,
                  mc, cat_model, schedule: NoiseSchedule,
                  config: DistillationConfig, return_parts: bool = False):
    """Pixel gradient omega(t) (eps_mc - eps_cat) for a rendered image x.

    x is (..., 3) in [0, 1]; eps_mc applies classifier-free guidance at the
    configured scale, eps_cat is the plain category-conditional prediction.
    Everything is computed without autograd; apply via apply_image_gradient.
    """
    with torch.no_grad():
        zb = schedule.add_noise(x.detach(), t, eps).float()
        z = zb.permute(2, 0, 1).unsqueeze(0) if zb.dim() == 3 else zb
        eps_c = _predict(mc, z, t, category, fc, schedule)
        if isinstance(mc, GaussianOracle) or config.guidance_scale == 1.0:
            eps_mc = eps_c
        else:
            eps_u = _predict(mc, z, t, None, None, schedule)
            eps_mc = eps_u + config.guidance_scale * (eps_c - eps_u)
        eps_cat = _predict(cat_model, z, t, category, None, schedule)
        w = omega(t, schedule).float()
        g = (w * (eps_mc - eps_cat).double()).float()
        x1 = schedule.one_step_estimate(z.double(), t, eps_c.double()).float()
        if zb.dim() == 3 and g.dim() == 4:
            g = g[0].permute(1, 2, 0)
            x1 = x1[0].permute(1, 2, 0)
    if return_parts:
        return g, {"eps_c": eps_c, "eps_mc": eps_mc, "eps_cat": eps_cat,
                   "z": z, "x_1step": x1}
    return g


def sds_gradient(x: torch.Tensor, fc: torch.Tensor | None, category, t, eps,
                 mc, schedule: NoiseSchedule, config: DistillationConfig,
                 return_parts: bool = False):
    """SDS baseline: the category prediction is replaced by the sampled noise."""
    out = csds_gradient(x, fc, category, t, eps, mc, _EchoNoise(eps), schedule,
                        config, return_parts=True)
    g, parts = out
    return (g, parts) if return_parts else g


class _EchoNoise:
    """Stands in for the category model; returns the sampled noise."""

    def __init__(self, eps):
        self.eps = eps

    def predict(self, z, t, category=None, fc=None):
        e = self.eps
        if e.dim() == 3 and z.dim() == 4:
            e = e.permute(2, 0, 1).unsqueeze(0)
        return e.float()


def apply_image_gradient(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    """Surrogate loss whose gradient w.r.t. x is exactly g."""
    return (g.detach().to(x.dtype) * x).sum()


class PerceptualFeatures(nn.Module):
    """Fixed randomly-initialized frozen conv stack (LPIPS stand-in)."""

    def __init__(self, seed: int = 777):
        super().__init__()
        torch.manual_seed(seed)
        self.c1 = nn.Conv2d(3, 8, 3, padding=1)
        self.c2 = nn.Conv2d(8, 16, 3, stride=2, padding=1)
        self.c3 = nn.Conv2d(16, 32, 3, stride=2, padding=1)
        for p in self.parameters():
            p.requires_grad_(False)

    def forward(self, img: torch.Tensor):
        """(H, W, 3) or (B, 3, H, W) -> list of three feature maps."""
        if img.dim() == 3:
            img = img.permute(2, 0, 1).unsqueeze(0)
        f1 = torch.relu(self.c1(img))
        f2 = torch.relu(self.c2(f1))
        f3 = torch.relu(self.c3(f2))
        return [f1, f2, f3]


_default_stack: PerceptualFeatures | None = None


def _stack() -> PerceptualFeatures:
    global _default_stack
    if _default_stack is None:
        _default_stack = PerceptualFeatures()
    return _default_stack


def lpips_surrogate(a: torch.Tensor, b: torch.Tensor,
                    stack: PerceptualFeatures | None = None) -> torch.Tensor:
    """Mean squared distance between multi-layer frozen features."""
    stack = stack or _stack()
    fa, fb = stack(a), stack(b)
    return sum(((x - y) ** 2).mean() for x, y in zip(fa, fb)) / len(fa)


def contextual_loss(a: torch.Tensor, b: torch.Tensor, bandwidth: float = 0.5,
                    stack: PerceptualFeatures | None = None,
                    layer: int = 1) -> torch.Tensor:
    """Contextual similarity between feature sets of two (possibly unaligned)
    images: cosine distances d_ij, normalized by each row's minimum, turned
    into affinities by a softmax over the first set, CX = -log mean_j max_i A_ij.
    """
    stack = stack or _stack()
    fa = stack(a)[layer][0].flatten(1).T      # (Na, C) features of image a
    fb = stack(b)[layer][0].flatten(1).T      # (Nb, C)
    fa = fa / fa.norm(dim=1, keepdim=True).clamp(min=1e-8)
    fb = fb / fb.norm(dim=1, keepdim=True).clamp(min=1e-8)
    d = 1.0 - fa @ fb.T                       # (Na, Nb), d_ij
    d_norm = d / (d.min(dim=1, keepdim=True).values + 1e-5)
    affinity = torch.softmax((1.0 - d_norm) / bandwidth, dim=0)
    return -torch.log(affinity.max(dim=0).values.mean().clamp(min=1e-12))


def perception_regularization(x_render: torch.Tensor, reference: torch.Tensor,
                              x_1step: torch.Tensor, config: DistillationConfig,
                              stack: PerceptualFeatures | None = None) -> torch.Tensor:
    """lambda_p * lpips(I, x_1step) + lambda_c * contextual(I, x_1step).

    I is the reference image by default; the 'render' switch compares against
    the current render instead (the prose reading of the ambiguity).
    """
    target = reference if config.perception_target == "reference" else x_render
    return (config.lambda_p * lpips_surrogate(target, x_1step, stack)
            + config.lambda_c * contextual_loss(target, x_1step, stack=stack))


def reference_loss(render_rgb: torch.Tensor, render_mask: torch.Tensor,
                   ref_rgb: torch.Tensor, ref_mask: torch.Tensor,
                   config: DistillationConfig) -> torch.Tensor:
    """lambda_r ||(I_hat - I) * M_hat||^2 + lambda_m ||M_hat - M||^2 (means)."""
    ref_rgb = ref_rgb.to(render_rgb.dtype)
    ref_mask = ref_mask.to(render_rgb.dtype)
    color = (((render_rgb - ref_rgb) * render_mask.unsqueeze(-1)) ** 2).mean()
    mask = ((render_mask - ref_mask) ** 2).mean()
    return config.lambda_r * color + config.lambda_m * mask


def compute_normals(field_obj, points: torch.Tensor, step: float = 1e-3,
                    box_radius: float = 1.5, active: int | None = None) -> torch.Tensor:
    """Normals as the normalized negative density gradient (central FD).

    points are world coordinates; the FD step is in world units.
    """
    offsets = torch.eye(3, dtype=points.dtype) * step
    grads = []
    for i in range(3):
        sp, _ = field_obj.query((points + offsets[i]) / box_radius, None, active)
        sm, _ = field_obj.query((points - offsets[i]) / box_radius, None, active)
        grads.append((sp - sm) / (2 * step))
    grad = torch.stack(grads, dim=-1)
    return -grad / grad.norm(dim=-1, keepdim=True).clamp(min=1e-8)


def geometry_regularizers(opacity: torch.Tensor, sample_weights: torch.Tensor,
                          normals: torch.Tensor, view_dirs: torch.Tensor,
                          config: DistillationConfig) -> torch.Tensor:
    """Orientation (foggy-surface penalty), opacity entropy, and sparsity.

    opacity: (R,) cumulative weights per ray; sample_weights/normals/view_dirs
    describe the high-weight samples selected for the orientation term.
    """
    w = opacity.clamp(1e-6, 1 - 1e-6)
    entropy = (-w * torch.log2(w) - (1 - w) * torch.log2(1 - w)).mean()
    sparsity = torch.sqrt(opacity ** 2 + 0.01).mean()
    if sample_weights.numel() > 0:
        facing = (normals * view_dirs).sum(dim=-1).clamp(min=0.0)
        orientation = (sample_weights * facing ** 2).mean()
    else:
        orientation = opacity.sum() * 0.0
    return (config.reg_orientation * orientation
            + config.reg_entropy * entropy
            + config.reg_sparsity * sparsity)


def _ray_sphere_span(origins: np.ndarray, dirs: np.ndarray, radius: float):
    """Entry/exit parameters of rays against the scene bounding sphere."""
    b = (origins * dirs).sum(-1)
    c = (origins * origins).sum(-1) - radius ** 2
    disc = b * b - c
    hit = disc > 0
    sq = np.sqrt(np.maximum(disc, 0.0))
    return np.maximum(-b - sq, 1e-3), np.maximum(-b + sq, 2e-3), hit


def render_camera(field_obj, camera, n_samples: int = 512,
                  occupancy: OccupancyGrid | None = None,
                  active: int | None = None, size: int = 32,
                  box_radius: float = 1.5, stratified: bool = False,
                  generator: torch.Generator | None = None):
    """Render a full image from a camera; rays missing the scene sphere are
    composited as pure background. Returns rgb (S,S,3), opacity (S,S),
    depth (S,S) camera-Z, plus flat per-ray tensors for the regularizers.
    """
    origins, dirs, cos_z = pixel_grid_rays(camera, size, size)
    near, far, hit = _ray_sphere_span(origins, dirs, box_radius * 1.02)
    dtype = next(field_obj.parameters()).dtype if isinstance(field_obj, nn.Module) \
        else torch.float32
    o = torch.tensor(origins, dtype=dtype)
    d = torch.tensor(dirs, dtype=dtype)
    hit_t = torch.from_numpy(hit)
    idx = hit_t.nonzero(as_tuple=True)[0]
    rgb = torch.ones(size * size, 3, dtype=dtype)
    opacity = torch.zeros(size * size, dtype=dtype)
    depth = torch.zeros(size * size, dtype=dtype)
    parts = None
    if len(idx) > 0:
        out = render_rays(
            field_obj, o[idx], d[idx],
            torch.tensor(near[hit], dtype=dtype), torch.tensor(far[hit], dtype=dtype),
            n_samples=n_samples, occupancy=occupancy, active_levels=active,
            stratified=stratified, generator=generator, box_radius=box_radius)
        rgb = rgb.index_put((idx,), out["rgb"])
        opacity = opacity.index_put((idx,), out["opacity"])
        zed = out["depth"] * torch.tensor(cos_z[hit], dtype=dtype)
        depth = depth.index_put((idx,), zed)
        parts = {"weights": out["weights"], "ts": out["ts"], "ray_idx": idx,
                 "origins": o[idx], "dirs": d[idx]}
    return {"rgb": rgb.reshape(size, size, 3), "opacity": opacity.reshape(size, size),
            "depth": depth.reshape(size, size), "parts": parts}


def make_camera_pool(dataset, config: DistillationConfig, seed: int):
    """Seeded orbit cameras for novel-view sampling during reconstruction."""
    rng = np.random.default_rng(seed)
    n = config.camera_pool
    lo, hi = config.pool_elevation
    cams = []
    for i in range(n):
        elev = float(rng.uniform(lo, hi))
        az = float(rng.uniform(0.0, 360.0))
        cams.extend(orbit_cameras(1, dataset.scale_s, elev, config.render_size,
                                  azimuth_offset_deg=az))
    return cams


def reconstruct(dataset, renderer, mc_denoiser, cat_denoiser, field_obj,
                schedule: NoiseSchedule, config: DistillationConfig,
                log_every: int = 0):
    """The 10k-step optimization loop. Returns (field, reports)."""
    size = config.render_size
    box_r = field_obj.box_radius
    refs = []
    for view in dataset.views:
        rgb, _, mask = downsample_view(view, size)
        refs.append((torch.tensor(rgb, dtype=torch.float32),
                     torch.tensor(mask, dtype=torch.float32),
                     view.pose))
    ref_centers = np.stack([p.center for _, _, p in refs])

    pool = make_camera_pool(dataset, config, config.seed + 99)
    pool_centers = np.stack([c.center for c in pool])
    nearest_ref = [int(np.argmax(pool_centers[i] @ ref_centers.T /
                                 (np.linalg.norm(pool_centers[i]) *
                                  np.linalg.norm(ref_centers, axis=1))))
                   for i in range(len(pool))]
    fc_cache: dict[int, torch.Tensor] = {}
    dist = float(np.linalg.norm(pool_centers[0]))
    z_range = (max(dist - box_r - 0.3, 0.1), dist + box_r + 0.3)
    category = torch.tensor([dataset.category_id], dtype=torch.long)
    stack = PerceptualFeatures()

    hash_params = list(field_obj.grid.parameters())
    hash_ids = {id(p) for p in hash_params}
    other = [p for p in field_obj.parameters() if id(p) not in hash_ids]
    opt = torch.optim.Adam([{"params": hash_params, "lr": config.lr_hash},
                            {"params": other, "lr": config.lr_mlp}])
    grid = OccupancyGrid()
    occupancy_update(grid, field_obj, 0, rng_seed=config.seed)

    t_lo = max(1, int(config.t_range[0] * schedule.T))
    t_hi = int(config.t_range[1] * schedule.T)
    reports: list[StepReport] = []

    for step in range(config.steps):
        g = torch.Generator().manual_seed((config.seed * 1000003 + step) & 0x7FFFFFFF)
        active = active_levels(step, config.steps, levels=field_obj.grid_cfg.levels)
        use_ref = bool(torch.rand((), generator=g) < config.reference_prob)
        losses = {}

        if use_ref:
            cam_i = int(torch.randint(0, len(refs), (), generator=g))
            ref_rgb, ref_mask, pose = refs[cam_i]
            out = render_camera(field_obj, pose, config.n_samples, grid, active,
                                size, box_r, stratified=True, generator=g)
            t_step = 0
            loss = reference_loss(out["rgb"], out["opacity"], ref_rgb, ref_mask, config)
            losses["ref"] = float(loss.detach())
        else:
            cam_i = int(torch.randint(0, len(pool), (), generator=g))
            cam = pool[cam_i]
            if cam_i not in fc_cache:
                with torch.no_grad():
                    fmap = renderer.render_feature_map(
                        dataset.views, cam, dataset.scale_s, depth_range=z_range,
                        size=size)
                fc_cache[cam_i] = fc_to_batch(fmap.features)
            fc = fc_cache[cam_i]
            out = render_camera(field_obj, cam, config.n_samples, grid, active,
                                size, box_r, stratified=True, generator=g)
            x = out["rgb"]
            t_step = int(torch.randint(t_lo, t_hi + 1, (), generator=g))
            eps = torch.randn(x.shape, generator=g)
            if config.distill_mode == "csds":
                grad, parts = csds_gradient(x, fc, category, t_step, eps, mc_denoiser,
                                            cat_denoiser, schedule, config,
                                            return_parts=True)
            else:
                grad, parts = sds_gradient(x, fc, category, t_step, eps, mc_denoiser,
                                           schedule, config, return_parts=True)
            loss = apply_image_gradient(x, grad)
            losses["distill"] = float(grad.norm().detach())
            perp = perception_regularization(x, refs[nearest_ref[cam_i]][0],
                                             parts["x_1step"], config, stack)
            loss = loss + perp
            losses["perp"] = float(perp.detach())

        parts_r = out["parts"]
        if parts_r is not None:
            w = parts_r["weights"]
            flat_w = w.reshape(-1)
            sel = (flat_w > 1e-2).nonzero(as_tuple=True)[0]
            if sel.numel() > 384:
                sub = torch.randperm(sel.numel(), generator=g)[:384]
                sel = sel[sub]
            if sel.numel() > 0:
                R, S = w.shape
                ray_of = sel // S
                ts_sel = parts_r["ts"].reshape(-1)[sel]
                pts = parts_r["origins"][ray_of] + ts_sel.unsqueeze(-1) * parts_r["dirs"][ray_of]
                normals = compute_normals(field_obj, pts, box_radius=box_r, active=active)
                reg = geometry_regularizers(out["opacity"].reshape(-1), flat_w[sel],
                                            normals, parts_r["dirs"][ray_of], config)
            else:
                reg = geometry_regularizers(out["opacity"].reshape(-1),
                                            torch.zeros(0), torch.zeros(0, 3),
                                            torch.zeros(0, 3), config)
            loss = loss + reg
            losses["regs"] = float(reg.detach())

        if not math.isfinite(float(loss.detach())):
            report = StepReport(step=step, kind="reference" if use_ref else "novel",
                                camera=cam_i, t=t_step, losses=losses, grad_norm=float("nan"))
            reports.append(report)
            raise DivergenceDetected(f"non-finite loss at step {step}: {losses}")

        if loss.requires_grad:
            loss.backward()
        gnorm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in field_obj.parameters()
                              if p.grad is not None))
        if not math.isfinite(gnorm):
            raise DivergenceDetected(f"non-finite gradient at step {step}")
        opt.step()
        opt.zero_grad()
        if (step + 1) % config.occupancy_every == 0:
            occupancy_update(grid, field_obj, step + 1, rng_seed=config.seed)
        reports.append(StepReport(step=step, kind="reference" if use_ref else "novel",
                                  camera=cam_i, t=t_step, losses=losses, grad_norm=gnorm))
        if log_every and (step + 1) % log_every == 0:
            print(f"[distill] step {step + 1}/{config.steps} {losses}", flush=True)
    return field_obj, reports
