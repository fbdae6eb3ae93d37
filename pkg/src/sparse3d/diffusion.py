"""Pixel-space diffusion at 32x32 with an epipolar control branch.

The base network is a small class-conditional U-Net standing in for a large
frozen text-to-image model; the 256-channel epipolar feature map enters
through a dimension-aligning convolution into a control branch that mirrors
the base encoder, fused back through zero-initialized connections so the
controlled model is bit-identical to the base at initialization.

Diffusion runs directly on [0, 1] pixel images (the latent encoder/decoder of
the full-scale system are identity maps here), so one-step estimates compare
directly against renders. All schedule arithmetic runs in float64 (the
buffers are float64 and torch promotes mixed inputs), so add_noise /
one_step_estimate invert each other to machine precision.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_module_state, read_blob, save_module
from .errors import BadTimestep, DatasetTooSmall
from .scenes import downsample_view

TARGET_SIZE = 32


class NoiseSchedule:
    """Discrete DDPM schedule: beta linear 1e-4 -> 0.02 over T=1000 steps."""

    def __init__(self, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                 betas: np.ndarray | None = None, validate: bool = True):
        if betas is None:
            betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
        self.T = len(betas)
        self.betas = torch.tensor(betas, dtype=torch.float64)
        self.alphas = 1.0 - self.betas
        self.alpha_bars = torch.cumprod(self.alphas, dim=0)
        if validate:
            if not bool((self.alpha_bars[1:] < self.alpha_bars[:-1]).all()):
                raise ValueError("alpha_bar must be strictly decreasing")
            if self.alpha_bars[0] < 0.99:
                raise ValueError("alpha_bar_1 must be close to 1")
            if self.alpha_bars[-1] > 0.01:
                raise ValueError("alpha_bar_T must be below 0.01")

    def _abar(self, t) -> torch.Tensor:
        t = torch.as_tensor(t)
        if bool((t < 1).any()) or bool((t > self.T).any()):
            raise BadTimestep(f"timestep outside [1, {self.T}]")
        return self.alpha_bars[t.long() - 1]

    def _shaped(self, t, like: torch.Tensor) -> torch.Tensor:
        a = self._abar(t)
        extra = like.dim() - a.dim()
        return a.reshape(a.shape + (1,) * extra) if extra > 0 else a

    def add_noise(self, x0: torch.Tensor, t, eps: torch.Tensor) -> torch.Tensor:
        """z_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps (float64)."""
        a = self._shaped(t, x0)
        return torch.sqrt(a) * x0 + torch.sqrt(1.0 - a) * eps

    def one_step_estimate(self, z_t: torch.Tensor, t, eps_hat: torch.Tensor) -> torch.Tensor:
        """Algebraic inversion: x = (z_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)."""
        a = self._shaped(t, z_t)
        return (z_t - torch.sqrt(1.0 - a) * eps_hat) / torch.sqrt(a)


@dataclass
class GaussianOracle:
    """Exact noise predictor for data ~ N(mu, sigma0^2 I), the test oracle.

    eps*(z_t, t) = sqrt(1-abar) (z_t - sqrt(abar) mu) / (abar sigma0^2 + 1 - abar),
    which equals -sqrt(1-abar) times the score of the noisy marginal.
    """

    mu: torch.Tensor
    sigma0: float

    def predict(self, z_t: torch.Tensor, t, schedule: NoiseSchedule,
                category=None, fc=None) -> torch.Tensor:
        a = schedule._shaped(t, z_t)
        denom = a * self.sigma0 ** 2 + 1.0 - a
        return torch.sqrt(1.0 - a) * (z_t - torch.sqrt(a) * self.mu) / denom


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard DDPM timestep embedding; t is (B,) float in [0, T]."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / (half - 1))
    ang = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


class ResBlock(nn.Module):
    def __init__(self, channels: int, emb_dim: int):
        super().__init__()
        groups = min(8, channels)
        self.norm1 = nn.GroupNorm(groups, channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, channels)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


@dataclass
class UNetConfig:
    base_channels: int = 32
    emb_dim: int = 64
    n_categories: int = 3
    seed: int = 0


class SmallUNet(nn.Module):
    """Compact class-conditional epsilon predictor over 32x32x3 images."""

    def __init__(self, cfg: UNetConfig | None = None):
        super().__init__()
        self.cfg = cfg or UNetConfig()
        torch.manual_seed(self.cfg.seed)
        c1 = self.cfg.base_channels
        c2, c3 = 2 * c1, 2 * c1
        e = self.cfg.emb_dim
        self.null_category = self.cfg.n_categories
        self.cat_embed = nn.Embedding(self.cfg.n_categories + 1, e)
        self.time_mlp = nn.Sequential(nn.Linear(e, e), nn.SiLU(), nn.Linear(e, e))
        self.conv_in = nn.Conv2d(3, c1, 3, padding=1)
        self.enc1 = ResBlock(c1, e)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c2, e)
        self.down2 = nn.Conv2d(c2, c3, 3, stride=2, padding=1)
        self.mid = ResBlock(c3, e)
        self.up2 = nn.ConvTranspose2d(c3, c2, 4, stride=2, padding=1)
        self.dec2 = nn.Conv2d(c2 + c2, c2, 3, padding=1)
        self.dec2_res = ResBlock(c2, e)
        self.up1 = nn.ConvTranspose2d(c2, c1, 4, stride=2, padding=1)
        self.dec1 = nn.Conv2d(c1 + c1, c1, 3, padding=1)
        self.dec1_res = ResBlock(c1, e)
        self.norm_out = nn.GroupNorm(8, c1)
        self.conv_out = nn.Conv2d(c1, 3, 3, padding=1)

    def embedding(self, t: torch.Tensor, category: torch.Tensor | None) -> torch.Tensor:
        emb = self.time_mlp(sinusoidal_embedding(t.float(), self.cfg.emb_dim))
        if category is None:
            category = torch.full((t.shape[0],), self.null_category, dtype=torch.long)
        return emb + self.cat_embed(category)

    def encode(self, z, emb):
        x = self.conv_in(z)
        h1 = self.enc1(x, emb)
        h2 = self.enc2(self.down1(h1), emb)
        m = self.mid(self.down2(h2), emb)
        return h1, h2, m

    def decode(self, h1, h2, m, emb):
        d = self.dec2(torch.cat([self.up2(m), h2], dim=1))
        d = self.dec2_res(d, emb)
        d = self.dec1(torch.cat([self.up1(d), h1], dim=1))
        d = self.dec1_res(d, emb)
        return self.conv_out(F.silu(self.norm_out(d)))

    def forward(self, z: torch.Tensor, t: torch.Tensor,
                category: torch.Tensor | None = None) -> torch.Tensor:
        emb = self.embedding(t, category)
        h1, h2, m = self.encode(z, emb)
        return self.decode(h1, h2, m, emb)


def _zero_conv(channels: int) -> nn.Conv2d:
    conv = nn.Conv2d(channels, channels, 1)
    nn.init.zeros_(conv.weight)
    nn.init.zeros_(conv.bias)
    return conv


class ControlBranch(nn.Module):
    """Mirror of the base encoder fed with the aligned feature map.

    Initialized with a copy of the base encoder weights; its per-resolution
    outputs enter the base skip connections through zero-initialized 1x1
    convolutions, so enabling the branch is an exact no-op at init.
    """

    def __init__(self, base: SmallUNet, fc_channels: int = 256):
        super().__init__()
        c1 = base.cfg.base_channels
        c2 = 2 * c1
        e = base.cfg.emb_dim
        self.align = nn.Conv2d(fc_channels, c1, 1)
        self.conv_in = nn.Conv2d(3, c1, 3, padding=1)
        self.enc1 = ResBlock(c1, e)
        self.down1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.enc2 = ResBlock(c2, e)
        self.down2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        self.mid = ResBlock(c2, e)
        self.zero1 = _zero_conv(c1)
        self.zero2 = _zero_conv(c2)
        self.zero_mid = _zero_conv(c2)
        # start from the frozen encoder's weights
        self.conv_in.load_state_dict(base.conv_in.state_dict())
        self.enc1.load_state_dict(base.enc1.state_dict())
        self.down1.load_state_dict(base.down1.state_dict())
        self.enc2.load_state_dict(base.enc2.state_dict())
        self.down2.load_state_dict(base.down2.state_dict())
        self.mid.load_state_dict(base.mid.state_dict())

    def forward(self, z, fc, emb):
        x = self.conv_in(z) + self.align(fc)
        c1 = self.enc1(x, emb)
        c2 = self.enc2(self.down1(c1), emb)
        cm = self.mid(self.down2(c2), emb)
        return self.zero1(c1), self.zero2(c2), self.zero_mid(cm)


class ConditionalDenoiser(nn.Module):
    """Frozen base + trainable control branch; the noise predictor e_beta."""

    def __init__(self, base: SmallUNet, fc_channels: int = 256):
        super().__init__()
        self.base = base
        self.control = ControlBranch(base, fc_channels)

    def predict(self, z: torch.Tensor, t: torch.Tensor,
                category: torch.Tensor | None = None,
                fc: torch.Tensor | None = None) -> torch.Tensor:
        """fc is (B, 256, H, W) or None (null conditioning: branch disabled)."""
        emb = self.base.embedding(t, category)
        h1, h2, m = self.base.encode(z, emb)
        if fc is not None:
            d1, d2, dm = self.control(z, fc.to(z.dtype), emb)
            h1, h2, m = h1 + d1, h2 + d2, m + dm
        return self.base.decode(h1, h2, m, emb)

    forward = predict

    def control_parameters(self):
        return self.control.parameters()


class CategoryDenoiser(nn.Module):
    """Base network only: the category-conditioned predictor e_sd."""

    def __init__(self, base: SmallUNet):
        super().__init__()
        self.base = base

    def predict(self, z, t, category=None, fc=None):
        return self.base(z, t, category)

    forward = predict


def cfg_predict(denoiser, z: torch.Tensor, t: torch.Tensor,
                category: torch.Tensor | None, fc: torch.Tensor | None,
                guidance_scale: float, schedule: NoiseSchedule | None = None) -> torch.Tensor:
    """Classifier-free guidance: eps_u + s (eps_c - eps_u).

    The unconditional branch replaces the category with the null embedding and
    drops the feature-map conditioning entirely.
    """
    if isinstance(denoiser, GaussianOracle):
        return denoiser.predict(z, t, schedule)
    eps_c = denoiser.predict(z, t, category, fc)
    if guidance_scale == 1.0:
        return eps_c
    eps_u = denoiser.predict(z, t, None, None)
    return eps_u + guidance_scale * (eps_c - eps_u)


def diffusion_loss(denoiser, x0: torch.Tensor, category, fc,
                   schedule: NoiseSchedule, t=None, eps: torch.Tensor | None = None,
                   generator: torch.Generator | None = None) -> torch.Tensor:
    """E || eps - e_beta(z_t, t, c, f_c) ||^2 with t uniform on [1, T]."""
    b = x0.shape[0]
    if t is None:
        t = torch.randint(1, schedule.T + 1, (b,), generator=generator)
    if eps is None:
        eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    z = schedule.add_noise(x0, t, eps).to(x0.dtype)
    pred = denoiser.predict(z, t, category, fc) if hasattr(denoiser, "predict") \
        else denoiser(z, t, category)
    return ((eps.to(pred.dtype) - pred) ** 2).mean()


def fc_to_batch(fmap_features: torch.Tensor) -> torch.Tensor:
    """(S, S, 256) feature map -> (1, 256, S, S) controller input."""
    return fmap_features.permute(2, 0, 1).unsqueeze(0).float()


def train_base(unet: SmallUNet, images: list, categories: list, schedule: NoiseSchedule,
               steps: int, seed: int = 0, lr: float = 2e-4, batch_size: int = 8,
               dropout_p: float = 0.1, log_every: int = 0):
    """Phase-0 pretraining of the frozen-to-be base on a pool of images.

    `images` are (32, 32, 3) arrays in [0, 1]; category conditioning is kept
    (with CFG dropout) so the base can serve as the category-prior predictor.
    """
    if len(images) < 2:
        raise DatasetTooSmall("need at least 2 pool images")
    data = torch.stack([torch.tensor(im, dtype=torch.float32)
                        for im in images]).permute(0, 3, 1, 2)
    cats = torch.tensor(categories, dtype=torch.long)
    opt = torch.optim.Adam(unet.parameters(), lr=lr)
    history = []
    for step in range(steps):
        g = torch.Generator().manual_seed((seed * 1000003 + step) & 0x7FFFFFFF)
        idx = torch.randint(0, len(images), (batch_size,), generator=g)
        x0 = data[idx]
        cat = cats[idx].clone()
        drop = torch.rand(batch_size, generator=g) < dropout_p
        cat[drop] = unet.null_category
        t = torch.randint(1, schedule.T + 1, (batch_size,), generator=g)
        eps = torch.randn(x0.shape, generator=g)
        z = schedule.add_noise(x0, t, eps).float()
        loss = ((eps - unet(z, t, cat)) ** 2).mean()
        loss.backward()
        opt.step()
        opt.zero_grad()
        history.append(loss.item())
        if log_every and (step + 1) % log_every == 0:
            print(f"[phase0] step {step + 1}/{steps} loss {np.mean(history[-log_every:]):.4f}",
                  flush=True)
    return history


def train_joint(datasets: list, renderer, denoiser: ConditionalDenoiser,
                schedule: NoiseSchedule, steps: int, seed: int = 0,
                lr: float = 3e-4, dropout_p: float = 0.1, heldout: int = 0,
                max_input_views: int = 2, log_every: int = 0,
                start_step: int = 0, stop_step: int | None = None,
                optimizer_state: dict | None = None,
                checkpoint_cb=None):
    """Joint optimization of the feature renderer and the control branch.

    Each step samples a scene, a target view from the training split, and
    1..max_input_views other views; renders the feature map; and descends
    feature_loss + diffusion_loss. The base network stays frozen (and is
    verified byte-identical by the tests).

    Per-step randomness is derived from (seed, step) only and the cosine
    learning-rate decay is closed-form, so resuming from (weights, optimizer
    state, start_step) reproduces an uninterrupted run bit-exactly.
    """
    from .epipolar import feature_loss

    if not datasets or any(len(d.views) - heldout < 2 for d in datasets):
        raise DatasetTooSmall("each dataset needs >= 2 training views")
    for p in denoiser.base.parameters():
        p.requires_grad_(False)
    params = list(renderer.parameters()) + list(denoiser.control_parameters())
    opt = torch.optim.Adam(params, lr=lr)
    if optimizer_state is not None:
        opt.load_state_dict(optimizer_state)

    def lr_at(step):
        return lr * 0.05 + 0.5 * (lr - lr * 0.05) * (1 + math.cos(math.pi * step / steps))

    targets = {}
    for si, ds in enumerate(datasets):
        for vi, view in enumerate(ds.views):
            rgb, depth, _ = downsample_view(view, TARGET_SIZE)
            targets[(si, vi)] = (
                torch.tensor(rgb, dtype=torch.float32),
                torch.tensor(depth, dtype=torch.float32),
            )

    stats = {"loss_feat": [], "loss_diff": [], "dropout_steps": 0, "steps": steps}
    for step in range(start_step, min(stop_step or steps, steps)):
        for group in opt.param_groups:
            group["lr"] = lr_at(step)
        g = torch.Generator().manual_seed((seed * 1000003 + step) & 0x7FFFFFFF)
        si = int(torch.randint(0, len(datasets), (), generator=g))
        ds = datasets[si]
        n_train = len(ds.views) - heldout
        tgt = int(torch.randint(0, n_train, (), generator=g))
        k = 1 + int(torch.randint(0, max_input_views, (), generator=g))
        cand = [i for i in range(n_train) if i != tgt]
        order = torch.randperm(len(cand), generator=g).tolist()
        views = [ds.views[cand[i]] for i in order[:k]]

        fmap = renderer.render_feature_map(views, ds.views[tgt].pose, ds.scale_s,
                                           stratified=True, rng_seed=int(torch.randint(2**31, (), generator=g)))
        gt_rgb, gt_depth = targets[(si, tgt)]
        l_feat = feature_loss(fmap, gt_rgb, gt_depth)

        x0 = gt_rgb.permute(2, 0, 1).unsqueeze(0)
        drop = bool(torch.rand((), generator=g) < dropout_p)
        if drop:
            stats["dropout_steps"] += 1
            cat, fc = None, None
        else:
            cat = torch.tensor([ds.category_id], dtype=torch.long)
            fc = fc_to_batch(fmap.features)
        t = torch.randint(1, schedule.T + 1, (1,), generator=g)
        eps = torch.randn(x0.shape, generator=g)
        z = schedule.add_noise(x0, t, eps).float()
        l_diff = ((eps - denoiser.predict(z, t, cat, fc)) ** 2).mean()

        (l_feat + l_diff).backward()
        opt.step()
        opt.zero_grad()
        stats["loss_feat"].append(float(l_feat.detach()))
        stats["loss_diff"].append(float(l_diff.detach()))
        if log_every and (step + 1) % log_every == 0:
            print(f"[joint] step {step + 1}/{steps} "
                  f"feat {np.mean(stats['loss_feat'][-log_every:]):.4f} "
                  f"diff {np.mean(stats['loss_diff'][-log_every:]):.4f}", flush=True)
        if checkpoint_cb is not None:
            checkpoint_cb(step, renderer, denoiser, opt)
    stats["optimizer_state"] = opt.state_dict()
    return stats


def evaluate_heldout(datasets: list, renderer, denoiser: ConditionalDenoiser,
                     schedule: NoiseSchedule, heldout: int, seed: int = 123,
                     probes_per_view: int = 8, input_views=(0, 4)):
    """Deterministic held-out diffusion loss and decoded-color PSNR."""
    from .meshmetrics import psnr

    losses, psnrs = [], []
    with torch.no_grad():
        for si, ds in enumerate(datasets):
            n = len(ds.views)
            views = [ds.views[i] for i in input_views]
            for vi in range(n - heldout, n):
                fmap = renderer.render_feature_map(views, ds.views[vi].pose, ds.scale_s)
                gt_rgb, _, _ = downsample_view(ds.views[vi], TARGET_SIZE)
                psnrs.append(psnr(fmap.i_f.clamp(0, 1).numpy(), gt_rgb))
                x0 = torch.tensor(gt_rgb, dtype=torch.float32).permute(2, 0, 1).unsqueeze(0)
                cat = torch.tensor([ds.category_id], dtype=torch.long)
                fc = fc_to_batch(fmap.features)
                for p in range(probes_per_view):
                    g = torch.Generator().manual_seed(seed * 7919 + si * 131 + vi * 17 + p)
                    t = torch.randint(1, schedule.T + 1, (1,), generator=g)
                    eps = torch.randn(x0.shape, generator=g)
                    z = schedule.add_noise(x0, t, eps).float()
                    losses.append(float(((eps - denoiser.predict(z, t, cat, fc)) ** 2).mean()))
    return {"l_diff": float(np.mean(losses)), "i_f_psnr": float(np.mean(psnrs))}


def save_denoiser(path: str, model) -> None:
    has_control = isinstance(model, ConditionalDenoiser)
    base = model.base if hasattr(model, "base") else model
    cfg = {"base_channels": base.cfg.base_channels, "emb_dim": base.cfg.emb_dim,
           "n_categories": base.cfg.n_categories, "seed": base.cfg.seed,
           "has_control": has_control}
    save_module(path, "denoiser", cfg, model)


def load_denoiser(path: str):
    _, cfg, _ = read_blob(path)
    base = SmallUNet(UNetConfig(base_channels=cfg["base_channels"], emb_dim=cfg["emb_dim"],
                                n_categories=cfg["n_categories"], seed=cfg["seed"]))
    model = ConditionalDenoiser(base) if cfg["has_control"] else CategoryDenoiser(base)
    load_module_state(path, "denoiser", model)
    return model
