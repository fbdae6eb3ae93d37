"""The radiance field being optimized.

Multiresolution hash encoding, a one-hidden-layer density/color MLP with an
additive Gaussian-sphere density bias, an occupancy grid for empty-space
skipping, and differentiable volume rendering. Gradients come from torch
autograd; `backward_render` wraps the backward call so a violated
forward/backward pairing surfaces as StaleTape.

Positions handed to the field live in the unit-normalized scene box [-1, 1]^3;
rendering converts world points by dividing by `box_radius`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_module_state, read_blob, save_module
from .errors import StaleTape
from .geometry import Ray

DEFAULT_BOX_RADIUS = 1.5
HASH_PRIMES = (1, 2654435761, 805459861)
_CORNERS = torch.tensor(
    [[i >> 2 & 1, i >> 1 & 1, i & 1] for i in range(8)], dtype=torch.long
)


@dataclass
class HashGridConfig:
    levels: int = 8
    base_resolution: int = 16
    growth_factor: float = 1.5
    table_size: int = 2 ** 15
    features_per_level: int = 2

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.growth_factor <= 1:
            raise ValueError("growth factor must be > 1")
        if self.table_size & (self.table_size - 1):
            raise ValueError("table size must be a power of two")

    @property
    def resolutions(self) -> list[int]:
        return [int(self.base_resolution * self.growth_factor ** l) for l in range(self.levels)]

    @property
    def feature_dim(self) -> int:
        return self.levels * self.features_per_level


class HashGrid(nn.Module):
    """Instant-NGP style multiresolution hash table with trilinear lookup.

    Collisions use the plain spatial hash (XOR of per-axis primes) with no
    resolution; levels beyond `active_levels` contribute zeros so the output
    dimensionality is fixed.
    """

    def __init__(self, cfg: HashGridConfig):
        super().__init__()
        self.cfg = cfg
        self.tables = nn.Parameter(
            torch.empty(cfg.levels * cfg.table_size, cfg.features_per_level).uniform_(-1e-4, 1e-4)
        )
        self.register_buffer("resolutions", torch.tensor(cfg.resolutions, dtype=torch.long))
        self.register_buffer("oob_count", torch.zeros((), dtype=torch.long))

    def corner_index(self, level: int, corner: torch.Tensor) -> torch.Tensor:
        """Hash of integer grid coordinates (..., 3) at one level."""
        h = corner[..., 0] * HASH_PRIMES[0]
        h = h ^ corner[..., 1] * HASH_PRIMES[1]
        h = h ^ corner[..., 2] * HASH_PRIMES[2]
        return level * self.cfg.table_size + (h & (self.cfg.table_size - 1))

    def encode(self, positions: torch.Tensor, active_levels: int | None = None) -> torch.Tensor:
        """(N, 3) normalized positions -> (N, levels * features_per_level)."""
        cfg = self.cfg
        if active_levels is None:
            active_levels = cfg.levels
        if not 1 <= active_levels <= cfg.levels:
            raise ValueError("active_levels out of range")
        if positions.abs().max() > 1.0 + 1e-6:
            self.oob_count += 1
            positions = positions.clamp(-1.0, 1.0)
        u = (positions + 1.0) * 0.5

        res = self.resolutions  # (L,)
        scaled = u.unsqueeze(0) * res[:, None, None].to(u.dtype)       # (L, N, 3)
        i0 = scaled.floor().long()
        i0 = torch.minimum(i0, (res - 1)[:, None, None]).clamp_(min=0)
        frac = scaled - i0.to(u.dtype)

        corners = i0.unsqueeze(2) + _CORNERS.to(i0.device)             # (L, N, 8, 3)
        h = corners[..., 0] * HASH_PRIMES[0]
        h = h ^ corners[..., 1] * HASH_PRIMES[1]
        h = h ^ corners[..., 2] * HASH_PRIMES[2]
        h = h & (cfg.table_size - 1)
        level_offset = (torch.arange(cfg.levels, device=h.device) * cfg.table_size)
        idx = h + level_offset[:, None, None]
        feats = F.embedding(idx.reshape(-1), self.tables).reshape(*idx.shape, cfg.features_per_level)

        c = _CORNERS.to(u.device).to(u.dtype)                          # (8, 3)
        w = (frac.unsqueeze(2) * c + (1 - frac.unsqueeze(2)) * (1 - c)).prod(dim=-1)  # (L, N, 8)
        out = (feats * w.unsqueeze(-1)).sum(dim=2)                     # (L, N, F)
        if active_levels < cfg.levels:
            mask = torch.zeros(cfg.levels, 1, 1, dtype=u.dtype, device=u.device)
            mask[:active_levels] = 1.0
            out = out * mask
        return out.permute(1, 0, 2).reshape(positions.shape[0], cfg.feature_dim)


def _direction_encoding(d: torch.Tensor) -> torch.Tensor:
    """Raw direction plus sin/cos at two frequencies (15 dims)."""
    parts = [d]
    for freq in (1.0, 2.0):
        parts += [torch.sin(freq * math.pi * d), torch.cos(freq * math.pi * d)]
    return torch.cat(parts, dim=-1)


DIR_ENC_DIM = 15


class RadianceField(nn.Module):
    """Hash-encoded density/color field with a Gaussian-sphere density bias.

    sigma = softplus(mlp_raw + a * exp(-|x|^2 / (2 w^2)) - o); the bias terms
    (a, w, o) are trainable parameters initialized to (10, 0.4, 2) so the
    fresh field is a centered blob.
    """

    def __init__(self, grid_cfg: HashGridConfig | None = None, hidden: int = 64,
                 box_radius: float = DEFAULT_BOX_RADIUS, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.grid_cfg = grid_cfg or HashGridConfig()
        self.hidden = hidden
        self.box_radius = box_radius
        self.seed = seed
        self.grid = HashGrid(self.grid_cfg)
        self.trunk = nn.Linear(self.grid_cfg.feature_dim, hidden)
        self.sigma_head = nn.Linear(hidden, 1)
        # raw-density floor: empty space starts below the occupancy threshold
        # (softplus(-3 - 2) ~ 6.7e-3) while the centered blob stays strong
        nn.init.constant_(self.sigma_head.bias, -3.0)
        self.color_head = nn.Linear(hidden + DIR_ENC_DIM, 3)
        self.bias_amplitude = nn.Parameter(torch.tensor(10.0))
        self.bias_width = nn.Parameter(torch.tensor(0.4))
        self.bias_offset = nn.Parameter(torch.tensor(2.0))

    def config(self) -> dict:
        g = self.grid_cfg
        return {
            "levels": g.levels, "base_resolution": g.base_resolution,
            "growth_factor": g.growth_factor, "table_size": g.table_size,
            "features_per_level": g.features_per_level,
            "hidden": self.hidden, "box_radius": self.box_radius, "seed": self.seed,
        }

    def sphere_bias(self, positions: torch.Tensor) -> torch.Tensor:
        r2 = positions.square().sum(dim=-1)
        return self.bias_amplitude * torch.exp(-r2 / (2 * self.bias_width ** 2)) - self.bias_offset

    def query(self, positions: torch.Tensor, directions: torch.Tensor | None = None,
              active_levels: int | None = None):
        """Normalized positions (N, 3) -> (sigma (N,), rgb (N, 3))."""
        enc = self.grid.encode(positions, active_levels)
        h = torch.relu(self.trunk(enc))
        raw = self.sigma_head(h).squeeze(-1)
        sigma = F.softplus(raw + self.sphere_bias(positions))
        if directions is None:
            directions = torch.zeros_like(positions)
        rgb = torch.sigmoid(self.color_head(torch.cat([h, _direction_encoding(directions)], dim=-1)))
        return sigma, rgb


@dataclass
class RenderOutput:
    rgb: torch.Tensor      # (3,)
    opacity: torch.Tensor  # scalar, sum of weights
    depth: torch.Tensor    # scalar, expected ray parameter (0 when opacity 0)
    weights: torch.Tensor  # (S,)


def composite(sigma: torch.Tensor, delta: torch.Tensor):
    """Standard compositing: alpha_i = 1 - exp(-sigma_i delta_i),
    T_i = prod_{j<i} (1 - alpha_j), w_i = T_i alpha_i.

    Returns (weights, opacity) with opacity = sum(w) exactly.
    """
    alpha = 1.0 - torch.exp(-sigma * delta)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[..., :1]), 1.0 - alpha[..., :-1]], dim=-1), dim=-1
    )
    weights = trans * alpha
    return weights, weights.sum(dim=-1)


class OccupancyGrid(nn.Module):
    """EMA density grid over the scene box; bit == (ema > threshold)."""

    def __init__(self, resolution: int = 64, decay: float = 0.95, threshold: float = 0.01):
        super().__init__()
        self.resolution = resolution
        self.decay = decay
        self.threshold = threshold
        self.register_buffer("ema", torch.zeros(resolution ** 3))
        self.register_buffer("bits", torch.zeros(resolution ** 3, dtype=torch.bool))

    def cell_index(self, positions: torch.Tensor) -> torch.Tensor:
        """Normalized positions (N, 3) in [-1, 1] -> flat cell indices."""
        r = self.resolution
        ijk = (((positions + 1.0) * 0.5) * r).long().clamp_(0, r - 1)
        return (ijk[..., 0] * r + ijk[..., 1]) * r + ijk[..., 2]

    def query(self, positions: torch.Tensor) -> torch.Tensor:
        return self.bits[self.cell_index(positions)]


@torch.no_grad()
def occupancy_update(grid: OccupancyGrid, field: RadianceField, step: int,
                     rng_seed: int = 0, chunk: int = 65536) -> OccupancyGrid:
    """EMA-max update of every cell from one jittered density sample."""
    r = grid.resolution
    dev = grid.ema.device
    g = torch.Generator().manual_seed((rng_seed * 1000003 + step) & 0x7FFFFFFF)
    idx = torch.arange(r ** 3, device=dev)
    ijk = torch.stack([idx // (r * r), (idx // r) % r, idx % r], dim=-1).float()
    jitter = torch.rand(r ** 3, 3, generator=g).to(dev)
    pts = ((ijk + jitter) / r) * 2.0 - 1.0
    if isinstance(field, nn.Module):
        pts = pts.to(next(field.parameters()).dtype)
    sigmas = []
    for i in range(0, pts.shape[0], chunk):
        s, _ = field.query(pts[i:i + chunk])
        sigmas.append(s.float())
    sigma = torch.cat(sigmas)
    grid.ema.copy_(torch.maximum(grid.decay * grid.ema, sigma))
    grid.bits.copy_(grid.ema > grid.threshold)
    return grid


def active_levels(step: int, total_steps: int, start: int = 4, levels: int = 8) -> int:
    """Progressive coarse-to-fine: start at 4 levels, +1 every total/8 steps."""
    if not 0 <= step <= total_steps:
        raise ValueError("step outside [0, total_steps]")
    return min(levels, start + (step * 8) // max(total_steps, 1))


def render_rays(field, origins: torch.Tensor, dirs: torch.Tensor,
                near: torch.Tensor, far: torch.Tensor, n_samples: int = 512,
                occupancy: OccupancyGrid | None = None,
                active_levels: int | None = None, stratified: bool = False,
                generator: torch.Generator | None = None,
                box_radius: float = DEFAULT_BOX_RADIUS, white_background: bool = True):
    """Differentiable volume rendering of a batch of world-space rays.

    Returns a dict with rgb (R, 3), opacity (R,), depth (R,), weights (R, S)
    and the sample parameters ts (R, S). Cells with occupancy bit 0 are
    skipped (their density is exactly zero, which leaves the compositing
    identities intact).
    """
    R = origins.shape[0]
    dtype = origins.dtype
    edges = torch.linspace(0.0, 1.0, n_samples + 1, dtype=dtype, device=origins.device)
    span = (far - near).unsqueeze(-1)
    if stratified:
        jit = torch.rand(R, n_samples, generator=generator).to(dtype)
        ts = near.unsqueeze(-1) + (edges[:-1] + jit / n_samples) * span
    else:
        mids = 0.5 * (edges[:-1] + edges[1:])
        ts = near.unsqueeze(-1) + mids * span
    delta = span / n_samples

    pts = origins.unsqueeze(1) + ts.unsqueeze(-1) * dirs.unsqueeze(1)   # (R, S, 3)
    pn = (pts / box_radius).reshape(-1, 3)
    sigma = torch.zeros(R * n_samples, dtype=dtype, device=origins.device)
    rgb = torch.zeros(R * n_samples, 3, dtype=dtype, device=origins.device)
    if occupancy is not None:
        live = occupancy.query(pn)
    else:
        live = torch.ones(R * n_samples, dtype=torch.bool, device=origins.device)
    if bool(live.all()):
        d_exp = dirs.unsqueeze(1).expand(-1, n_samples, -1).reshape(-1, 3)
        sigma, rgb = field.query(pn, d_exp, active_levels)
    elif bool(live.any()):
        d_exp = dirs.unsqueeze(1).expand(-1, n_samples, -1).reshape(-1, 3)
        s_live, c_live = field.query(pn[live], d_exp[live], active_levels)
        idx = live.nonzero(as_tuple=True)[0]
        sigma = sigma.index_put((idx,), s_live)
        rgb = rgb.index_put((idx,), c_live)
    sigma = sigma.reshape(R, n_samples)
    rgb = rgb.reshape(R, n_samples, 3)

    weights, opacity = composite(sigma, delta)
    color = (weights.unsqueeze(-1) * rgb).sum(dim=1)
    if white_background:
        color = color + (1.0 - opacity).unsqueeze(-1)
    safe = opacity.detach() > 1e-10
    depth = torch.where(
        safe, (weights * ts).sum(dim=-1) / opacity.clamp(min=1e-10), torch.zeros_like(opacity)
    )
    return {"rgb": color, "opacity": opacity, "depth": depth, "weights": weights, "ts": ts}


def volume_render(field, ray: Ray, sample_count: int = 512,
                  occupancy: OccupancyGrid | None = None,
                  active_levels: int | None = None,
                  box_radius: float = DEFAULT_BOX_RADIUS) -> RenderOutput:
    """Render a single geometry.Ray; see render_rays for the batched form."""
    dtype = next(field.parameters()).dtype if isinstance(field, nn.Module) else torch.float32
    o = torch.as_tensor(ray.origin, dtype=dtype).unsqueeze(0)
    d = torch.as_tensor(ray.direction, dtype=dtype).unsqueeze(0)
    out = render_rays(
        field, o, d,
        torch.tensor([ray.near], dtype=dtype), torch.tensor([ray.far], dtype=dtype),
        n_samples=sample_count, occupancy=occupancy, active_levels=active_levels,
        box_radius=box_radius,
    )
    return RenderOutput(rgb=out["rgb"][0], opacity=out["opacity"][0],
                        depth=out["depth"][0], weights=out["weights"][0])


def backward_render(outputs, grads) -> None:
    """Reverse-mode gradients of rendered outputs into field parameters.

    `outputs` and `grads` are matching lists of tensors. Raises StaleTape when
    the recorded forward graph has already been consumed (or never existed).
    """
    try:
        torch.autograd.backward(list(outputs), list(grads))
    except RuntimeError as e:
        raise StaleTape(str(e)) from e


def save_field(path: str, field: RadianceField) -> None:
    save_module(path, "field", field.config(), field)


def load_field(path: str) -> RadianceField:
    _, config, _ = read_blob(path)
    cfg = HashGridConfig(
        levels=config["levels"], base_resolution=config["base_resolution"],
        growth_factor=config["growth_factor"], table_size=config["table_size"],
        features_per_level=config["features_per_level"],
    )
    field = RadianceField(cfg, hidden=config["hidden"],
                          box_radius=config["box_radius"], seed=config["seed"])
    load_module_state(path, "field", field)
    return field
