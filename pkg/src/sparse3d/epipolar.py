"""Feature renderer: epipolar tokens aggregated by three attention stages.

For each query pixel, M depth samples along its ray are projected into every
input view. Each (view k, sample m) token concatenates the projected image
feature, a sinusoidal depth embedding, the Plücker coordinates of the query
ray in view k's camera frame, a learned inside/outside mask embedding, and a
learned relative-pose embedding. Stage 1 attends across views per sample,
stage 2 along the epipolar samples per view (producing weights alpha), stage 3
across views (producing weights beta). The pixel feature is

    f_c = sum_k beta_k sum_m alpha_k^m f_k^m

over the stage-1 output tokens lifted to 256 dims by an affine head. Because
the weights sum to one, the lift commutes with the weighted sums, so the
implementation aggregates in transformer width first and lifts once per pixel.

Aggregated color/depth reuse the same weights over projected token colors and
sample depths. Invalid tokens (behind a camera or off-image) are excluded from
every softmax.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .checkpoint import load_module_state, read_blob, save_module
from .errors import AllTokensInvalid
from .geometry import CameraPose, Ray, pixel_grid_rays, plucker, relative_transform, sample_ray_depths

NEG_INF = -1e9
FC_DIM = 256          # feature map channel count, fixed by the controller contract
FEATURE_MAP_SIZE = 32


@dataclass
class FeatureRendererConfig:
    """Desk-scale defaults sized for CPU training budgets; the full-scale
    system uses token_dim=256, stage_layers=(4, 4, 4), heads=4, ff_dim=512."""

    token_dim: int = 32           # transformer width
    stage_layers: tuple = (1, 2, 1)          # layers in stages 1..3
    heads: int = 2
    ff_dim: int = 64
    n_samples: int = 20           # M, epipolar samples per ray
    depth_freqs: int = 8
    mask_embed_dim: int = 8
    relpose_embed_dim: int = 16
    backbone_channels: tuple = (16, 32, 64, 64)
    seed: int = 0


    @property
    def backbone_dim(self) -> int:
        return sum(self.backbone_channels)

    @property
    def token_in_dim(self) -> int:
        return self.backbone_dim + 2 * self.depth_freqs + 6 + self.mask_embed_dim \
            + self.relpose_embed_dim


class ConvBackbone(nn.Module):
    """4-stage conv pyramid; all stages bilinearly upsampled and concatenated."""

    def __init__(self, channels=(16, 32, 64, 64)):
        super().__init__()
        convs = []
        c_in = 3
        for i, c in enumerate(channels):
            convs.append(nn.Conv2d(c_in, c, 3, stride=1 if i == 0 else 2, padding=1))
            c_in = c
        self.convs = nn.ModuleList(convs)

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 3, H, W) in [0,1] -> (B, sum(channels), H, W)."""
        h, w = images.shape[-2:]
        x = images
        feats = []
        for conv in self.convs:
            x = F.relu(conv(x))
            feats.append(x)
        up = [f if f.shape[-2:] == (h, w)
              else F.interpolate(f, size=(h, w), mode="bilinear", align_corners=False)
              for f in feats]
        return torch.cat(up, dim=1)


class EncoderLayer(nn.Module):
    """Pre-norm transformer encoder layer with additive key masking."""

    def __init__(self, dim: int, heads: int, ff_dim: int):
        super().__init__()
        self.dim, self.heads = dim, heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)
        self.ff1 = nn.Linear(dim, ff_dim)
        self.ff2 = nn.Linear(ff_dim, dim)
        self.norm1 = nn.LayerNorm(dim)
        self.norm2 = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor, key_valid: torch.Tensor | None = None) -> torch.Tensor:
        B, L, d = x.shape
        hd = d // self.heads
        qkv = self.qkv(self.norm1(x)).reshape(B, L, 3, self.heads, hd)
        if L <= 4:
            # tiny sequences: elementwise scores beat huge batches of 2x2 bmms
            q, k, v = qkv.unbind(2)                              # (B, L, h, hd)
            scores = (q.unsqueeze(2) * k.unsqueeze(1)).sum(-1) / hd ** 0.5  # (B, L, L, h)
            if key_valid is not None:
                scores = scores + torch.where(key_valid, 0.0, NEG_INF)[:, None, :, None]
            attn = torch.softmax(scores, dim=2)
            ctx = (attn.unsqueeze(-1) * v.unsqueeze(1)).sum(2).reshape(B, L, d)
        else:
            q, k, v = qkv.permute(2, 0, 3, 1, 4).unbind(0)       # (B, h, L, hd)
            scores = q @ k.transpose(-2, -1) / hd ** 0.5
            if key_valid is not None:
                scores = scores + torch.where(key_valid, 0.0, NEG_INF)[:, None, None, :]
            attn = torch.softmax(scores, dim=-1)
            ctx = (attn @ v).transpose(1, 2).reshape(B, L, d)
        x = x + self.out(ctx)
        x = x + self.ff2(F.relu(self.ff1(self.norm2(x))))
        return x


def _bilinear_gather(table: torch.Tensor, gu: torch.Tensor, gv: torch.Tensor,
                     h: int, w: int) -> torch.Tensor:
    """Bilinear lookup on (K, H*W, C) tables at grid coords (K, N).

    Pixel centers sit at integer coordinates (align-corners convention).
    Gather-based so the backward pass is a cheap index_add.
    """
    K, _, C = table.shape
    x0 = gu.floor().clamp(0, w - 2)
    y0 = gv.floor().clamp(0, h - 2)
    fx = (gu - x0).unsqueeze(-1)
    fy = (gv - y0).unsqueeze(-1)
    x0 = x0.long()
    y0 = y0.long()
    base = (torch.arange(K, device=gu.device) * (h * w)).unsqueeze(-1)
    i00 = base + y0 * w + x0
    flat = table.reshape(K * h * w, C)

    def g(i):
        return F.embedding(i.reshape(-1), flat).reshape(K, -1, C)

    top = g(i00) * (1 - fx) + g(i00 + 1) * fx
    bot = g(i00 + w) * (1 - fx) + g(i00 + w + 1) * fx
    return top * (1 - fy) + bot * fy


def masked_softmax(logits: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
    """Softmax over the last dim restricted to valid entries (rows may be empty)."""
    z = torch.softmax(logits + torch.where(valid, 0.0, NEG_INF), dim=-1)
    z = z * valid.to(z.dtype)
    denom = z.sum(dim=-1, keepdim=True)
    return torch.where(denom > 0, z / denom.clamp(min=1e-30), torch.zeros_like(z))


@dataclass
class TokenGrid:
    """Materialized epipolar tokens for a single query ray."""

    features: torch.Tensor   # (K, M, token_in_dim) raw concatenated embeddings
    colors: torch.Tensor     # (K, M, 3) projected input-image rgb
    depths: torch.Tensor     # (M,) sample depths from the rendering viewpoint
    valid: torch.Tensor      # (K, M) bool


@dataclass
class EpipolarFeatureMap:
    features: torch.Tensor   # (S, S, 256) f_c
    alpha: torch.Tensor      # (S, S, K, M)
    beta: torch.Tensor       # (S, S, K)
    i_agg: torch.Tensor      # (S, S, 3)
    d_agg: torch.Tensor      # (S, S)
    i_f: torch.Tensor        # (S, S, 3)
    valid: torch.Tensor      # (S, S) bool
    depth_range: tuple = (0.0, 0.0)


class FeatureRenderer(nn.Module):
    def __init__(self, cfg: FeatureRendererConfig | None = None):
        super().__init__()
        self.cfg = cfg or FeatureRendererConfig()
        torch.manual_seed(self.cfg.seed)
        c = self.cfg
        self.backbone = ConvBackbone(c.backbone_channels)
        self.mask_embed = nn.Embedding(2, c.mask_embed_dim)
        self.relpose_proj = nn.Linear(12, c.relpose_embed_dim)
        self.token_embed = nn.Linear(c.token_in_dim, c.token_dim)
        n1, n2, n3 = c.stage_layers
        self.stage1 = nn.ModuleList(
            [EncoderLayer(c.token_dim, c.heads, c.ff_dim) for _ in range(n1)])
        self.stage2 = nn.ModuleList(
            [EncoderLayer(c.token_dim, c.heads, c.ff_dim) for _ in range(n2)])
        self.stage3 = nn.ModuleList(
            [EncoderLayer(c.token_dim, c.heads, c.ff_dim) for _ in range(n3)])
        self.alpha_head = nn.Linear(c.token_dim, 1)
        self.beta_head = nn.Linear(c.token_dim, 1)
        self.lift = nn.Linear(c.token_dim, FC_DIM)   # stage-1 tokens -> 256-d
        self.decode_head = nn.Linear(FC_DIM, 3)      # f_c -> I_f

    # ---------------------------------------------------------------- features
    def extract_features(self, images: torch.Tensor) -> torch.Tensor:
        """(B, H, W, 3) or (B, 3, H, W) in [0,1] -> (B, C, H, W) feature maps."""
        if images.dim() == 3:
            images = images.unsqueeze(0)
        if images.shape[-1] == 3:
            images = images.permute(0, 3, 1, 2)
        return self.backbone(images.to(self.lift.weight.dtype))

    # ------------------------------------------------------------------ tokens
    def _token_parts(self, query_pose: CameraPose, origins, dirs, cos_z, depths_z,
                     poses, images, masks, feature_maps, scene_scale):
        """Project samples into the views and gather every token ingredient.

        origins/dirs: (P, 3) float64 numpy (shared origin); depths_z: (P, M)
        camera-Z samples. Returns a dict of pieces consumed by _embed_tokens
        (broadcast-friendly fast path) or _materialize_tokens (explicit
        concatenated tokens).
        """
        c = self.cfg
        P, M = depths_z.shape
        K = len(poses)
        N = P * M
        dtype = self.lift.weight.dtype
        t_param = depths_z / cos_z[:, None]                      # ray parameter
        pts = origins[:, None, :] + t_param[..., None] * dirs[:, None, :]
        flat = pts.reshape(-1, 3)
        H, W = masks[0].shape

        rot = np.stack([p.rotation for p in poses])              # (K, 3, 3)
        trans = np.stack([p.translation for p in poses])         # (K, 3)
        intr = np.array([[p.fx, p.fy, p.cx, p.cy, p.width, p.height] for p in poses])
        cam = np.einsum("kij,nj->kni", rot, flat) + trans[:, None, :]
        z = cam[..., 2]
        ok = z > 1e-9
        zs = np.where(ok, z, 1.0)
        u = intr[:, 2, None] + intr[:, 0, None] * cam[..., 0] / zs
        v = intr[:, 3, None] + intr[:, 1, None] * cam[..., 1] / zs
        # grid coords with pixel centers at integers
        gu = (u - 0.5) * (W / intr[:, 4, None])
        gv = (v - 0.5) * (H / intr[:, 5, None])
        ok &= (gu >= 0) & (gu <= W - 1) & (gv >= 0) & (gv <= H - 1)
        gu_t = torch.tensor(np.where(ok, gu, 0.0), dtype=dtype)
        gv_t = torch.tensor(np.where(ok, gv, 0.0), dtype=dtype)

        with torch.no_grad():
            aux = torch.cat([images.to(dtype), masks.to(dtype).unsqueeze(1)], dim=1)
            aux = _bilinear_gather(aux.permute(0, 2, 3, 1).reshape(K, H * W, 4),
                                   gu_t, gv_t, H, W)
        colors = aux[..., :3]
        mask_idx = (aux[..., 3] > 0.5).long()                    # bilinear + threshold

        # query ray expressed in each view's camera frame
        d_k = np.einsum("kij,pj->kpi", rot, dirs)                # (K, P, 3)
        o_k = rot @ origins[0] + trans                           # (K, 3) shared origin
        m_k = np.cross(np.broadcast_to(o_k[:, None, :], d_k.shape), d_k)
        plk = torch.tensor(np.concatenate([d_k, m_k], axis=-1), dtype=dtype)  # (K, P, 6)

        rel = np.stack([relative_transform(query_pose, p)[:3, :4].reshape(-1) for p in poses])
        rel_t = torch.tensor(rel, dtype=dtype)                   # (K, 12)

        z_norm = torch.tensor(depths_z / scene_scale, dtype=dtype).reshape(N, 1)
        freqs = (2.0 ** torch.arange(c.depth_freqs, dtype=dtype)) * torch.pi
        d_embed = torch.cat([torch.sin(z_norm * freqs), torch.cos(z_norm * freqs)], dim=-1)

        return {
            "feature_maps": feature_maps.to(dtype), "gu": gu_t, "gv": gv_t,
            "hw": (H, W), "colors": colors, "mask_idx": mask_idx,
            "valid": torch.from_numpy(ok), "plucker": plk, "relpose": rel_t,
            "d_embed": d_embed, "P": P, "M": M, "K": K,
        }

    def _embed_tokens(self, pieces) -> torch.Tensor:
        """Token embedding without materializing the concatenated vectors.

        Linear(cat(parts)) decomposes into per-part matmuls against slices of
        the weight. Because bilinear gathering is linear, the image-feature
        slice is applied to the whole feature map first and the gather runs in
        token width; per-view and per-ray parts are computed once and
        broadcast. Returns (P, M, K, token_dim).
        """
        c = self.cfg
        P, M, K = pieces["P"], pieces["M"], pieces["K"]
        H, W = pieces["hw"]
        Wt = self.token_embed.weight
        o = [0, c.backbone_dim, 2 * c.depth_freqs, 6, c.mask_embed_dim, c.relpose_embed_dim]
        offs = np.cumsum(o)
        w_feat, w_depth, w_plk, w_mask, w_rel = (
            Wt[:, offs[i]:offs[i + 1]] for i in range(5))

        table = pieces["feature_maps"].permute(0, 2, 3, 1).reshape(K, H * W, -1) @ w_feat.T
        emb = _bilinear_gather(table, pieces["gu"], pieces["gv"], H, W)      # (K, N, w)
        emb = emb + (pieces["d_embed"] @ w_depth.T).unsqueeze(0)             # (1, N, w)
        plk = (pieces["plucker"] @ w_plk.T).unsqueeze(2)                     # (K, P, 1, w)
        emb = emb.reshape(K, P, M, -1) + plk
        mask_rows = self.mask_embed.weight @ w_mask.T                        # (2, w)
        emb = emb + F.embedding(pieces["mask_idx"], mask_rows).reshape(K, P, M, -1)
        rel = (self.relpose_proj(pieces["relpose"]) @ w_rel.T)               # (K, w)
        emb = emb + rel[:, None, None, :] + self.token_embed.bias
        return emb.permute(1, 2, 0, 3)                                       # (P, M, K, w)

    def _materialize_tokens(self, pieces):
        """Explicit concatenated token features (P, M, K, token_in_dim)."""
        P, M, K = pieces["P"], pieces["M"], pieces["K"]
        H, W = pieces["hw"]
        N = P * M
        feats = _bilinear_gather(
            pieces["feature_maps"].permute(0, 2, 3, 1).reshape(K, H * W, -1),
            pieces["gu"], pieces["gv"], H, W)
        parts = [
            feats,
            pieces["d_embed"].unsqueeze(0).expand(K, N, -1),
            pieces["plucker"].unsqueeze(2).expand(K, P, M, 6).reshape(K, N, 6),
            self.mask_embed(pieces["mask_idx"]),
            self.relpose_proj(pieces["relpose"]).unsqueeze(1).expand(K, N, -1),
        ]
        tokens = torch.cat(parts, dim=-1)
        return (tokens.permute(1, 0, 2).reshape(P, M, K, -1),
                pieces["colors"].permute(1, 0, 2).reshape(P, M, K, 3),
                pieces["valid"].permute(1, 0).reshape(P, M, K))

    def build_tokens(self, query_ray: Ray, views, feature_maps,
                     query_pose: CameraPose, scene_scale: float,
                     stratified: bool = False, rng_seed: int = 0) -> TokenGrid:
        """Tokens for a single query ray; raises AllTokensInvalid when no
        sample projects into any view."""
        depths = sample_ray_depths(query_ray.near, query_ray.far, self.cfg.n_samples,
                                   stratified=stratified, rng_seed=rng_seed)
        d_cam = query_pose.rotation @ query_ray.direction
        cos_z = np.array([max(d_cam[2], 1e-9)])
        pieces = self._token_parts(
            query_pose,
            query_ray.origin[None, :], query_ray.direction[None, :], cos_z,
            depths[None, :],
            [v.pose for v in views],
            self._images_tensor(views), self._masks_tensor(views), feature_maps,
            scene_scale,
        )
        tokens, colors, valid = self._materialize_tokens(pieces)
        if not bool(valid.any()):
            raise AllTokensInvalid("no epipolar sample projects into any input view")
        # per-ray layout is (K, M, .)
        return TokenGrid(features=tokens[0].permute(1, 0, 2),
                         colors=colors[0].permute(1, 0, 2),
                         depths=torch.tensor(depths, dtype=tokens.dtype),
                         valid=valid[0].permute(1, 0))

    @staticmethod
    def _images_tensor(views):
        return torch.stack([torch.tensor(v.rgb, dtype=torch.float32).permute(2, 0, 1)
                            for v in views])

    @staticmethod
    def _masks_tensor(views):
        return torch.stack([torch.tensor(v.mask, dtype=torch.float32) for v in views])

    # --------------------------------------------------------------- attention
    def _stages(self, embedded: torch.Tensor, valid: torch.Tensor):
        """embedded tokens (P, M, K, w), valid (P, M, K) ->
        (f1 (P, M, K, w), alpha (P, K, M), beta (P, K))."""
        P, M, K, _ = embedded.shape
        x = embedded.reshape(P * M, K, -1)
        kv = valid.reshape(P * M, K)
        for layer in self.stage1:
            x = layer(x, kv)
        f1 = x.reshape(P, M, K, -1)

        y = f1.permute(0, 2, 1, 3).reshape(P * K, M, -1)
        vv = valid.permute(0, 2, 1).reshape(P * K, M)
        for layer in self.stage2:
            y = layer(y, vv)
        alpha = masked_softmax(self.alpha_head(y).squeeze(-1), vv).reshape(P, K, M)

        g = (alpha.reshape(P * K, M, 1) * f1.permute(0, 2, 1, 3).reshape(P * K, M, -1)) \
            .sum(dim=1).reshape(P, K, -1)
        view_valid = valid.any(dim=1)                                    # (P, K)
        z = g
        for layer in self.stage3:
            z = layer(z, view_valid)
        beta = masked_softmax(self.beta_head(z).squeeze(-1), view_valid)  # (P, K)
        return f1, alpha, beta

    def aggregate(self, tokens: TokenGrid):
        """Single-ray aggregation: returns (f_c (256,), alpha (K, M), beta (K,))."""
        if not bool(tokens.valid.any()):
            raise AllTokensInvalid("token grid has no valid token")
        t = tokens.features.permute(1, 0, 2).unsqueeze(0)    # (1, M, K, D)
        v = tokens.valid.permute(1, 0).unsqueeze(0)          # (1, M, K)
        f1, alpha, beta = self._stages(self.token_embed(t), v)
        g = (alpha.unsqueeze(-1) * f1.permute(0, 2, 1, 3)).sum(dim=2)    # (1, K, w)
        fc = self.lift((beta.unsqueeze(-1) * g).sum(dim=1))              # (1, 256)
        return fc[0], alpha[0], beta[0]

    def token_features_lifted(self, tokens: TokenGrid) -> torch.Tensor:
        """Stage-one token features in 256 dims, (K, M, 256); the convex-hull
        reference frame for f_c (used by the aggregation oracles)."""
        t = tokens.features.permute(1, 0, 2).unsqueeze(0)
        v = tokens.valid.permute(1, 0).unsqueeze(0)
        x = self.token_embed(t).reshape(t.shape[1], t.shape[2], -1)
        kv = v.reshape(t.shape[1], t.shape[2])
        for layer in self.stage1:
            x = layer(x, kv)
        return self.lift(x).permute(1, 0, 2)

    # --------------------------------------------------------------- rendering
    def render_feature_map(self, views, query_pose: CameraPose, scene_scale: float,
                           depth_range: tuple[float, float] | None = None,
                           size: int = FEATURE_MAP_SIZE, stratified: bool = False,
                           rng_seed: int = 0, feature_maps: torch.Tensor | None = None
                           ) -> EpipolarFeatureMap:
        """Full feature map for a query pose given posed input views.

        depth_range is the camera-Z sampling window; defaults to the training
        convention [s - 5, s + 5].
        """
        if depth_range is None:
            depth_range = (scene_scale - 5.0, scene_scale + 5.0)
        near, far = depth_range
        c = self.cfg
        if feature_maps is None:
            feature_maps = self.extract_features(self._images_tensor(views))
        origins, dirs, cos_z = pixel_grid_rays(query_pose, size, size)
        P = size * size
        if stratified:
            rng = np.random.default_rng(rng_seed)
            edges = np.linspace(near, far, c.n_samples + 1)
            depths = edges[:-1] + rng.random((P, c.n_samples)) * (edges[1:] - edges[:-1])
        else:
            depths = np.broadcast_to(
                sample_ray_depths(near, far, c.n_samples), (P, c.n_samples)).copy()

        pieces = self._token_parts(
            query_pose, origins, dirs, cos_z, depths,
            [v.pose for v in views], self._images_tensor(views),
            self._masks_tensor(views), feature_maps, scene_scale)
        valid = pieces["valid"].permute(1, 0).reshape(P, c.n_samples, -1)

        f1, alpha, beta = self._stages(self._embed_tokens(pieces), valid)
        K = beta.shape[1]
        g = (alpha.unsqueeze(-1) * f1.permute(0, 2, 1, 3)).sum(dim=2)    # (P, K, w)
        fc = self.lift((beta.unsqueeze(-1) * g).sum(dim=1))              # (P, 256)
        i_f = self.decode_head(fc)

        depths_t = torch.tensor(depths, dtype=fc.dtype)                  # (P, M)
        colors = pieces["colors"].permute(1, 0, 2).reshape(P, c.n_samples, K, 3)
        i_agg, d_agg = aggregated_color_depth(
            alpha, beta, colors.permute(0, 2, 1, 3), depths_t.unsqueeze(1).expand(-1, K, -1))
        pixel_valid = valid.reshape(P, -1).any(dim=1)

        S = size
        return EpipolarFeatureMap(
            features=fc.reshape(S, S, FC_DIM),
            alpha=alpha.reshape(S, S, K, c.n_samples),
            beta=beta.reshape(S, S, K),
            i_agg=i_agg.reshape(S, S, 3),
            d_agg=d_agg.reshape(S, S),
            i_f=i_f.reshape(S, S, 3),
            valid=pixel_valid.reshape(S, S),
            depth_range=(near, far),
        )

    def config_dict(self) -> dict:
        d = asdict(self.cfg)
        d["backbone_channels"] = list(d["backbone_channels"])
        return d


def aggregated_color_depth(alpha: torch.Tensor, beta: torch.Tensor,
                           colors: torch.Tensor, depths: torch.Tensor):
    """Convex combinations I_agg = sum_k beta_k sum_m alpha_k^m I_k^m and the
    same for depths. alpha (..., K, M), beta (..., K), colors (..., K, M, 3),
    depths (..., K, M)."""
    i_agg = (beta.unsqueeze(-1) * (alpha.unsqueeze(-1) * colors).sum(dim=-2)).sum(dim=-2)
    d_agg = (beta * (alpha * depths).sum(dim=-1)).sum(dim=-1)
    return i_agg, d_agg


def feature_loss(fmap: EpipolarFeatureMap, gt_rgb: torch.Tensor,
                 gt_depth: torch.Tensor) -> torch.Tensor:
    """Mean squared errors of I_f, I_agg (all valid pixels) and D_agg
    (foreground pixels only, where gt depth > 0)."""
    valid = fmap.valid
    if not bool(valid.any()):
        raise AllTokensInvalid("feature map has no valid pixel")
    gt_rgb = gt_rgb.to(fmap.i_f.dtype)
    gt_depth = gt_depth.to(fmap.d_agg.dtype)
    loss = ((fmap.i_f - gt_rgb) ** 2)[valid].mean()
    loss = loss + ((fmap.i_agg - gt_rgb) ** 2)[valid].mean()
    fg = valid & (gt_depth > 0)
    if bool(fg.any()):
        loss = loss + ((fmap.d_agg - gt_depth) ** 2)[fg].mean()
    return loss


def save_renderer(path: str, renderer: FeatureRenderer) -> None:
    save_module(path, "renderer", renderer.config_dict(), renderer)


def load_renderer(path: str) -> FeatureRenderer:
    _, config, _ = read_blob(path)
    config = dict(config)
    config["backbone_channels"] = tuple(config["backbone_channels"])
    config["stage_layers"] = tuple(config["stage_layers"])
    renderer = FeatureRenderer(FeatureRendererConfig(**config))
    load_module_state(path, "renderer", renderer)
    return renderer
