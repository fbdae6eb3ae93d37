import json
import math

import numpy as np
import pytest
import torch

from sparse3d.diffusion import (
    ConditionalDenoiser,
    GaussianOracle,
    NoiseSchedule,
    SmallUNet,
    UNetConfig,
)
from sparse3d.distill import (
    DistillationConfig,
    PerceptualFeatures,
    StepReport,
    apply_image_gradient,
    compute_normals,
    contextual_loss,
    csds_gradient,
    geometry_regularizers,
    lpips_surrogate,
    make_camera_pool,
    omega,
    perception_regularization,
    reconstruct,
    reference_loss,
    render_camera,
    sds_gradient,
    write_reports,
)
from sparse3d.epipolar import FeatureRenderer, FeatureRendererConfig
from sparse3d.errors import DivergenceDetected
from sparse3d.field import HashGridConfig, RadianceField
from sparse3d.scenes import generate_dataset, make_scene, random_scene_spec


class ConstPredictor:
    def __init__(self, value):
        self.value = value

    def predict(self, z, t, category=None, fc=None):
        return torch.full_like(z, float(self.value))


SCHED = NoiseSchedule()


def default_cfg(**kw):
    return DistillationConfig(**kw)


class TestConfig:
    def test_defaults_match_contract(self):
        c = DistillationConfig()
        assert (c.guidance_scale, c.lambda_p, c.lambda_c, c.lambda_r, c.lambda_m) == \
            (7.5, 100.0, 10.0, 1000.0, 50.0)
        assert c.t_range == (0.02, 0.98)
        assert c.steps == 10000
        assert c.n_samples == 512

    def test_validation(self):
        with pytest.raises(ValueError):
            DistillationConfig(lambda_r=-1)
        with pytest.raises(ValueError):
            DistillationConfig(t_range=(0.0, 0.9))
        with pytest.raises(ValueError):
            DistillationConfig(steps=0)


class TestGradients:
    def test_matched_predictions_give_zero(self):
        x = torch.rand(8, 8, 3)
        eps = torch.randn(8, 8, 3)
        mc = ConstPredictor(0.25)
        cat = ConstPredictor(0.25)
        g = csds_gradient(x, None, None, 500, eps, mc, cat, SCHED,
                          default_cfg(guidance_scale=1.0))
        assert torch.all(g == 0)

    def test_echoed_noise_reduces_to_sds_bitwise(self):
        torch.manual_seed(0)
        x = torch.rand(8, 8, 3)
        eps = torch.randn(8, 8, 3)
        mc = ConstPredictor(0.7)
        cfg = default_cfg(guidance_scale=1.0)

        class Echo:
            def predict(self, z, t, category=None, fc=None):
                return eps.permute(2, 0, 1).unsqueeze(0) if z.dim() == 4 else eps

        g_csds = csds_gradient(x, None, None, 321, eps, mc, Echo(), SCHED, cfg)
        g_sds = sds_gradient(x, None, None, 321, eps, mc, SCHED, cfg)
        assert torch.equal(g_csds, g_sds)

    def test_perfect_sds_denoiser_gives_zero(self):
        x = torch.rand(8, 8, 3)
        eps = torch.randn(8, 8, 3)

        class Echo:
            def predict(self, z, t, category=None, fc=None):
                return eps.permute(2, 0, 1).unsqueeze(0) if z.dim() == 4 else eps

        g = sds_gradient(x, None, None, 100, eps, Echo(), SCHED,
                         default_cfg(guidance_scale=1.0))
        assert torch.all(g == 0)

    def test_zero_weight_timestep_gives_zero(self):
        s = NoiseSchedule(betas=np.array([0.0, 0.5]), validate=False)
        x = torch.rand(4, 4, 3)
        eps = torch.randn(4, 4, 3)
        g = sds_gradient(x, None, None, 1, eps, ConstPredictor(0.9), s,
                         default_cfg(guidance_scale=1.0))
        assert torch.all(g == 0)

    def test_dual_oracle_gradient_constant_and_directed(self):
        g1 = torch.Generator().manual_seed(0)
        mu_mc = torch.rand(6, 6, 3, generator=g1)
        mu_cat = torch.rand(6, 6, 3, generator=g1)
        mc = GaussianOracle(mu=mu_mc.permute(2, 0, 1).unsqueeze(0), sigma0=0.3)
        cat = GaussianOracle(mu=mu_cat.permute(2, 0, 1).unsqueeze(0), sigma0=0.3)
        cfg = default_cfg()
        t = 400
        eps = torch.randn(6, 6, 3, generator=g1)
        ga = csds_gradient(torch.rand(6, 6, 3, generator=g1), None, None, t, eps,
                           mc, cat, SCHED, cfg)
        gb = csds_gradient(torch.rand(6, 6, 3, generator=g1), None, None, t, eps,
                           mc, cat, SCHED, cfg)
        assert torch.allclose(ga, gb, atol=1e-6)  # constant in x
        direction = (mu_cat - mu_mc).flatten()
        cos = torch.dot(ga.flatten(), direction) / (ga.norm() * direction.norm())
        assert cos.item() > 0.999

    def test_dual_oracle_descent_approaches_mc_mean(self):
        g1 = torch.Generator().manual_seed(3)
        mu_mc = torch.rand(4, 4, 3, generator=g1)
        mu_cat = torch.rand(4, 4, 3, generator=g1)
        mc = GaussianOracle(mu=mu_mc.permute(2, 0, 1).unsqueeze(0), sigma0=0.4)
        cat = GaussianOracle(mu=mu_cat.permute(2, 0, 1).unsqueeze(0), sigma0=0.4)
        cfg = default_cfg()
        x = mu_cat.clone()
        d0 = (x - mu_mc).norm().item()
        dists = [d0]
        # 100 steps x 0.008 d0 travels 0.8 d0: monotone, no overshoot
        for step in range(100):
            g = torch.Generator().manual_seed(step)
            t = int(torch.randint(100, 900, (), generator=g))
            eps = torch.randn(4, 4, 3, generator=g)
            grad = csds_gradient(x, None, None, t, eps, mc, cat, SCHED, cfg)
            x = x - 0.008 * d0 * grad / grad.norm()
            dists.append((x - mu_mc).norm().item())
        assert all(b < a + 1e-9 for a, b in zip(dists, dists[1:]))
        assert dists[-1] < 0.3 * d0

    def test_sds_expected_gradient_points_toward_mean(self):
        mu = torch.full((1, 3, 4, 4), 0.8)
        mc = GaussianOracle(mu=mu, sigma0=0.2)
        x = torch.full((4, 4, 3), 0.2)
        cfg = default_cfg()
        total = torch.zeros(4, 4, 3)
        for i in range(1000):
            g = torch.Generator().manual_seed(i)
            t = int(torch.randint(50, 950, (), generator=g))
            eps = torch.randn(4, 4, 3, generator=g)
            total += sds_gradient(x, None, None, t, eps, mc, SCHED, cfg)
        # x < mu everywhere, so the mean gradient must be negative
        # (descent x - g moves x upward, toward mu)
        assert (total < 0).float().mean().item() > 0.99

    def test_apply_image_gradient_surrogate(self):
        x = torch.rand(5, 5, 3, requires_grad=True)
        g = torch.randn(5, 5, 3)
        apply_image_gradient(x, g).backward()
        assert torch.allclose(x.grad, g)


class TestPerception:
    def test_identical_images_zero_lpips(self):
        img = torch.rand(16, 16, 3)
        assert lpips_surrogate(img, img).item() == 0.0

    def test_contextual_minimal_at_self(self):
        g = torch.Generator().manual_seed(0)
        a = torch.rand(16, 16, 3, generator=g)
        base = contextual_loss(a, a).item()
        for i in range(4):
            noisy = (a + torch.randn(a.shape, generator=g) * 0.2).clamp(0, 1)
            assert contextual_loss(a, noisy).item() >= base - 1e-9

    def test_contextual_matches_brute_force(self):
        g = torch.Generator().manual_seed(1)
        a = torch.rand(8, 8, 3, generator=g, dtype=torch.float64)
        b = torch.rand(8, 8, 3, generator=g, dtype=torch.float64)
        stack = PerceptualFeatures().double()
        got = contextual_loss(a, b, stack=stack).item()

        fa = stack(a)[1][0].flatten(1).T
        fb = stack(b)[1][0].flatten(1).T
        fa = fa / fa.norm(dim=1, keepdim=True)
        fb = fb / fb.norm(dim=1, keepdim=True)
        na, nb = fa.shape[0], fb.shape[0]
        d = np.zeros((na, nb))
        for i in range(na):
            for j in range(nb):
                d[i, j] = 1.0 - float(fa[i] @ fb[j])
        dn = np.zeros_like(d)
        for i in range(na):
            dn[i] = d[i] / (d[i].min() + 1e-5)
        A = np.zeros_like(d)
        for j in range(nb):
            e = np.exp((1 - dn[:, j]) / 0.5)
            A[:, j] = e / e.sum()
        expected = -math.log(np.mean([A[:, j].max() for j in range(nb)]))
        assert got == pytest.approx(expected, abs=1e-6)

    def test_weights_and_target_switch(self):
        g = torch.Generator().manual_seed(2)
        render = torch.rand(16, 16, 3, generator=g)
        ref = torch.rand(16, 16, 3, generator=g)
        x1 = torch.rand(16, 16, 3, generator=g)
        cfg_ref = default_cfg()
        got = perception_regularization(render, ref, x1, cfg_ref)
        expected = 100.0 * lpips_surrogate(ref, x1) + 10.0 * contextual_loss(ref, x1)
        assert torch.allclose(got, expected)
        cfg_rnd = default_cfg(perception_target="render")
        got2 = perception_regularization(render, ref, x1, cfg_rnd)
        expected2 = 100.0 * lpips_surrogate(render, x1) + 10.0 * contextual_loss(render, x1)
        assert torch.allclose(got2, expected2)


class TestReferenceLoss:
    def test_perfect_render_zero(self):
        rgb = torch.rand(8, 8, 3)
        mask = (torch.rand(8, 8) > 0.5).float()
        assert reference_loss(rgb, mask, rgb, mask, default_cfg()).item() == 0.0

    def test_mask_offset(self):
        rgb = torch.rand(8, 8, 3)
        mask = torch.full((8, 8), 0.6)
        got = reference_loss(rgb, mask, rgb, mask - 0.1, default_cfg())
        assert got.item() == pytest.approx(50.0 * 0.01, abs=1e-6)

    def test_hand_built_2x2_with_mask_gating(self):
        cfg = default_cfg()
        render = torch.tensor([[[0.5, 0.5, 0.5], [0.2, 0.2, 0.2]],
                               [[0.8, 0.8, 0.8], [0.1, 0.1, 0.1]]])
        ref = render + torch.tensor([[[0.1], [0.2]], [[-0.1], [0.0]]])
        m_hat = torch.tensor([[1.0, 0.5], [0.0, 1.0]])
        m = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
        # color: mean over 12 entries of ((render-ref)*m_hat)^2
        color = ((0.1 ** 2) * 3 + (0.2 * 0.5) ** 2 * 3 + 0.0 * 3 + 0.0 * 3) / 12
        mask = ((0.0) ** 2 + (0.5) ** 2 + 0.0 + 1.0) / 4
        expected = 1000 * color + 50 * mask
        got = reference_loss(render, m_hat, ref, m, cfg)
        assert got.item() == pytest.approx(expected, rel=1e-5)


class TestGeometryRegularizers:
    def unit_cfg(self):
        return default_cfg(reg_orientation=1.0, reg_entropy=1.0, reg_sparsity=1.0)

    def test_zero_opacity(self):
        got = geometry_regularizers(torch.zeros(4), torch.zeros(0),
                                    torch.zeros(0, 3), torch.zeros(0, 3), self.unit_cfg())
        # entropy(0) = 0, sparsity = sqrt(0.01) = 0.1
        assert got.item() == pytest.approx(0.1, abs=1e-4)

    def test_half_opacity_entropy_is_one(self):
        got = geometry_regularizers(torch.full((3,), 0.5), torch.zeros(0),
                                    torch.zeros(0, 3), torch.zeros(0, 3), self.unit_cfg())
        # entropy = 1, sparsity = sqrt(0.26)
        assert got.item() == pytest.approx(1.0 + math.sqrt(0.26), abs=1e-4)

    def test_back_facing_normals_inactive(self):
        n = torch.tensor([[0.0, 0.0, -1.0]] * 5)
        d = torch.tensor([[0.0, 0.0, 1.0]] * 5)
        cfg = default_cfg(reg_orientation=1.0, reg_entropy=0.0, reg_sparsity=0.0)
        got = geometry_regularizers(torch.full((2,), 0.5), torch.full((5,), 0.9), n, d, cfg)
        assert got.item() == pytest.approx(0.0, abs=1e-12)

    def test_front_facing_normals_penalized(self):
        n = torch.tensor([[0.0, 0.0, 1.0]] * 5)
        d = torch.tensor([[0.0, 0.0, 1.0]] * 5)
        cfg = default_cfg(reg_orientation=1.0, reg_entropy=0.0, reg_sparsity=0.0)
        got = geometry_regularizers(torch.full((2,), 0.5), torch.full((5,), 0.9), n, d, cfg)
        assert got.item() == pytest.approx(0.9, abs=1e-6)


@pytest.fixture(scope="module")
def tiny_scene_setup():
    rng = np.random.default_rng(5)
    scene = make_scene(random_scene_spec(2, rng))
    dataset = generate_dataset(scene, 2, orbit_radius=6.0, resolution=32, seed=3)
    field = RadianceField(HashGridConfig(levels=4, table_size=2 ** 11), hidden=16, seed=2)
    renderer = FeatureRenderer(FeatureRendererConfig(
        token_dim=16, stage_layers=(1, 1, 1), heads=2, ff_dim=32, n_samples=8, seed=4))
    base = SmallUNet(UNetConfig(base_channels=8, emb_dim=16, seed=5))
    mc = ConditionalDenoiser(base)
    from sparse3d.diffusion import CategoryDenoiser
    cat = CategoryDenoiser(base)
    return dataset, field, renderer, mc, cat


class TestRenderCamera:
    def test_shapes_and_background(self, tiny_scene_setup):
        dataset, field, *_ = tiny_scene_setup
        out = render_camera(field, dataset.views[0].pose, n_samples=48, size=16)
        assert out["rgb"].shape == (16, 16, 3)
        assert out["opacity"].shape == (16, 16)
        assert float(out["opacity"].min()) >= 0.0

    def test_miss_rays_are_white(self, tiny_scene_setup):
        dataset, field, *_ = tiny_scene_setup
        # very wide FOV camera: corner rays miss the bounding sphere
        from sparse3d.geometry import look_at_pose
        cam = look_at_pose((6, 0, 0), (0, 0, 0), 8.0, 8.0, 16, 16)
        out = render_camera(field, cam, n_samples=32, size=16)
        assert torch.allclose(out["rgb"][0, 0], torch.ones(3))
        assert out["opacity"][0, 0].item() == 0.0


class TestReconstruct:
    def test_smoke_runs_and_reports_finite(self, tiny_scene_setup):
        dataset, _, renderer, mc, cat = tiny_scene_setup
        field = RadianceField(HashGridConfig(levels=4, table_size=2 ** 11), hidden=16, seed=7)
        cfg = default_cfg(steps=12, n_samples=48, render_size=16, camera_pool=4, seed=1)
        field, reports = reconstruct(dataset, renderer, mc, cat, field, SCHED, cfg)
        assert len(reports) == 12
        kinds = {r.kind for r in reports}
        assert kinds <= {"reference", "novel"}
        for r in reports:
            assert math.isfinite(r.grad_norm)
            assert all(math.isfinite(v) for v in r.losses.values())

    def test_deterministic_given_seed(self, tiny_scene_setup):
        dataset, _, renderer, mc, cat = tiny_scene_setup
        cfg = default_cfg(steps=6, n_samples=32, render_size=16, camera_pool=4, seed=9)
        f1 = RadianceField(HashGridConfig(levels=2, table_size=2 ** 9), hidden=8, seed=3)
        f2 = RadianceField(HashGridConfig(levels=2, table_size=2 ** 9), hidden=8, seed=3)
        _, r1 = reconstruct(dataset, renderer, mc, cat, f1, SCHED, cfg)
        _, r2 = reconstruct(dataset, renderer, mc, cat, f2, SCHED, cfg)
        for a, b in zip(r1, r2):
            assert a.losses == b.losses

    def test_divergence_detected(self, tiny_scene_setup):
        dataset, _, renderer, mc, cat = tiny_scene_setup
        field = RadianceField(HashGridConfig(levels=2, table_size=2 ** 9), hidden=8, seed=3)
        with torch.no_grad():
            field.color_head.bias.fill_(float("nan"))
        cfg = default_cfg(steps=4, n_samples=32, render_size=16, camera_pool=2, seed=0,
                          reference_prob=1.0)
        with pytest.raises(DivergenceDetected):
            reconstruct(dataset, renderer, mc, cat, field, SCHED, cfg)

    def test_oracle_pinned_target_pulls_renders(self, tiny_scene_setup):
        dataset, _, renderer, _, _ = tiny_scene_setup
        field = RadianceField(HashGridConfig(levels=4, table_size=2 ** 11), hidden=16, seed=11)
        target = torch.full((1, 3, 16, 16), 0.22)
        oracle = GaussianOracle(mu=target, sigma0=0.05)
        cfg = default_cfg(steps=150, n_samples=48, render_size=16, camera_pool=3,
                          lambda_r=0.0, lambda_m=0.0, lambda_p=0.0, lambda_c=0.0,
                          reg_orientation=0.0, reg_entropy=0.0, reg_sparsity=0.0,
                          reference_prob=0.0, distill_mode="sds", seed=2)
        cam = make_camera_pool(dataset, cfg, cfg.seed + 99)[0]
        with torch.no_grad():
            before = render_camera(field, cam, n_samples=48, size=16)["rgb"]
        field, _ = reconstruct(dataset, renderer, oracle, oracle, field, SCHED, cfg)
        with torch.no_grad():
            after = render_camera(field, cam, n_samples=48, size=16)["rgb"]
        tgt = target[0].permute(1, 2, 0)
        assert (after - tgt).abs().mean() < (before - tgt).abs().mean()


class TestReports:
    def test_jsonl_round_trip(self, tmp_path):
        reports = [StepReport(step=i, kind="novel", camera=0, t=5,
                              losses={"distill": 0.5}, grad_norm=1.0) for i in range(3)]
        p = tmp_path / "report.jsonl"
        write_reports(str(p), reports)
        lines = p.read_text().strip().splitlines()
        assert len(lines) == 3
        rec = json.loads(lines[0])
        assert rec["losses"]["distill"] == 0.5


class TestNormals:
    def test_blob_normals_point_outward(self):
        field = RadianceField(seed=0)
        pts = torch.tensor([[0.5, 0.0, 0.0], [0.0, 0.6, 0.0], [0.0, 0.0, -0.55]])
        n = compute_normals(field, pts, box_radius=1.0)
        # density decreases radially, so -grad(sigma) points outward
        for p, nv in zip(pts, n):
            cos = torch.dot(nv, p / p.norm())
            assert cos.item() > 0.9
