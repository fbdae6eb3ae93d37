import json
import os

import numpy as np
import pytest
import torch

from sparse3d import cli
from sparse3d.checkpoint import read_blob
from sparse3d.field import HashGridConfig, RadianceField
from sparse3d.meshmetrics import sample_mesh_points, marching_cubes
from sparse3d.scenes import CameraView, Dataset, load_dataset, orbit_cameras
from sparse3d.distill import render_camera


def run(argv):
    return cli.main(argv)


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    d = str(tmp_path_factory.mktemp("data") / "sphere")
    code = run(["gen-data", "--scene", "sphere", "--views", "4", "--out", d,
                "--seed", "3", "--resolution", "32"])
    assert code == 0
    return d


@pytest.fixture(scope="module")
def train_dir(tmp_path_factory, data_dir):
    out = str(tmp_path_factory.mktemp("run") / "train")
    code = run(["train", "--data", data_dir, "--out", out, "--seed", "1",
                "--steps", "6", "--phase0-steps", "30"])
    assert code == 0
    return out


class TestGenData:
    def test_writes_views_and_meta(self, tmp_path):
        d = str(tmp_path / "ds")
        assert run(["gen-data", "--scene", "sphere", "--views", "2", "--out", d,
                    "--seed", "0", "--resolution", "24"]) == 0
        names = set(os.listdir(d))
        assert {"meta.json", "view_000.png", "view_001.png",
                "depth_000.f32", "mask_000.png", "config.json"} <= names

    def test_same_seed_byte_identical(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for d in (a, b):
            assert run(["gen-data", "--scene", "box", "--views", "3", "--out", d,
                        "--seed", "7", "--resolution", "24"]) == 0
        for name in sorted(os.listdir(a)):
            fa = open(os.path.join(a, name), "rb").read()
            fb = open(os.path.join(b, name), "rb").read()
            assert fa == fb, name

    def test_single_view_rejected(self, tmp_path):
        code = run(["gen-data", "--scene", "sphere", "--views", "1",
                    "--out", str(tmp_path / "x"), "--seed", "0"])
        assert code == 2

    def test_unknown_scene_rejected(self, tmp_path):
        code = run(["gen-data", "--scene", "nope", "--views", "2",
                    "--out", str(tmp_path / "x"), "--seed", "0"])
        assert code == 2


class TestTrain:
    def test_smoke_outputs(self, train_dir):
        names = set(os.listdir(train_dir))
        assert {"renderer.ckpt", "denoiser.ckpt", "base.ckpt", "losses.jsonl",
                "train_state.pt", "config.json"} <= names
        lines = [json.loads(l) for l in open(os.path.join(train_dir, "losses.jsonl"))]
        assert len(lines) == 6
        assert all(np.isfinite(l["loss_feat"]) and np.isfinite(l["loss_diff"])
                   for l in lines)

    def test_base_frozen_hash_compare(self, train_dir):
        # base.ckpt is written before joint training; denoiser.ckpt after.
        # Both store the base subtree under "base." names.
        _, _, base_tensors = read_blob(os.path.join(train_dir, "base.ckpt"))
        _, _, joint_tensors = read_blob(os.path.join(train_dir, "denoiser.ckpt"))
        checked = 0
        for name, arr in base_tensors.items():
            assert np.array_equal(arr, joint_tensors[name]), name
            checked += 1
        assert checked > 10

    def test_resume_reproduces_uninterrupted_run(self, tmp_path, data_dir):
        full = str(tmp_path / "full")
        assert run(["train", "--data", data_dir, "--out", full, "--seed", "5",
                    "--steps", "6", "--phase0-steps", "20"]) == 0
        part = str(tmp_path / "part")
        assert run(["train", "--data", data_dir, "--out", part, "--seed", "5",
                    "--steps", "6", "--until", "3", "--phase0-steps", "20"]) == 0
        resumed = str(tmp_path / "resumed")
        assert run(["train", "--data", data_dir, "--out", resumed, "--seed", "5",
                    "--steps", "6", "--resume", part, "--phase0-steps", "20"]) == 0
        flog = [json.loads(l) for l in open(os.path.join(full, "losses.jsonl"))]
        rlog = [json.loads(l) for l in open(os.path.join(resumed, "losses.jsonl"))]
        assert rlog[0]["step"] == 3
        by_step = {l["step"]: l for l in flog}
        for entry in rlog:
            assert entry["loss_feat"] == by_step[entry["step"]]["loss_feat"]
            assert entry["loss_diff"] == by_step[entry["step"]]["loss_diff"]


class TestReconstructCli:
    @pytest.fixture(scope="class")
    def recon_dir(self, tmp_path_factory, data_dir, train_dir):
        out = str(tmp_path_factory.mktemp("run") / "recon")
        code = run(["reconstruct", "--data", data_dir, "--run", train_dir,
                    "--out", out, "--seed", "2", "--views", "2", "--steps", "8",
                    "--mc-resolution", "32", "--iso", "0.5", "--render-size", "16"])
        assert code == 0
        return out

    def test_artifact_inventory(self, recon_dir):
        names = set(os.listdir(recon_dir))
        assert {"field.ckpt", "mesh.obj", "report.jsonl", "config.json"} <= names
        renders = [n for n in names if n.startswith("render_")]
        assert len(renders) == 16
        lines = open(os.path.join(recon_dir, "report.jsonl")).read().strip().splitlines()
        assert len(lines) == 8

    def test_views_flag_validated(self, data_dir, train_dir, tmp_path):
        code = run(["reconstruct", "--data", data_dir, "--run", train_dir,
                    "--out", str(tmp_path / "x"), "--seed", "0", "--views", "1",
                    "--steps", "2"])
        assert code == 2

    def test_sds_flag_routing(self, data_dir, train_dir, tmp_path):
        out = str(tmp_path / "sds")
        code = run(["reconstruct", "--data", data_dir, "--run", train_dir,
                    "--out", out, "--seed", "2", "--views", "2", "--steps", "4",
                    "--distill", "sds", "--mc-resolution", "32", "--iso", "0.5",
                    "--render-size", "16"])
        assert code == 0
        cfg = json.load(open(os.path.join(out, "config.json")))
        assert cfg["distill"] == "sds"

    def test_eval_runs_and_is_deterministic(self, recon_dir, data_dir, tmp_path):
        m1 = str(tmp_path / "m1.json")
        m2 = str(tmp_path / "m2.json")
        for m in (m1, m2):
            code = run(["eval", "--run", recon_dir, "--data", data_dir,
                        "--scene", "sphere", "--iso", "0.5", "--out", m])
            assert code == 0
        assert open(m1).read() == open(m2).read()
        rec = json.loads(open(m1).read())
        assert np.isfinite(rec["psnr"]) and np.isfinite(rec["chamfer"])
        # held-out split excludes the 2 input views recorded in the run config
        assert all(r["view"] >= 2 for r in rec["per_view"])

    def test_render_command(self, recon_dir, tmp_path):
        out = str(tmp_path / "turn")
        code = run(["render", "--field", os.path.join(recon_dir, "field.ckpt"),
                    "--out", out, "--azimuths", "4", "--resolution", "16",
                    "--n-samples", "32"])
        assert code == 0
        assert len(os.listdir(out)) == 4


class TestSelfEvaluation:
    def test_field_scores_perfectly_against_its_own_renders(self):
        field = RadianceField(HashGridConfig(levels=2, table_size=2 ** 9), hidden=8, seed=0)
        cams = orbit_cameras(3, 6.0, 15.0, 24)
        views = []
        with torch.no_grad():
            for cam in cams:
                out = render_camera(field, cam, n_samples=64, size=24)
                views.append(CameraView(
                    pose=cam, rgb=out["rgb"].numpy().astype(np.float64),
                    mask=(out["opacity"].numpy() > 0.5).astype(np.uint8),
                    depth=out["depth"].numpy().astype(np.float32)))
        ds = Dataset(views=views, scale_s=6.0, category_id=0)
        rows = cli.eval_views(field, ds, skip=0, n_samples=64)
        for r in rows:
            assert r["psnr"] == 100.0
            assert r["ssim"] == pytest.approx(1.0, abs=1e-9)
        mesh = marching_cubes(field, resolution=48, iso_level=1.0)
        pts = sample_mesh_points(mesh, 2000, seed=5)
        geo = cli.eval_geometry(field, pts, iso_level=1.0, resolution=48,
                                n_points=2000, seed=5)
        assert geo["chamfer"] == 0.0
        assert geo["fscore"] == 1.0


class TestThreads:
    def test_thread_cap_env(self, monkeypatch):
        before = torch.get_num_threads()
        monkeypatch.setenv("SPARSE3D_THREADS", "1")
        cli._setup_threads()
        assert torch.get_num_threads() == 1
        torch.set_num_threads(before)


class TestDatasetRoundTripViaCli:
    def test_generated_dataset_loads(self, data_dir):
        ds = load_dataset(data_dir)
        assert len(ds.views) == 4
        assert ds.scale_s == pytest.approx(6.0)
