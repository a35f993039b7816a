from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from diffusion_math import NoiseSchedule
from gauss_core import init_cloud, load_cloud, save_cloud
from main import main
from mesh_extract import load_mesh
from score_adapter import load_adapter

TOY = str(Path(__file__).resolve().parents[1] / "configs" / "toy.yaml")


def optimize(out_dir, *extra):
    args = [
        "optimize", "--config", TOY,
        "--set", "csd.total=4",
        "--set", "densify.interval=2",
        "--set", "densify.stop=2",
        "--set", "output.checkpoint_every=2",
        "--set", "output.snapshot_every=2",
        "--set", "output.snapshot_size=16",
        "--set", "adapter.resolution=8",
        "--set", "adapter.hidden=8",
        "--set", "csd.resolution_schedule=[[0.0, 16]]",
        "--set", "csd.resolution_cap=16",
        "--set", f"output.dir={out_dir}",
    ]
    return main(args + list(extra))


@pytest.fixture
def blob(tmp_path):
    path = tmp_path / "blob.ply"
    save_cloud(init_cloud(40, 0.3, 0.9, (0.8, 0.3, 0.2), seed=0, scale=0.1), str(path))
    return str(path)


def test_optimize_writes_the_run_layout(tmp_path):
    out = tmp_path / "run"
    assert optimize(out, "--threads", "2") == 0
    assert (out / "resolved_config.yaml").exists()
    assert "threads: 2" in (out / "resolved_config.yaml").read_text()
    ckpt = out / "checkpoints"
    for name in ("cloud_000002.ply", "cloud_000004.ply", "cloud_final.ply", "adapter_000002.bin", "adapter_final.bin"):
        assert (ckpt / name).exists(), name
    assert len(load_cloud(str(ckpt / "cloud_final.ply"))) > 0
    load_adapter(str(ckpt / "adapter_final.bin"), NoiseSchedule())
    snapshot = out / "snapshots" / "iter_000004_view3.png"
    assert Image.open(snapshot).size == (16, 16)

    lines = (out / "metrics.jsonl").read_text().splitlines()
    assert sum('"event"' not in line for line in lines) == 4
    assert any('"event":"densify"' in line for line in lines)
    assert len((out / "timings.jsonl").read_text().splitlines()) == 4


def test_optimize_is_reproducible(tmp_path):
    assert optimize(tmp_path / "a") == 0
    assert optimize(tmp_path / "b") == 0
    assert (tmp_path / "a" / "metrics.jsonl").read_bytes() == (tmp_path / "b" / "metrics.jsonl").read_bytes()
    a = load_cloud(str(tmp_path / "a" / "checkpoints" / "cloud_final.ply"))
    b = load_cloud(str(tmp_path / "b" / "checkpoints" / "cloud_final.ply"))
    assert a.equals(b)


def test_config_errors_exit_with_2(tmp_path):
    assert optimize(tmp_path / "run", "--set", "csd.lam=5.0") == 2
    assert optimize(tmp_path / "run", "--set", "csd.nonsense=1") == 2
    assert optimize(tmp_path / "run", "--set", "providers.multi.rho=0.5") == 2


def test_extract_mesh(tmp_path, blob):
    out = tmp_path / "blob.ply.mesh.ply"
    code = main([
        "extract-mesh", blob, "--format", "ply", "--out", str(out),
        "--set", "mesh.resolution=16", "--set", "mesh.tet_resolution=12", "--set", "mesh.fit_iterations=5",
    ])
    assert code == 0
    mesh = load_mesh(str(out))
    assert len(mesh.faces) > 0
    assert mesh.colors is not None
    assert np.all(np.abs(mesh.vertices) < 1.0)


def test_extract_mesh_without_occupancy_exits_with_1(tmp_path, blob):
    code = main(["extract-mesh", blob, "--set", "mesh.threshold=1e6", "--set", f"output.dir={tmp_path}"])
    assert code == 1
    assert not (tmp_path / "mesh.obj").exists()


def test_extract_mesh_missing_cloud_exits_with_1(tmp_path):
    assert main(["extract-mesh", str(tmp_path / "missing.ply")]) == 1


def test_verify():
    assert main(["verify", "kl-identity"]) == 0
    assert main(["verify", "nosuch"]) == 2


def test_render(tmp_path, blob):
    out = tmp_path / "views" / "side.png"
    args = ["render", "--cloud", blob, "--azimuth", "90", "--elevation", "10", "--radius", "2.2", "--out", str(out), "--size", "24"]
    assert main(args) == 0
    assert Image.open(out).size == (24, 24)
    assert main(args + ["--background", "mauve"]) == 2
    assert main(args[:2] + [str(tmp_path / "missing.ply")] + args[3:]) == 1


def test_unknown_command_is_a_usage_error():
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 2
