# main.py
"""
Command-line entry point.

    python main.py optimize --config configs/toy.yaml --set csd.total=100
    python main.py extract-mesh runs/toy/checkpoints/cloud_final.ply --format ply
    python main.py verify kl-identity
    python main.py render --cloud cloud.ply --azimuth 90 --elevation 15 --radius 2.2 --out view.png

Exit codes: 0 success, 1 runtime abort, 2 usage or configuration error.
"""
import argparse
import os
import sys
from typing import List, Optional, Sequence

from tqdm import tqdm

from camera_sampler import Camera, canonical_quad
from config import CSD_PROGRESS
from csd_core import WHITE, RunSinks, run_optimization
from errors import ConfigError, CsdError
from gauss_core import GaussianCloud, init_cloud, load_cloud, save_cloud
from mesh_extract import (
    bake_vertex_colors,
    density_query,
    export_mesh,
    fit_tetgrid,
    init_tetgrid_from_occupancy,
    marching_tetrahedra,
    sample_cell_sdf,
    sdf_from_occupancy,
)
from monitoring import MetricsWriter, monitor_stage
from provider_factory import build_providers
from run_config import RunConfig, dump_run_config, load_run_config
from score_adapter import AdapterModel, save_adapter
from score_targets import parse_color
from splat_render import RenderSettings, render, save_png
from verify_suites import run_verify, suite_names

CHECKPOINT_DIR = "checkpoints"
SNAPSHOT_DIR = "snapshots"


# ---------------------------------------------------------
# Helpers
# ---------------------------------------------------------
def _makedirs(*paths: str) -> None:
    for path in paths:
        if path:
            os.makedirs(path, exist_ok=True)


def initial_cloud(cfg: RunConfig) -> GaussianCloud:
    if cfg.init.cloud:
        tqdm.write(f"→ Starting from cloud {cfg.init.cloud}")
        return load_cloud(cfg.init.cloud)
    i = cfg.init
    return init_cloud(i.count, i.radius, i.opacity, i.color, cfg.seed, i.scale)


def _build_providers(cfg: RunConfig):
    # Provider construction validates targets and coefficients; those are config faults
    try:
        return build_providers(cfg)
    except ConfigError:
        raise
    except CsdError as ex:
        raise ConfigError("providers", str(ex)) from ex


# ---------------------------------------------------------
# Commands
# ---------------------------------------------------------
def cmd_optimize(config_path: Optional[str], overrides: Sequence[str], threads: Optional[int] = None) -> int:
    overrides = list(overrides)
    if threads is not None:
        overrides.append(f"threads={threads}")
    cfg = load_run_config(config_path, overrides)
    out_dir = cfg.output.dir
    ckpt_dir = os.path.join(out_dir, CHECKPOINT_DIR)
    snap_dir = os.path.join(out_dir, SNAPSHOT_DIR)
    _makedirs(out_dir, ckpt_dir, snap_dir)
    tqdm.write(f"→ Resolved config written to {dump_run_config(cfg, out_dir)}")

    providers = monitor_stage("build_providers", _build_providers, cfg)
    cloud = initial_cloud(cfg)
    settings = cfg.render.build()
    precision = cfg.output.precision

    def on_checkpoint(iteration: int, current: GaussianCloud, adapter: Optional[AdapterModel]) -> None:
        save_cloud(current, os.path.join(ckpt_dir, f"cloud_{iteration:06d}.ply"), precision)
        if adapter is not None:
            save_adapter(adapter, os.path.join(ckpt_dir, f"adapter_{iteration:06d}.bin"))

    def on_snapshot(iteration: int, current: GaussianCloud) -> None:
        for k, cam in enumerate(canonical_quad(size=cfg.output.snapshot_size)):
            save_png(render(current, cam, WHITE, settings), os.path.join(snap_dir, f"iter_{iteration:06d}_view{k}.png"))

    with MetricsWriter(out_dir) as metrics:
        sinks = RunSinks(
            metrics=metrics,
            on_checkpoint=on_checkpoint,
            on_snapshot=on_snapshot,
            checkpoint_every=cfg.output.checkpoint_every,
            snapshot_every=cfg.output.snapshot_every,
            progress=CSD_PROGRESS,
        )
        result = monitor_stage(
            "optimize",
            run_optimization,
            cloud,
            cfg.csd.build(cfg.seed),
            providers,
            densify_cfg=cfg.densify.build(),
            ranges=cfg.camera.build(),
            sinks=sinks,
            settings=settings,
            n_jobs=cfg.threads,
        )

    on_checkpoint(result.iterations, result.cloud, providers.adapter)
    save_cloud(result.cloud, os.path.join(ckpt_dir, "cloud_final.ply"), precision)
    if providers.adapter is not None:
        save_adapter(providers.adapter, os.path.join(ckpt_dir, "adapter_final.bin"))
    on_snapshot(result.iterations, result.cloud)
    tqdm.write(
        f"[CSD] done iterations={result.iterations} rejected={result.rejected} "
        f"gaussians={len(result.cloud)} → {out_dir}"
    )
    return 0


def cmd_extract_mesh(
    cloud_path: str,
    config_path: Optional[str],
    overrides: Sequence[str],
    fmt: Optional[str] = None,
    out_path: Optional[str] = None,
) -> int:
    cfg = load_run_config(config_path, overrides)
    fmt = fmt or cfg.mesh.format
    if fmt not in ("obj", "ply"):
        raise ConfigError("format", "must be 'obj' or 'ply'")
    cloud = load_cloud(cloud_path)

    grid = monitor_stage("density_query", density_query, cloud, cfg.mesh.grid_spec())
    if grid.occupied_count() == 0:
        tqdm.write(f"[MESH] no occupied voxels at threshold {cfg.mesh.threshold}")
        return 1
    tqdm.write(f"[MESH] occupied voxels={grid.occupied_count()} of {grid.resolution ** 3}")

    sdf_cells = sdf_from_occupancy(grid)
    tet = monitor_stage("init_tetgrid", init_tetgrid_from_occupancy, grid, sdf_cells, cfg.mesh.tet_resolution)
    tet = monitor_stage(
        "fit_tetgrid",
        fit_tetgrid,
        tet,
        lambda p: sample_cell_sdf(grid, sdf_cells, p),
        cfg.mesh.fit_iterations,
        cfg.mesh.fit_lr,
        progress=CSD_PROGRESS,
    )
    mesh = monitor_stage("marching_tetrahedra", marching_tetrahedra, tet)
    if len(mesh.faces) == 0:
        tqdm.write("[MESH] the fitted field has no zero crossing")
        return 1
    mesh = monitor_stage("bake_vertex_colors", bake_vertex_colors, mesh, cloud)

    path = out_path or os.path.join(cfg.output.dir, f"mesh.{fmt}")
    _makedirs(os.path.dirname(path))
    export_mesh(mesh, path, fmt)
    tqdm.write(
        f"[MESH] vertices={len(mesh.vertices)} faces={len(mesh.faces)} "
        f"watertight={mesh.is_watertight()} → {path}"
    )
    return 0


def cmd_verify(suite: str) -> int:
    if suite not in suite_names():
        tqdm.write(f"[VERIFY] unknown suite {suite!r}; choose from {', '.join(suite_names())}")
        return 2
    return run_verify(suite)


def cmd_render(
    cloud_path: str,
    azimuth: float,
    elevation: float,
    radius: float,
    out_path: str,
    fov_y: float = 50.0,
    size: int = 256,
    background: str = "white",
) -> int:
    try:
        bg = parse_color(background)
        cam = Camera(azimuth, elevation, radius, fov_y, size, size)
    except CsdError as ex:
        raise ConfigError("render", str(ex)) from ex
    image = render(load_cloud(cloud_path), cam, bg, RenderSettings())
    _makedirs(os.path.dirname(out_path))
    save_png(image, out_path)
    tqdm.write(f"Saved render → {out_path}")
    return 0


# ---------------------------------------------------------
# Main
# ---------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Coupled score distillation for Gaussian clouds.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="Optimize a Gaussian cloud.")
    p.add_argument("--config", help="YAML run configuration.")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--threads", type=int, help="Worker cap for the quad renders; 1 is the bit reference.")

    p = sub.add_parser("extract-mesh", help="Extract a coloured mesh from a cloud checkpoint.")
    p.add_argument("cloud")
    p.add_argument("--config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--format", choices=("obj", "ply"))
    p.add_argument("--out")

    p = sub.add_parser("verify", help="Run an oracle suite.")
    p.add_argument("suite", help=f"One of: {', '.join(suite_names())}")

    p = sub.add_parser("render", help="Render one view of a cloud checkpoint to PNG.")
    p.add_argument("--cloud", required=True)
    p.add_argument("--azimuth", type=float, required=True)
    p.add_argument("--elevation", type=float, required=True)
    p.add_argument("--radius", type=float, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fov", type=float, default=50.0)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--background", default="white")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "optimize":
            return cmd_optimize(args.config, args.overrides, args.threads)
        if args.command == "extract-mesh":
            return cmd_extract_mesh(args.cloud, args.config, args.overrides, args.format, args.out)
        if args.command == "verify":
            return cmd_verify(args.suite)
        return cmd_render(
            args.cloud, args.azimuth, args.elevation, args.radius, args.out,
            args.fov, args.size, args.background,
        )
    except ConfigError as ex:
        tqdm.write(f"[CONFIG] {ex}")
        return 2
    except CsdError as ex:
        tqdm.write(f"[ERROR] {type(ex).__name__}: {ex}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
