from pathlib import Path

import pytest

import run_config
from csd_core import Providers
from diffusion_math import AnalyticJointProvider, AnalyticMixtureProvider
from errors import ConfigError
from provider_factory import build_providers, build_targets
from run_config import TargetSection, apply_overrides, dump_run_config, load_run_config, parse_override

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def test_defaults():
    cfg = load_run_config()
    assert cfg.seed == 0
    assert cfg.csd.lam == 0.5
    assert cfg.densify.build().interval == 250
    assert cfg.csd.build(cfg.seed).resolution_schedule[0] == (0.0, 128)


def test_parse_override_uses_yaml_scalars():
    assert parse_override("csd.lam=0.7") == (["csd", "lam"], 0.7)
    assert parse_override("csd.background=[1, 1, 1]") == (["csd", "background"], [1, 1, 1])
    assert parse_override("densify.enabled=false") == (["densify", "enabled"], False)
    with pytest.raises(ConfigError):
        parse_override("csd.lam")


def test_overrides_build_nested_sections():
    data = apply_overrides({"csd": {"lam": 0.5}}, ["csd.total=10", "mesh.format=ply"])
    assert data == {"csd": {"lam": 0.5, "total": 10}, "mesh": {"format": "ply"}}
    with pytest.raises(ConfigError):
        apply_overrides({"seed": 3}, ["seed.value=1"])


def test_cli_overrides_beat_the_file():
    cfg = load_run_config(str(CONFIGS / "toy.yaml"), ["csd.total=7", "seed=5"])
    assert cfg.csd.total == 7
    assert cfg.seed == 5
    assert cfg.init.count == 64


def test_bare_names_resolve_to_the_config_directory(monkeypatch):
    monkeypatch.setattr(run_config, "CSD_CONFIG_DIR", str(CONFIGS))
    assert load_run_config("toy.yaml").output.dir == "runs/toy"


@pytest.mark.parametrize("override, field", [
    ("csd.lambda=1.0", "csd.lambda"),
    ("seed=abc", "seed"),
    ("csd.lam=2.0", "csd"),
    ("camera.radius=[2.5, 2.0]", "camera"),
    ("threads=0", "threads"),
    ("mesh.format=stl", "mesh.format"),
])
def test_errors_name_the_offending_field(override, field):
    with pytest.raises(ConfigError) as info:
        load_run_config(None, [override])
    assert info.value.field == field


def test_unreadable_files(tmp_path):
    with pytest.raises(ConfigError):
        load_run_config(str(tmp_path / "missing.yaml"))
    bad = tmp_path / "bad.yaml"
    bad.write_text("csd: [unclosed\n")
    with pytest.raises(ConfigError):
        load_run_config(str(bad))
    scalar = tmp_path / "scalar.yaml"
    scalar.write_text("42\n")
    with pytest.raises(ConfigError):
        load_run_config(str(scalar))


def test_resolved_config_reloads_identically(tmp_path):
    cfg = load_run_config(str(CONFIGS / "default.yaml"), ["csd.background=[0.2, 0.3, 0.4]"])
    path = dump_run_config(cfg, str(tmp_path))
    assert load_run_config(path) == cfg


# ---------------------------------------------------------
# Provider construction
# ---------------------------------------------------------
def test_toy_providers():
    providers = build_providers(load_run_config(str(CONFIGS / "toy.yaml")))
    assert isinstance(providers, Providers)
    assert isinstance(providers.multi, AnalyticJointProvider)
    assert providers.adapter is not None
    assert providers.adapter.config.hidden == 64


def test_ablation_modes_skip_the_adapter():
    providers = build_providers(load_run_config(None, ["csd.mode=sds", "providers.multi.kind=none"]))
    assert providers.adapter is None
    assert providers.multi is None


def test_mixture_provider():
    cfg = load_run_config(None, [
        "providers.single.kind=mixture",
        "providers.single.components=[{weight: 0.5, targets: {default: 'disc:red'}}, "
        "{weight: 0.5, targets: {default: 'disc:blue'}, covariance: 0.02}]",
    ])
    assert isinstance(build_providers(cfg).single, AnalyticMixtureProvider)


def test_target_errors():
    with pytest.raises(ConfigError) as info:
        build_targets(TargetSection(kind="reference"), "providers.single.targets")
    assert info.value.field == "providers.single.targets.cloud"
    with pytest.raises(ConfigError):
        build_targets(TargetSection(kind="video"), "providers.single.targets")
    with pytest.raises(ConfigError):
        build_providers(load_run_config(None, ["providers.single.kind=flow"]))
