# run_config.py
"""
Declarative run configuration: YAML file + `--set section.key=value`
overrides + defaults, validated by pydantic. Precedence CLI > file > defaults.
"""
import os
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from camera_sampler import CameraRanges
from config import CSD_CONFIG_DIR, CSD_OUTPUT_ROOT, CSD_THREADS
from csd_core import CsdConfig
from densify import DensifyConfig
from errors import ConfigError, CsdError, IoError
from mesh_extract import GridSpec
from score_adapter import AdapterConfig
from splat_render import RenderSettings

RESOLVED_CONFIG_FILE = "resolved_config.yaml"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


# ============================================================
# Sections
# ============================================================
class CsdSection(_Section):
    lam: float = 0.5
    guidance: float = 7.5
    mode: str = "csd"
    allow_any_lambda: bool = False
    prompt_id: int = 0
    total: int = 4000
    t_initial: Tuple[float, float] = (0.02, 0.98)
    t_annealed: Tuple[float, float] = (0.02, 0.50)
    switch_iteration: Optional[int] = None
    adapter_every: int = 1
    adapter_lr: float = 1e-3
    position_lr_init: float = 1e-3
    position_lr_final: float = 2e-5
    position_lr_steps: int = 1500
    feature_lr: float = 0.01
    opacity_lr: float = 0.05
    scaling_lr: float = 5e-3
    rotation_lr: float = 1e-3
    resolution_schedule: List[Tuple[float, int]] = [(0.0, 128), (0.1, 256), (0.3, 512), (0.5, 1024)]
    resolution_cap: int = 128
    background: Union[str, Tuple[float, float, float]] = "random"
    max_rejected: int = 20

    def build(self, seed: int) -> CsdConfig:
        data = self.model_dump()
        data["resolution_schedule"] = tuple(tuple(x) for x in data["resolution_schedule"])
        return CsdConfig(**data, seed=seed)


class DensifySection(_Section):
    enabled: bool = True
    interval: int = 250
    stop: int = 1500
    grad_threshold: float = 0.01
    min_opacity: float = 0.01
    max_scale: float = 0.05
    clone_max_scale: float = 0.01
    split_factor: float = 1.6

    def build(self) -> Optional[DensifyConfig]:
        if not self.enabled:
            return None
        return DensifyConfig(**self.model_dump(exclude={"enabled"}))


class CameraSection(_Section):
    azimuth: Tuple[float, float] = (-180.0, 180.0)
    elevation: Tuple[float, float] = (-90.0, 30.0)
    radius: Tuple[float, float] = (2.0, 2.5)
    fov_y: Tuple[float, float] = (40.0, 70.0)

    def build(self) -> CameraRanges:
        return CameraRanges(**self.model_dump())


class RenderSection(_Section):
    tile_culling: bool = True
    tile_size: int = 16
    alpha_cutoff: float = 1.0 / 255.0
    early_stop_transmittance: float = 1e-4
    low_pass: float = 0.3
    near: float = 0.01

    def build(self) -> RenderSettings:
        return RenderSettings(**self.model_dump())


class TargetSection(_Section):
    kind: str = "pattern"                      # pattern | slots | image | reference
    default: str = "face"
    by_bucket: Dict[str, str] = Field(default_factory=dict)
    slots: List[str] = Field(default_factory=lambda: ["face", "side", "back", "side"])
    cloud: Optional[str] = None


class ComponentSection(_Section):
    weight: float
    targets: TargetSection
    covariance: float = 0.05


class SingleProviderSection(_Section):
    kind: str = "gaussian"                     # gaussian | mixture
    targets: TargetSection = Field(default_factory=TargetSection)
    covariance: float = 0.05
    components: List[ComponentSection] = Field(default_factory=list)


class MultiProviderSection(_Section):
    kind: str = "joint"                        # joint | none
    targets: TargetSection = Field(default_factory=lambda: TargetSection(kind="slots"))
    gamma: float = 0.05
    rho: float = 0.2


class ProvidersSection(_Section):
    schedule: str = "linear"
    steps: int = 1000
    weighting: str = "sigma2"
    single: SingleProviderSection = Field(default_factory=SingleProviderSection)
    multi: MultiProviderSection = Field(default_factory=MultiProviderSection)


class AdapterSection(_Section):
    resolution: int = 32
    hidden: int = 128
    prediction: str = "eps"
    channels: str = "rgb"
    num_prompts: int = 1

    def build(self, seed: int) -> AdapterConfig:
        return AdapterConfig(**self.model_dump(), seed=seed)


class InitSection(_Section):
    count: int = 512
    radius: float = 0.5
    opacity: float = 0.1
    color: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    scale: Optional[float] = None
    cloud: Optional[str] = None


class MeshSection(_Section):
    resolution: int = 64
    tet_resolution: int = 128
    threshold: float = 0.2
    padding: float = 0.05
    fit_iterations: int = 300
    fit_lr: float = 1e-3
    format: str = "obj"

    def grid_spec(self) -> GridSpec:
        return GridSpec(resolution=self.resolution, padding=self.padding, threshold=self.threshold)


class OutputSection(_Section):
    dir: str = Field(default_factory=lambda: os.path.join(CSD_OUTPUT_ROOT, "run"))
    checkpoint_every: int = 500
    snapshot_every: int = 500
    snapshot_size: int = 128
    precision: str = "float"


class RunConfig(_Section):
    seed: int = 0
    threads: int = CSD_THREADS
    csd: CsdSection = Field(default_factory=CsdSection)
    densify: DensifySection = Field(default_factory=DensifySection)
    camera: CameraSection = Field(default_factory=CameraSection)
    render: RenderSection = Field(default_factory=RenderSection)
    providers: ProvidersSection = Field(default_factory=ProvidersSection)
    adapter: AdapterSection = Field(default_factory=AdapterSection)
    init: InitSection = Field(default_factory=InitSection)
    mesh: MeshSection = Field(default_factory=MeshSection)
    output: OutputSection = Field(default_factory=OutputSection)

    def check(self) -> None:
        """Domain invariants beyond field types, reported against their section."""
        built = {
            "csd": self.csd.build(self.seed),
            "densify": self.densify.build(),
            "camera": self.camera.build(),
            "adapter": self.adapter.build(self.seed),
        }
        for section, value in built.items():
            if value is None:
                continue
            try:
                value.validate()
            except CsdError as ex:
                raise ConfigError(section, str(ex)) from ex
        if self.threads < 1:
            raise ConfigError("threads", "must be >= 1")
        if self.mesh.format not in ("obj", "ply"):
            raise ConfigError("mesh.format", "must be 'obj' or 'ply'")
        if self.output.precision not in ("float", "double"):
            raise ConfigError("output.precision", "must be 'float' or 'double'")


# ============================================================
# Loading, overrides and dumping
# ============================================================
def parse_override(item: str) -> Tuple[List[str], Any]:
    key, sep, raw = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(item, "expected section.key=value")
    try:
        value = yaml.safe_load(raw) if raw.strip() else None
    except yaml.YAMLError as ex:
        raise ConfigError(key.strip(), f"cannot parse value {raw!r}: {ex}") from ex
    return key.strip().split("."), value


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    for item in overrides:
        path, value = parse_override(item)
        node = data
        for part in path[:-1]:
            child = node.get(part)
            if child is None:
                child = node[part] = {}
            elif not isinstance(child, dict):
                raise ConfigError(".".join(path), f"{part} is not a section")
            node = child
        node[path[-1]] = value
    return data


def _field_path(error: dict) -> str:
    return ".".join(str(p) for p in error.get("loc", ())) or "<root>"


def resolve_config_path(path: str) -> str:
    """A bare name such as `toy.yaml` is looked up in the bundled config directory."""
    if os.path.exists(path) or os.path.isabs(path):
        return path
    bundled = os.path.join(CSD_CONFIG_DIR, path)
    return bundled if os.path.exists(bundled) else path


def load_run_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> RunConfig:
    data: Dict[str, Any] = {}
    if path:
        path = resolve_config_path(path)
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except OSError as ex:
            raise ConfigError("config", f"cannot read {path}: {ex}") from ex
        except yaml.YAMLError as ex:
            raise ConfigError("config", f"{path} is not valid YAML: {ex}") from ex
        if not isinstance(data, dict):
            raise ConfigError("config", f"{path} must hold a mapping of sections")

    data = apply_overrides(data, overrides)
    try:
        cfg = RunConfig.model_validate(data)
    except ValidationError as ex:
        first = ex.errors()[0]
        raise ConfigError(_field_path(first), first.get("msg", "invalid value")) from ex
    cfg.check()
    return cfg


def dump_run_config(cfg: RunConfig, out_dir: str) -> str:
    path = os.path.join(out_dir, RESOLVED_CONFIG_FILE)
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            yaml.safe_dump(cfg.model_dump(mode="json"), f, sort_keys=False)
    except OSError as ex:
        raise IoError(f"cannot write resolved config to {path}: {ex}") from ex
    return path
