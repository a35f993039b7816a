# provider_factory.py
from typing import Optional

from tqdm import tqdm

from csd_core import Providers
from diffusion_math import (
    AnalyticGaussianProvider,
    AnalyticJointProvider,
    AnalyticMixtureProvider,
    MixtureComponent,
    NoiseSchedule,
)
from errors import ConfigError
from gauss_core import load_cloud
from run_config import MultiProviderSection, RunConfig, SingleProviderSection, TargetSection
from score_adapter import AdapterModel
from score_targets import ImageTargets, PatternTargets, ReferenceCloudTargets, SlotTargets


def build_schedule(cfg: RunConfig) -> NoiseSchedule:
    p = cfg.providers
    return NoiseSchedule(kind=p.schedule, steps=p.steps, weighting=p.weighting)


def build_targets(section: TargetSection, field: str):
    """
    Returns a target set chosen by `kind`:
    pattern (default), slots, image, reference.
    """
    if section.kind == "pattern":
        return PatternTargets(section.default, section.by_bucket)
    if section.kind == "slots":
        return SlotTargets(section.slots)
    if section.kind == "image":
        return ImageTargets(section.default, section.by_bucket)
    if section.kind == "reference":
        if not section.cloud:
            raise ConfigError(f"{field}.cloud", "reference targets need a cloud path")
        return ReferenceCloudTargets(load_cloud(section.cloud))
    raise ConfigError(f"{field}.kind", f"unknown target kind {section.kind!r}")


def build_single_provider(section: SingleProviderSection, schedule: NoiseSchedule):
    if section.kind == "gaussian":
        tqdm.write("→ Using analytic Gaussian single-view provider")
        return AnalyticGaussianProvider(build_targets(section.targets, "providers.single.targets"), section.covariance, schedule)
    if section.kind == "mixture":
        tqdm.write(f"→ Using analytic mixture single-view provider ({len(section.components)} components)")
        components = [
            MixtureComponent(c.weight, build_targets(c.targets, f"providers.single.components.{k}.targets"), c.covariance)
            for k, c in enumerate(section.components)
        ]
        return AnalyticMixtureProvider(components, schedule)
    raise ConfigError("providers.single.kind", f"unknown provider kind {section.kind!r}")


def build_multi_provider(section: MultiProviderSection, schedule: NoiseSchedule) -> Optional[AnalyticJointProvider]:
    if section.kind == "none":
        return None
    if section.kind == "joint":
        tqdm.write(f"→ Using analytic joint multi-view provider (rho={section.rho})")
        return AnalyticJointProvider(build_targets(section.targets, "providers.multi.targets"), section.gamma, section.rho, schedule)
    raise ConfigError("providers.multi.kind", f"unknown provider kind {section.kind!r}")


def build_providers(cfg: RunConfig) -> Providers:
    schedule = build_schedule(cfg)
    adapter = None
    if cfg.csd.mode == "csd":
        adapter = AdapterModel(cfg.adapter.build(cfg.seed), schedule)
    return Providers(
        schedule=schedule,
        single=build_single_provider(cfg.providers.single, schedule),
        multi=build_multi_provider(cfg.providers.multi, schedule),
        adapter=adapter,
    )
