"""Run configuration: one YAML tree, validated with unknown keys rejected."""
from __future__ import annotations

from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigurationError

STAGES = ("simulate", "extract", "cluster", "estimate", "regress", "counterfactual", "validate")


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PathsConfig(_Section):
    output_dir: Path = Path("output")
    panel: Path | None = None
    ads: Path | None = None
    establishments: Path | None = None
    dictionary: Path | None = None
    stopwords: Path | None = None
    abbreviations: Path | None = None
    manual_labels: Path | None = None


class SamplerConfig(_Section):
    J: int = 300
    psi_range: tuple[float, float] = (-0.25, 0.25)
    a_range: tuple[float, float] = (-0.25, 0.25)
    delta_range: tuple[float, float] = (0.02, 0.08)
    rho_range: tuple[float, float] = (0.0, 0.04)
    f_concentration: float = 5.0
    corr_psi_a: float = 0.0
    lambda0: float = 0.7
    lambda1: float = 0.3
    sigma: float = 2.0
    u_N: float = -0.25
    beta: float = 1.0 / 1.05


class SimulateConfig(_Section):
    n_workers: int = 50_000
    n_periods: int = 10
    wage_noise_sd: float = 0.05
    worker_effect_sd: float = 0.3
    demographics: dict[str, float] = Field(default_factory=lambda: {
        "F/1": 0.15, "F/2": 0.2, "F/3": 0.15, "M/1": 0.15, "M/2": 0.2, "M/3": 0.15})
    economy: SamplerConfig = SamplerConfig()
    year_education_trend: float = 0.01
    age_coefs: tuple[float, float] = (-4e-4, 5e-6)
    n_industries: int = 8
    n_locations: int = 10
    n_occupations: int = 12
    ads_per_employer: int = 10
    attribute_base_range: tuple[float, float] = (0.05, 0.5)
    attribute_loading: float = 0.8
    base_date: str = "2010-01-01"


class FlowsConfig(_Section):
    gap_days: int = 31
    stability_filter: bool = True
    min_periods: int = 2
    min_nonsingleton: float = 5.0


class ClusterConfig(_Section):
    enabled: bool = True
    divisor: int = 50
    G: int | None = None
    n_init: int = 10
    max_iter: int = 500
    n_locations: int = 10


class EstimateConfig(_Section):
    tol: float = 1e-10
    ftol: float = 1e-10
    max_iter: int = 2_000
    max_rounds: int = 50
    round_tol: float = 1e-2
    shrinkage: bool = True
    probe_iter: int = 60
    akm_tol: float = 1e-10
    akm_iter_lim: int = 100_000
    group_by: Literal["gender", "education"] | None = None


class TextConfig(_Section):
    ngram_max: int = 3
    top_k: int = 200


class RegressConfig(_Section):
    regressors: Literal["category", "attribute"] = "category"
    include_word_count: bool = True
    controls: list[Literal["industry", "occupation", "location"]] = Field(
        default_factory=lambda: ["industry", "occupation", "location"])
    forward_steps: int = 10
    logit_cells: list[Literal["occupation", "location", "industry"]] = Field(default_factory=lambda: ["occupation"])
    min_cell: int = 5
    link_window_days: int = 183


class CounterfactualConfig(_Section):
    scenarios: dict[str, list[str]] = Field(default_factory=lambda: {
        "pay": ["pay"], "nonpay": ["nonpay"], "pay_nonpay": ["pay", "nonpay"]})
    logistic: bool = False


class RunConfig(_Section):
    seed: int = 0
    stages: list[str] = Field(default_factory=list)
    paths: PathsConfig = PathsConfig()
    simulate: SimulateConfig = SimulateConfig()
    flows: FlowsConfig = FlowsConfig()
    cluster: ClusterConfig = ClusterConfig()
    estimate: EstimateConfig = EstimateConfig()
    text: TextConfig = TextConfig()
    regress: RegressConfig = RegressConfig()
    counterfactual: CounterfactualConfig = CounterfactualConfig()

    @field_validator("stages")
    @classmethod
    def _known_stages(cls, v):
        bad = [s for s in v if s not in STAGES]
        if bad:
            raise ValueError(f"unknown stages {bad}; choose from {list(STAGES)}")
        return v

    def echo(self) -> dict:
        return self.model_dump(mode="json")


def _resolve(cfg: RunConfig, base: Path) -> RunConfig:
    paths = {k: (base / v if v is not None and not Path(v).is_absolute() else v)
             for k, v in cfg.paths.model_dump().items()}
    for key in ("panel", "ads", "establishments", "dictionary", "stopwords", "abbreviations", "manual_labels"):
        p = paths[key]
        if p is not None and not Path(p).exists():
            raise ConfigurationError(f"paths.{key} does not exist: {p}")
    return cfg.model_copy(update={"paths": PathsConfig(**paths)})


def load_config(source, overrides: dict | None = None) -> RunConfig:
    """Read a YAML file (or take a mapping) into a validated :class:`RunConfig`.

    Relative paths are taken relative to the file's directory; input files
    named in ``paths`` must exist.
    """
    if isinstance(source, (str, Path)):
        path = Path(source)
        try:
            data = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"invalid YAML in {path}: {exc}") from exc
        base = path.parent
    else:
        data, base = dict(source or {}), Path.cwd()
    if not isinstance(data, dict):
        raise ConfigurationError("config root must be a mapping")
    for k, v in (overrides or {}).items():
        data[k] = v
    try:
        cfg = RunConfig(**data)
    except ValidationError as exc:
        raise ConfigurationError(str(exc)) from exc
    return _resolve(cfg, base)


DEMO_CONFIG = """\
# Small end-to-end run on a simulated economy.
seed: 7
stages: [simulate, extract, cluster, estimate, regress, counterfactual, validate]
paths:
  output_dir: demo_output
simulate:
  n_workers: 50000
  n_periods: 10
  ads_per_employer: 10
  economy:
    J: 100
    corr_psi_a: -0.6
cluster:
  enabled: false
regress:
  regressors: category
  controls: [industry]
  forward_steps: 5
"""
