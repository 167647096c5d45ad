"""Declarative experiment configs (YAML) and the run manifest.

A config file is one YAML document with a ``schema_version`` plus sections
for data, per-site noise, model, federation, and correction. Parsing fills
every default so the resolved config round-trips exactly; cross-field rules
(noise list length vs site count, mode-required constants) are checked here.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import __version__
from .corrupt import NoiseSpec
from .correction import CorrectionPolicy
from .errors import ConfigurationError
from .fed import FederationConfig
from .model import UNetConfig
from .synth import SplitSpec, SynthConfig

SCHEMA_VERSION = 1

DATA_KINDS = ("synth", "directory", "manifest")

# defaults chosen by design, not by the source data; echoed into every manifest
DESIGN_DEFAULTS = {
    "norm_layer": "batchnorm",
    "conv_kernel": 3,
    "upsampling": "transposed_conv_2x2",
    "structuring_element": "face-connected cross, iterated",
    "component_connectivity": "full (8 in 2D, 26 in 3D)",
    "count_rounding": "half away from zero",
    "validation_metric_default": "v_dice",
    "teacher_promotion": "strict improvement",
    "ema_decay_default": 0.99,
    "intensity_normalization": "per-channel z-score over nonzero brain voxels",
    "dhlc_teacher_resync": "per round, to the distributed central student",
}


@dataclass
class DataConfig:
    kind: str = "synth"
    synth: SynthConfig = field(default_factory=SynthConfig)
    split: SplitSpec = field(default_factory=lambda: SplitSpec(20, 9, 24))
    path: str | None = None  # dataset directory or ingest manifest
    modality_order: tuple[str, ...] = ("flair", "t1")

    def __post_init__(self):
        if self.kind not in DATA_KINDS:
            raise ConfigurationError(f"data.kind must be one of {DATA_KINDS}")
        if self.kind in ("directory", "manifest") and not self.path:
            raise ConfigurationError(f"data.kind={self.kind} requires data.path")


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    name: str = "experiment"
    seed: int = 0
    out_dir: str | None = None
    data: DataConfig = field(default_factory=DataConfig)
    noise: list[NoiseSpec] = field(default_factory=list)
    model: UNetConfig = field(default_factory=UNetConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)

    def __post_init__(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigurationError(
                f"unsupported schema_version {self.schema_version} (expected {SCHEMA_VERSION})"
            )
        n_sites = self.federation.n_sites
        if self.data.kind == "synth" and self.data.synth.n_sites != n_sites:
            raise ConfigurationError(
                f"data.synth.n_sites={self.data.synth.n_sites} disagrees with "
                f"federation.n_sites={n_sites}"
            )
        if self.noise and len(self.noise) != n_sites:
            raise ConfigurationError(
                f"noise lists {len(self.noise)} sites but federation.n_sites={n_sites}"
            )

    def site_noise(self) -> list[NoiseSpec]:
        if self.noise:
            return list(self.noise)
        return [NoiseSpec() for _ in range(self.federation.n_sites)]

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["data"]["modality_order"] = list(self.data.modality_order)
        return out


def _take(section: dict, key_path: str, allowed: set[str]) -> None:
    extra = set(section) - allowed
    if extra:
        raise ConfigurationError(f"{key_path}: unknown keys {sorted(extra)}")


def _build(cls, section: dict, key_path: str, **overrides):
    fields = {f.name for f in dataclasses.fields(cls)}
    _take(section, key_path, fields)
    kwargs = dict(section)
    kwargs.update(overrides)
    # YAML lists arrive as lists; tuple-typed fields want tuples
    for f in dataclasses.fields(cls):
        if f.name in kwargs and isinstance(kwargs[f.name], list) and "tuple" in str(f.type):
            kwargs[f.name] = tuple(kwargs[f.name])
    try:
        return cls(**kwargs)
    except ConfigurationError as exc:
        raise ConfigurationError(f"{key_path}: {exc}") from exc
    except TypeError as exc:
        raise ConfigurationError(f"{key_path}: {exc}") from exc


def config_from_dict(raw: dict, source: str = "<config>") -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{source}: top level must be a mapping")
    _take(
        raw,
        source,
        {"schema_version", "name", "seed", "out_dir", "data", "noise", "model",
         "federation", "correction"},
    )
    data_raw = dict(raw.get("data", {}))
    synth_raw = data_raw.pop("synth", {})
    split_raw = data_raw.pop("split", None)
    synth_cfg = _build(SynthConfig, dict(synth_raw), f"{source}: data.synth")
    if split_raw is None:
        split = SplitSpec(train_per_site=synth_cfg.subjects_per_site, val=9, test=24)
    else:
        split = _build(SplitSpec, dict(split_raw), f"{source}: data.split")
    data_cfg = _build(DataConfig, data_raw, f"{source}: data", synth=synth_cfg, split=split)

    noise = [
        _build(NoiseSpec, dict(entry), f"{source}: noise[{i}]")
        for i, entry in enumerate(raw.get("noise", []))
    ]
    model_cfg = _build(UNetConfig, dict(raw.get("model", {})), f"{source}: model")
    policy = _build(CorrectionPolicy, dict(raw.get("correction", {})), f"{source}: correction")
    fed_cfg = _build(
        FederationConfig,
        dict(raw.get("federation", {})),
        f"{source}: federation",
        policy=policy,
        seed=int(raw.get("seed", 0)),
    )
    try:
        return ExperimentConfig(
            schema_version=int(raw.get("schema_version", SCHEMA_VERSION)),
            name=str(raw.get("name", "experiment")),
            seed=int(raw.get("seed", 0)),
            out_dir=raw.get("out_dir"),
            data=data_cfg,
            noise=noise,
            model=model_cfg,
            federation=fed_cfg,
        )
    except ConfigurationError as exc:
        raise ConfigurationError(f"{source}: {exc}") from exc


def load_config(path: str | Path, seed_override: int | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        where = f"{path}:{mark.line + 1}:{mark.column + 1}" if mark else str(path)
        raise ConfigurationError(f"{where}: {exc.problem}") from exc
    if raw is None:
        raw = {}
    if seed_override is not None:
        raw["seed"] = seed_override
    return config_from_dict(raw, source=str(path))


def serialize_config(cfg: ExperimentConfig) -> str:
    """Resolved config as YAML; parsing it back yields an identical config."""
    resolved = cfg.to_dict()
    # federation seed/policy are owned by the top-level seed and correction section
    correction = resolved["federation"].pop("policy")
    resolved["federation"].pop("seed")
    resolved["correction"] = correction
    return yaml.safe_dump(resolved, sort_keys=False)


@dataclass
class RunManifest:
    """Everything needed to reproduce a run bit-for-bit in deterministic mode."""

    config: dict
    seed: int
    site_seeds: list[int]
    deterministic: bool
    package_version: str = __version__
    schema_version: int = SCHEMA_VERSION
    design_defaults: dict = field(default_factory=lambda: dict(DESIGN_DEFAULTS))
    started_unix: float = 0.0
    duration_s: float = 0.0

    @classmethod
    def start(cls, cfg: ExperimentConfig, deterministic: bool) -> "RunManifest":
        return cls(
            config=cfg.to_dict(),
            seed=cfg.seed,
            site_seeds=[int(s) for s in cfg.federation.resolved_site_seeds()],
            deterministic=deterministic,
            started_unix=time.time(),
        )

    def finish(self, path: str | Path) -> None:
        self.duration_s = time.time() - self.started_unix
        Path(path).write_text(json.dumps(dataclasses.asdict(self), indent=2))
