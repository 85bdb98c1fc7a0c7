"""Experiment configuration: one TOML file drives the whole pipeline.

Every stage reads its parameters from this structure; a digest of the
resolved config plus the global seed is embedded in all output files so
artifacts from different runs can never be silently mixed.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .augment import AugmentRanges
from .errors import ConfigError
from .nst import DEFAULT_STYLE_LAYERS

ENV_SEED = "STYLEFORGE_SEED"


@dataclass(frozen=True)
class DatasetSection:
    root: str = "desk_run"
    per_class: int = 200
    size: int = 32


@dataclass(frozen=True)
class FeatnetSection:
    epochs: int = 8
    batch_size: int = 32
    learning_rate: float = 3e-3
    holdout_fraction: float = 0.2


@dataclass(frozen=True)
class NstSection:
    content_weight: float = 0.025
    style_weight: float = 1.0
    content_layer: str = "conv4_2"
    style_layers: tuple[str, ...] = DEFAULT_STYLE_LAYERS
    iterations: int = 100
    learning_rate: float = 0.01
    init: str = "content"
    pooling: str = "max"


@dataclass(frozen=True)
class SynthSection:
    budget: int = 400
    parallelism: int = 0  # 0 = min(4, cpu count)


@dataclass(frozen=True)
class PseudoLabelSection:
    enabled: bool = True


@dataclass(frozen=True)
class FoldsSection:
    k: int = 5
    leakage_scope: str = "test"
    baseline_pool_fraction: float = 0.2


@dataclass(frozen=True)
class TrainSection:
    architectures: tuple[str, ...] = ("mini-vgg-a",)
    regimes: tuple[str, ...] = ("without_da", "with_da")
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    dropout: float = 0.5
    patience: int = 5


@dataclass(frozen=True)
class AugmentSection:
    rotation: float = 20.0
    zoom: tuple[float, float] = (0.9, 1.1)
    shear: float = 0.1
    reflect_prob: float = 0.5

    def ranges(self) -> AugmentRanges:
        return AugmentRanges(
            rotation_deg=self.rotation,
            zoom=tuple(self.zoom),
            shear=self.shear,
            reflect_prob=self.reflect_prob,
        )


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 7
    dataset: DatasetSection = field(default_factory=DatasetSection)
    featnet: FeatnetSection = field(default_factory=FeatnetSection)
    nst: NstSection = field(default_factory=NstSection)
    synth: SynthSection = field(default_factory=SynthSection)
    pseudo_label: PseudoLabelSection = field(default_factory=PseudoLabelSection)
    folds: FoldsSection = field(default_factory=FoldsSection)
    train: TrainSection = field(default_factory=TrainSection)
    augment: AugmentSection = field(default_factory=AugmentSection)

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True, default=list)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def root(self) -> Path:
        return Path(self.dataset.root)


_SECTIONS = {
    "dataset": DatasetSection,
    "featnet": FeatnetSection,
    "nst": NstSection,
    "synth": SynthSection,
    "pseudo_label": PseudoLabelSection,
    "folds": FoldsSection,
    "train": TrainSection,
    "augment": AugmentSection,
}


def _build_section(name: str, cls, raw: dict):
    fields = {f.name for f in cls.__dataclass_fields__.values()}  # type: ignore[attr-defined]
    unknown = set(raw) - fields
    if unknown:
        raise ConfigError(f"config section [{name}] has unknown keys: {sorted(unknown)}")
    coerced = {
        key: tuple(value) if isinstance(value, list) else value
        for key, value in raw.items()
    }
    try:
        return cls(**coerced)
    except TypeError as exc:
        raise ConfigError(f"config section [{name}]: {exc}") from exc


def load_config(path: Path | str) -> ExperimentConfig:
    """Parse a TOML experiment file; unknown keys are errors."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: malformed TOML: {exc}") from exc
    top_unknown = set(raw) - set(_SECTIONS) - {"seed"}
    if top_unknown:
        raise ConfigError(f"{path}: unknown top-level keys: {sorted(top_unknown)}")
    kwargs = {}
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])
    for name, cls in _SECTIONS.items():
        if name in raw:
            kwargs[name] = _build_section(name, cls, raw[name])
    return ExperimentConfig(**kwargs)


def resolve_seed(cfg: ExperimentConfig, cli_seed: int | None = None) -> ExperimentConfig:
    """Apply seed precedence: --seed flag > STYLEFORGE_SEED env > config file."""
    seed = cfg.seed
    env = os.environ.get(ENV_SEED)
    if env is not None:
        try:
            seed = int(env)
        except ValueError as exc:
            raise ConfigError(f"{ENV_SEED} must be an integer, got {env!r}") from exc
    if cli_seed is not None:
        seed = cli_seed
    if seed == cfg.seed:
        return cfg
    return ExperimentConfig(seed=seed, **{name: getattr(cfg, name) for name in _SECTIONS})
