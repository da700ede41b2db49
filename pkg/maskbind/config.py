"""
config.py - sectioned run configuration, environment overrides and config hash
-------------------------------------------------------------------------------
File format (documented key by key in docs/config.md):

  [data]       scene canvas, entity and dataset sizes
  [codec]      patchify ratios
  [features]   audio feature / text embedding sizes
  [model]      backbone, mask heads, audio injectors
  [train]      optimisation and loss weights
  [sample]     denoising steps, skip, guidance, binding mode
  [eval]       test-set size and ablation modes

Values are plain `key = value`; tuples are comma-separated and optional values accept
`none`. After `.env` is loaded, variables named SECTION__KEY (e.g. TRAIN__LR=1e-3)
override the file. Unknown sections and keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import logging
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Type, TypeVar, Union

from dotenv import load_dotenv

from maskbind.backbone.model import ModelConfig
from maskbind.codec import CodecConfig
from maskbind.errors import ConfigError
from maskbind.eval.ablation import EvalConfig
from maskbind.features import FeatureConfig
from maskbind.sampler import SampleConfig
from maskbind.synthgen.scene import SceneConfig
from maskbind.trainer import TrainConfig

logger = logging.getLogger(__name__)

T = TypeVar("T")

# filled from [codec] and [features]; never set directly
DERIVED_MODEL_KEYS = ("latent_channels", "audio_dim", "text_dim", "text_seed", "vocab_size")


@dataclass
class DataConfig(SceneConfig):
    n_train: int = 512
    n_test: int = 16
    n_entities: int = 2
    invalid_fraction: float = 0.0

    def validate(self) -> None:
        super().validate()
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("n_train and n_test must be >= 1", "data.n_train")
        if not 1 <= self.n_entities <= 3:
            raise ConfigError(f"n_entities must be in 1..3, got {self.n_entities}",
                              "data.n_entities")
        if not 0.0 <= self.invalid_fraction <= 1.0:
            raise ConfigError("invalid_fraction must be in [0, 1]", "data.invalid_fraction")

    def scene(self) -> SceneConfig:
        names = {f.name for f in dataclasses.fields(SceneConfig)}
        return SceneConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})


SECTIONS: Dict[str, type] = {
    "data": DataConfig,
    "codec": CodecConfig,
    "features": FeatureConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "sample": SampleConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    codec: CodecConfig = field(default_factory=CodecConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        self.data.validate()
        self.features.validate()
        self.model.validate()
        self.train.validate()
        self.sample.validate()
        self.eval.validate()
        if self.data.n_entities > self.model.max_entities:
            raise ConfigError(
                f"n_entities {self.data.n_entities} exceeds max_entities "
                f"{self.model.max_entities}", "model.max_entities")
        self.codec.latent_grid(self.data.frames, self.data.height, self.data.width)
        self.codec.latent_grid(self.codec.ct, self.data.ref_size, self.data.ref_size)
        return self

    def to_dict(self) -> Dict[str, Dict[str, Any]]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON dump (sorted keys)."""
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def to_ini(self) -> str:
        lines = []
        for name, values in self.to_dict().items():
            lines.append(f"[{name}]")
            for key, value in values.items():
                if name == "model" and key in DERIVED_MODEL_KEYS:
                    continue
                lines.append(f"{key} = {format_value(value)}")
            lines.append("")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# Value coercion
# ---------------------------------------------------------------------------


def format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def coerce(text: str, hint: Any, key_path: str) -> Any:
    """Parse `text` into the type named by the dataclass annotation `hint`."""
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)

    if origin is Union:
        inner = [a for a in args if a is not type(None)]
        if text.lower() in ("none", "null", ""):
            return None
        return coerce(text, inner[0], key_path)

    if origin in (tuple, Tuple):
        items = [p for p in (s.strip() for s in text.split(",")) if p]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(coerce(p, args[0], key_path) for p in items)
        if args and len(items) != len(args):
            raise ConfigError(f"expected {len(args)} comma-separated values, got {text!r}",
                              key_path)
        return tuple(coerce(p, a, key_path) for p, a in zip(items, args or [str] * len(items)))

    try:
        if hint is bool:
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
    except ValueError as e:
        raise ConfigError(f"cannot parse {text!r} as {hint.__name__}", key_path) from e
    return text


def build_section(cls: Type[T], section: str, values: Mapping[str, str]) -> T:
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}  # type: ignore[arg-type]
    kwargs = {}
    for key, raw in values.items():
        key_path = f"{section}.{key}"
        if key not in names:
            raise ConfigError("unknown key", key_path)
        kwargs[key] = coerce(raw, hints[key], key_path)
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(str(e), section) from e


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> Dict[str, Dict[str, str]]:
    """SECTION__KEY variables whose section is known, grouped by section."""
    environ = os.environ if environ is None else environ
    out: Dict[str, Dict[str, str]] = {}
    for name, value in environ.items():
        if "__" not in name:
            continue
        section, key = name.split("__", 1)
        section = section.lower()
        if section in SECTIONS:
            out.setdefault(section, {})[key.lower()] = value
    return out


def parse_sections(sections: Mapping[str, Mapping[str, str]]) -> RunConfig:
    unknown = [s for s in sections if s not in SECTIONS]
    if unknown:
        raise ConfigError(f"unknown section(s) {unknown}", unknown[0])
    model_values = dict(sections.get("model", {}))
    for key in DERIVED_MODEL_KEYS:
        if key in model_values:
            raise ConfigError("derived from [codec]/[features]; do not set it", f"model.{key}")

    data = build_section(DataConfig, "data", sections.get("data", {}))
    codec = build_section(CodecConfig, "codec", sections.get("codec", {}))
    features = build_section(FeatureConfig, "features", sections.get("features", {}))
    model = build_section(ModelConfig, "model", model_values)
    model = dataclasses.replace(
        model, latent_channels=codec.latent_channels, audio_dim=features.audio_dim,
        text_dim=features.text_dim, text_seed=features.seed)
    return RunConfig(
        data=data,
        codec=codec,
        features=features,
        model=model,
        train=build_section(TrainConfig, "train", sections.get("train", {})),
        sample=build_section(SampleConfig, "sample", sections.get("sample", {})),
        eval=build_section(EvalConfig, "eval", sections.get("eval", {})),
    ).validate()


def read_ini(path: Path) -> Dict[str, Dict[str, str]]:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # type: ignore[assignment]
    try:
        with Path(path).open(encoding="utf-8") as f:
            parser.read_file(f)
    except configparser.Error as e:
        raise ConfigError(f"malformed config file {path}: {e}") from e
    return {s: dict(parser.items(s)) for s in parser.sections()}


def load_config(path: Optional[Path] = None, environ: Optional[Mapping[str, str]] = None,
                dotenv: bool = True) -> RunConfig:
    """Defaults, then the file (if any), then SECTION__KEY environment overrides."""
    if dotenv and environ is None:
        load_dotenv()
    sections: Dict[str, Dict[str, str]] = read_ini(path) if path is not None else {}
    for section, values in env_overrides(environ).items():
        for key, value in values.items():
            logger.info("environment override %s.%s = %s", section, key, value)
        sections.setdefault(section, {}).update(values)
    return parse_sections(sections)


__all__ = [
    "DataConfig", "RunConfig", "SECTIONS", "DERIVED_MODEL_KEYS", "format_value", "coerce",
    "build_section", "env_overrides", "parse_sections", "read_ini", "load_config",
]
