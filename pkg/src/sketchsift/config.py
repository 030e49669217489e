"""Run configuration: a flat key=value text file with dotted keys.

Example:

    seed=7
    out_dir=runs/desk
    data.n_pairs=200
    data.noise_strokes=3
    embed.input_hw=32
    ppo.epochs=40
    reward.variant=combined
    paths.dataset=runs/desk/dataset

Unknown keys are rejected; input paths must exist when set. Subcommand flags
override file values.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, get_args, get_origin

from .embedder import EmbedNetConfig
from .errors import UsageError
from .ppo import PPOConfig, RewardConfig
from .selector import SelectorConfig


@dataclass
class DataConfig:
    n_pairs: int = 200
    jitter_sigma: float = 1.2
    n_clean_min: int = 4
    n_clean_max: int = 6
    noise_strokes: int = 3
    canvas: int = 256
    fractions: tuple[float, ...] = (0.7, 0.15, 0.15)
    noise_points_min: int = 3
    noise_points_max: int = 6
    noise_step_max: float = 8.0


@dataclass
class EvalConfig:
    noise_strokes: int = 3
    tau_list: tuple[float, ...] = (0.05, 0.1, 0.2)
    completion_step: float = 0.05
    completion_unit: str = "stroke"
    k_cap: int = 16
    oracle_sketches: int = 100
    analysis_pairs: int = 280
    gate_junk_fraction: float = 0.5  # pairless doodle episodes added to gating
    gate_clean_min: int = 5  # clean strokes per gating-episode sketch
    gate_clean_max: int = 7


@dataclass
class PathsConfig:
    dataset: str = ""
    embed_checkpoint: str = ""
    selector_checkpoint: str = ""


@dataclass
class ServeConfig:
    host: str = "127.0.0.1"
    port: int = 8008
    tau: float = 0.2  # default gate threshold surfaced by /score
    session_timeout_min: float = 30.0
    gallery_split: str = "test"


@dataclass
class RunConfig:
    seed: int = 7
    out_dir: str = "runs/desk"
    line_width: int = 1
    data: DataConfig = field(default_factory=DataConfig)
    embed: EmbedNetConfig = field(default_factory=EmbedNetConfig)
    embed_epochs: int = 60
    embed_patience: int = 10
    selector: SelectorConfig = field(default_factory=SelectorConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    serve: ServeConfig = field(default_factory=ServeConfig)


_SECTIONS = {
    "data": DataConfig,
    "embed": EmbedNetConfig,
    "selector": SelectorConfig,
    "ppo": PPOConfig,
    "reward": RewardConfig,
    "eval": EvalConfig,
    "paths": PathsConfig,
    "serve": ServeConfig,
}

_INPUT_PATH_KEYS = ("paths.dataset", "paths.embed_checkpoint", "paths.selector_checkpoint")


def _parse_value(raw: str, annotation: Any, key: str) -> Any:
    origin = get_origin(annotation)
    if origin is tuple:
        inner = get_args(annotation)[0]
        parts = [p for p in raw.split(",") if p != ""]
        return tuple(_parse_value(p.strip(), inner, key) for p in parts)
    if annotation is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"{key}: expected a boolean, got {raw!r}")
    if annotation is int:
        try:
            return int(raw)
        except ValueError:
            raise UsageError(f"{key}: expected an integer, got {raw!r}") from None
    if annotation is float:
        try:
            return float(raw)
        except ValueError:
            raise UsageError(f"{key}: expected a number, got {raw!r}") from None
    return raw


def _field_map(cls) -> dict[str, Any]:
    return {f.name: f.type for f in fields(cls)}


def _resolve_types() -> dict[str, Any]:
    """key -> python type for every legal config key."""
    typemap: dict[str, Any] = {}
    import typing

    hints = typing.get_type_hints(RunConfig)
    for name, hint in hints.items():
        if name in _SECTIONS:
            for sub, sub_hint in typing.get_type_hints(_SECTIONS[name]). items():
                typemap[f"{name}.{sub}"] = sub_hint
        else:
            typemap[name] = hint
    return typemap


_TYPEMAP = _resolve_types()


def set_key(config: RunConfig, key: str, raw: str) -> None:
    if key not in _TYPEMAP:
        raise UsageError(f"unknown config key {key!r}")
    value = _parse_value(raw, _TYPEMAP[key], key)
    if "." in key:
        section, name = key.split(".", 1)
        setattr(getattr(config, section), name, value)
    else:
        setattr(config, key, value)


def parse_config_text(text: str, config: RunConfig | None = None) -> RunConfig:
    config = config or RunConfig()
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise UsageError(f"line {lineno}: expected key=value, got {stripped!r}")
        key, raw = stripped.split("=", 1)
        set_key(config, key.strip(), raw.strip())
    # re-run the section validations on the final values
    for section, cls in _SECTIONS.items():
        obj = getattr(config, section)
        if hasattr(obj, "__post_init__"):
            obj.__post_init__()
    return config


def load_config(path: Path | str | None, check_paths: bool = True) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file {path} does not exist")
    config = parse_config_text(path.read_text())
    if check_paths:
        validate_input_paths(config)
    return config


def validate_input_paths(config: RunConfig) -> None:
    for key in _INPUT_PATH_KEYS:
        section, name = key.split(".")
        value = getattr(getattr(config, section), name)
        if value and not Path(value).exists():
            raise UsageError(f"{key}={value!r} does not exist")


def default_config_text() -> str:
    """The full key set with default values, suitable as a starting file."""
    lines = ["# sketchsift run configuration (key=value, dotted sections)"]
    config = RunConfig()
    for key in sorted(_TYPEMAP):
        if "." in key:
            section, name = key.split(".", 1)
            value = getattr(getattr(config, section), name)
        else:
            value = getattr(config, key)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
