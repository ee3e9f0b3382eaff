"""Run configuration: flat `key = value` text files with dotted section prefixes.

Every key is overridable on the command line as --key=value, and the
PVILAB_SEED environment variable overrides the configured training seed
(explicit CLI overrides still win). Unknown keys and malformed values are
configuration errors, which the CLI reports with exit code 2.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, asdict, replace, fields

from .model import DiTConfig
from .taskbench import TaskSpec
from .injection import VARIANTS

AUX_KINDS = ("none", "static", "temporal", "combined")


class ConfigError(ValueError):
    """Bad key, bad value, or inconsistent configuration."""


@dataclass(frozen=True)
class TrainParams:
    steps: int = 1200
    batch: int = 32
    lr: float = 2e-3
    optimizer: str = "adamw"
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or self.batch < 1:
            raise ConfigError("train.steps and train.batch must be >= 1")
        if self.optimizer not in ("sgd", "adamw"):
            raise ConfigError(f"train.optimizer must be sgd or adamw, got {self.optimizer!r}")


@dataclass(frozen=True)
class Flags:
    freeze_projector: bool = False
    zero_init: bool = True


@dataclass(frozen=True)
class AuxEncoderConfig:
    kind: str = "none"
    out_len: int = 8
    out_dim: int = 48
    frames: int = 8
    seed: int = 11

    def __post_init__(self):
        if self.kind not in AUX_KINDS:
            raise ConfigError(f"encoder.kind must be one of {AUX_KINDS}, got {self.kind!r}")

    @property
    def tokens(self) -> int:
        return 2 * self.out_len if self.kind == "combined" else self.out_len


@dataclass(frozen=True)
class VlmConfig:
    seed: int = 13
    bottleneck: int = 6
    gain: float = 12.0


@dataclass
class RunConfig:
    variant: str = "Baseline"
    sampler_k: int = 16
    task: TaskSpec = None
    dit: DiTConfig = None
    encoder: AuxEncoderConfig = None
    vlm: VlmConfig = None
    train: TrainParams = None
    flags: Flags = None

    def __post_init__(self):
        if self.task is None:
            self.task = TaskSpec(family="reach")
        if self.dit is None:
            self.dit = DiTConfig()
        if self.encoder is None:
            self.encoder = AuxEncoderConfig()
        if self.vlm is None:
            self.vlm = VlmConfig()
        if self.train is None:
            self.train = TrainParams()
        if self.flags is None:
            self.flags = Flags()

    def finalize(self) -> "RunConfig":
        """Validate cross-section consistency and derive the aux geometry."""
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.sampler_k < 1:
            raise ConfigError(f"sampler_k must be >= 1, got {self.sampler_k}")
        if self.dit.horizon != self.task.horizon:
            raise ConfigError(
                f"dit.horizon ({self.dit.horizon}) must equal task.horizon ({self.task.horizon})")
        if self.dit.state_dim != self.task.state_dim:
            raise ConfigError(
                f"dit.state_dim ({self.dit.state_dim}) must equal task.state_dim ({self.task.state_dim})")
        if self.dit.action_dim != 2:
            raise ConfigError("tasks are planar: dit.action_dim must be 2")
        if self.variant != "Baseline":
            if self.encoder.kind == "none":
                raise ConfigError(f"variant {self.variant} needs encoder.kind != none")
            tokens, width = self.encoder.tokens, self.encoder.out_dim
            if self.dit.aux_len not in (0, tokens):
                raise ConfigError(
                    f"dit.aux_len ({self.dit.aux_len}) conflicts with encoder tokens ({tokens})")
            if self.dit.aux_raw_dim not in (0, width):
                raise ConfigError(
                    f"dit.aux_raw_dim ({self.dit.aux_raw_dim}) conflicts with encoder out_dim ({width})")
            self.dit = replace(self.dit, aux_len=tokens, aux_raw_dim=width)
        return self


_SECTIONS = {
    "task": TaskSpec,
    "dit": DiTConfig,
    "encoder": AuxEncoderConfig,
    "vlm": VlmConfig,
    "train": TrainParams,
    "flags": Flags,
}
_SCALARS = {"variant": str, "sampler_k": int}


def _field_types(cls) -> dict[str, type]:
    return {f.name: f.type if isinstance(f.type, type) else _PY_TYPES[f.type] for f in fields(cls)}


_PY_TYPES = {"int": int, "float": float, "bool": bool, "str": str,
             "int | None": int, "str | None": str}


def _coerce(key: str, raw: str, target: type):
    raw = raw.strip()
    try:
        if target is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if target is int:
            return int(raw)
        if target is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {target.__name__}") from None


def default_flat() -> dict[str, str]:
    return config_to_flat(RunConfig())


def config_to_flat(cfg: RunConfig) -> dict[str, str]:
    flat: dict[str, str] = {"variant": cfg.variant, "sampler_k": str(cfg.sampler_k)}
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for key, value in asdict(obj).items():
            if isinstance(value, bool):
                value = "true" if value else "false"
            flat[f"{section}.{key}"] = str(value)
    return flat


def flat_to_config(flat: dict[str, str]) -> RunConfig:
    known = dict(default_flat())
    for key in flat:
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}")
    merged = {**known, **flat}
    kwargs = {}
    for name, target in _SCALARS.items():
        kwargs[name] = _coerce(name, merged[name], target)
    for section, cls in _SECTIONS.items():
        types = _field_types(cls)
        section_kwargs = {}
        for field_name, target in types.items():
            section_kwargs[field_name] = _coerce(f"{section}.{field_name}",
                                                 merged[f"{section}.{field_name}"], target)
        try:
            kwargs[section] = cls(**section_kwargs)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return RunConfig(**kwargs).finalize()


def parse_config_text(text: str) -> dict[str, str]:
    flat: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {line!r}")
        key, _, value = stripped.partition("=")
        flat[key.strip()] = value.strip()
    return flat


def parse_overrides(pairs) -> dict[str, str]:
    """--key=value strings (leading dashes optional) into a flat dict."""
    flat: dict[str, str] = {}
    for pair in pairs:
        item = pair.lstrip("-")
        if "=" not in item:
            raise ConfigError(f"override {pair!r} is not of the form --key=value")
        key, _, value = item.partition("=")
        flat[key.strip()] = value.strip()
    return flat


def load_config(path=None, overrides=(), env=None) -> RunConfig:
    """File < PVILAB_SEED < explicit overrides, then validation."""
    env = os.environ if env is None else env
    flat: dict[str, str] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                flat.update(parse_config_text(fh.read()))
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from None
    if "PVILAB_SEED" in env:
        flat["train.seed"] = env["PVILAB_SEED"]
    flat.update(parse_overrides(overrides))
    return flat_to_config(flat)


def dump_config(cfg: RunConfig, path) -> None:
    flat = config_to_flat(cfg)
    lines = [f"{key} = {value}" for key, value in flat.items()]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
