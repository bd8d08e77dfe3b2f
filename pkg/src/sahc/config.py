"""key=value run configuration: dotted sections (model., loss., train.) parsed
into the typed config dataclasses, with --set command-line overrides applied on
top. Unknown keys are rejected by name.
"""

from __future__ import annotations

from dataclasses import dataclass, fields as dc_fields
from pathlib import Path

from .data import DataError, SyntheticSpec
from .losses import LossConfig
from .model import ConfigError, ModelConfig
from .training import TrainConfig

# config-file spelling -> dataclass field, per section
_ALIASES = {
    "loss": {"lambda": "lamb"},
}


def _coerce(raw: str, py_type) -> object:
    if py_type is bool:
        low = raw.strip().lower()
        if low in ("true", "1", "yes", "on"):
            return True
        if low in ("false", "0", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return py_type(raw)


def parse_kv_lines(text: str, source: str = "config") -> dict[str, str]:
    out: dict[str, str] = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{ln}: expected key=value, got {line!r}")
        key, val = line.split("=", 1)
        out[key.strip()] = val.strip()
    return out


@dataclass
class RunConfig:
    model: ModelConfig
    loss: LossConfig
    train: TrainConfig


def _apply(section: str, target, kv: dict[str, str]) -> None:
    by_name = {f.name: f for f in dc_fields(type(target))}
    aliases = _ALIASES.get(section, {})
    for key, raw in kv.items():
        name = aliases.get(key, key)
        if name not in by_name:
            raise ConfigError(f"unknown config key {section}.{key}")
        f = by_name[name]
        py_type = {"int": int, "float": float, "bool": bool, "str": str}.get(
            f.type if isinstance(f.type, str) else f.type.__name__, str)
        try:
            setattr(target, name, _coerce(raw, py_type))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {section}.{key}: {e}")


def build_run_config(kv: dict[str, str], overrides: list[str] = ()) -> RunConfig:
    """Assemble the three config sections; overrides are later 'sec.key=value'
    strings that win over file contents."""
    merged = dict(kv)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        merged[key.strip()] = val.strip()

    sections: dict[str, dict[str, str]] = {"model": {}, "loss": {}, "train": {}}
    for key, val in merged.items():
        if "." not in key:
            raise ConfigError(f"unknown config key {key} (expected section.key)")
        sec, sub = key.split(".", 1)
        if sec not in sections:
            raise ConfigError(f"unknown config key {key}")
        sections[sec][sub] = val

    cfg = RunConfig(model=ModelConfig(), loss=LossConfig(), train=TrainConfig())
    _apply("model", cfg.model, sections["model"])
    _apply("loss", cfg.loss, sections["loss"])
    _apply("train", cfg.train, sections["train"])
    if "d_ff" not in sections["model"]:  # keep the 4*D default in step with D
        cfg.model.d_ff = 4 * cfg.model.d
    cfg.model.validate()
    return cfg


def load_run_config(path, overrides: list[str] = ()) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return build_run_config(parse_kv_lines(path.read_text(), source=path.name),
                            overrides)


def load_synth_spec(path) -> SyntheticSpec:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"spec file not found: {path}")
    kv = parse_kv_lines(path.read_text(), source=path.name)
    spec = SyntheticSpec()
    by_name = {f.name: f for f in dc_fields(SyntheticSpec)}
    for key, raw in kv.items():
        if key not in by_name:
            raise ConfigError(f"unknown spec key {key}")
        f = by_name[key]
        py_type = {"int": int, "float": float}.get(
            f.type if isinstance(f.type, str) else f.type.__name__, str)
        try:
            setattr(spec, key, py_type(raw))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad value for {key}: {e}")
    try:
        spec.validate()
    except DataError as e:  # spec-file mistakes are configuration errors
        raise ConfigError(str(e))
    return spec
