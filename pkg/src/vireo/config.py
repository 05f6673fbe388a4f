"""Plain-text run configuration: ``key = value`` lines under [section] headers.

Unknown sections or keys fail with the offending name and line number.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .training import TaskConfig, TrainConfig


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in ("true", "yes", "1", "on"):
        return True
    if lowered in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


_CASTERS = {int: int, float: float, bool: _parse_bool, str: str}


def parse_config_text(text: str, origin: str = "<config>") -> dict[str, dict[str, tuple[str, int]]]:
    sections: dict[str, dict[str, tuple[str, int]]] = {}
    current: str | None = None
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith(("#", ";")):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            sections.setdefault(current, {})
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {line!r}")
        if current is None:
            raise ConfigError(f"{origin}:{lineno}: key outside any [section]")
        key, _, value = line.partition("=")
        sections[current][key.strip()] = (value.strip(), lineno)
    return sections


@dataclass
class RunSettings:
    task: TaskConfig
    train: TrainConfig
    model_overrides: dict


_MODEL_KEYS = {"n_prompts": int, "decoder_layers": int, "temperature": float,
               "prompt_chain": str, "use_coarse_prior": _parse_bool}


def load_run_config(path) -> RunSettings:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    sections = parse_config_text(path.read_text(), origin=str(path))

    schemas = {
        "task": {f.name: f.type for f in fields(TaskConfig)},
        "train": {f.name: f.type for f in fields(TrainConfig)},
    }
    task_kwargs: dict = {}
    train_kwargs: dict = {}
    model_overrides: dict = {}
    for section, entries in sections.items():
        if section == "model":
            for key, (raw, lineno) in entries.items():
                if key not in _MODEL_KEYS:
                    raise ConfigError(f"{path}:{lineno}: unknown key '{key}' in [model]")
                try:
                    model_overrides[key] = _MODEL_KEYS[key](raw)
                except ValueError as exc:
                    raise ConfigError(f"{path}:{lineno}: bad value for '{key}': {exc}") from None
            continue
        if section not in schemas:
            raise ConfigError(f"{path}: unknown section [{section}]")
        target = task_kwargs if section == "task" else train_kwargs
        for key, (raw, lineno) in entries.items():
            if key not in schemas[section] or key == "betas":
                raise ConfigError(f"{path}:{lineno}: unknown key '{key}' in [{section}]")
            anno = schemas[section][key]
            caster = {"int": int, "float": float, "bool": _parse_bool, "str": str}.get(
                anno if isinstance(anno, str) else anno.__name__)
            if caster is None:
                raise ConfigError(f"{path}:{lineno}: key '{key}' is not settable")
            try:
                target[key] = caster(raw)
            except ValueError as exc:
                raise ConfigError(f"{path}:{lineno}: bad value for '{key}': {exc}") from None

    task_cfg = TaskConfig(**task_kwargs)
    train_cfg = TrainConfig(**train_kwargs)
    task_cfg.validate()
    train_cfg.validate()
    return RunSettings(task=task_cfg, train=train_cfg, model_overrides=model_overrides)


def build_model_config(settings: RunSettings, use_coarse_default: bool = True) -> ModelConfig:
    base = ModelConfig(layers=settings.task.layers, d=settings.task.d,
                       d_depth=settings.task.d_depth,
                       use_coarse_prior=use_coarse_default)
    return replace(base, **settings.model_overrides)
