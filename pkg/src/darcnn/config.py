"""Sectioned key-value run configuration with environment overrides.

Every section maps onto one dataclass. An environment variable
``DARCNN_<SECTION>_<KEY>`` overrides the matching key, e.g.
``DARCNN_PIPELINE_BETA=0``.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

from darcnn.core import PipelineConfig, validate_config
from darcnn.errors import ConfigError
from darcnn.train import TrainSchedule

CONFIG_VERSION = 1
CONFIG_NAME = "config.ini"


@dataclass(frozen=True)
class PlanSettings:
    """Desk-scale experiment sizes used by the ablation harness."""
    source_count: int = 400
    target_count: int = 400
    val_count: int = 100
    seeds: tuple = (0, 1, 2)
    min_gain: float = 0.15


def _default_schedules() -> dict:
    return {
        "pretrain": TrainSchedule("pretrain", max_epochs=100, max_steps=300, learning_rate=1e-3,
                                  stop_on_plateau=False),
        "stage1": TrainSchedule("stage1", max_epochs=100, max_steps=150, stop_on_plateau=False),
        "stage2": TrainSchedule("stage2", max_epochs=100, max_steps=150, stop_on_plateau=False),
    }


@dataclass
class RunConfig:
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    schedules: dict = field(default_factory=_default_schedules)
    plan: PlanSettings = field(default_factory=PlanSettings)

    def sections(self) -> dict:
        out = {"pipeline": self.pipeline, "plan": self.plan}
        out.update(self.schedules)
        return out

    def with_seed(self, seed: int) -> "RunConfig":
        return RunConfig(self.pipeline.replace(seed=seed), dict(self.schedules), self.plan)


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse(raw: str, default, name: str):
    text = raw.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, tuple):
            items = [t for t in (p.strip() for p in text.split(",")) if t]
            elem = default[0] if default else 0.0
            return tuple(_parse(t, elem, name) for t in items)
        if text.lower() == "none":
            return None
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


_OPTIONAL_INT = {"max_steps"}


def _apply(obj, values: Mapping[str, str], section: str):
    known = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        default = getattr(obj, key)
        if key in _OPTIONAL_INT and raw.strip().lower() != "none":
            changes[key] = _parse(raw, 0, f"{section}.{key}")
        else:
            changes[key] = _parse(raw, default, f"{section}.{key}")
    return dataclasses.replace(obj, **changes) if changes else obj


def _env_overrides(env: Mapping[str, str], sections) -> dict:
    out: dict = {}
    for name, value in env.items():
        if not name.startswith("DARCNN_"):
            continue
        rest = name[len("DARCNN_"):].lower()
        for sec in sections:
            if rest.startswith(sec + "_"):
                out.setdefault(sec, {})[rest[len(sec) + 1:]] = value
                break
    return out


def load_config(path=None, env: Optional[Mapping[str, str]] = None,
                overrides: Optional[Mapping[str, Mapping[str, str]]] = None) -> RunConfig:
    """Defaults, then the file, then environment, then explicit overrides."""
    rc = RunConfig()
    layers = []
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except (OSError, configparser.Error) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        meta = dict(parser.items("meta")) if parser.has_section("meta") else {}
        if int(meta.get("version", CONFIG_VERSION)) != CONFIG_VERSION:
            raise ConfigError(f"unsupported config version {meta.get('version')}")
        layers.append({s: dict(parser.items(s)) for s in parser.sections() if s != "meta"})
    layers.append(_env_overrides(os.environ if env is None else env, rc.sections()))
    if overrides:
        layers.append({k: dict(v) for k, v in overrides.items()})
    for layer in layers:
        for sec, values in layer.items():
            if sec == "pipeline":
                rc.pipeline = _apply(rc.pipeline, values, sec)
            elif sec == "plan":
                rc.plan = _apply(rc.plan, values, sec)
            elif sec in rc.schedules:
                rc.schedules[sec] = _apply(rc.schedules[sec], values, sec)
            else:
                raise ConfigError(f"unknown section [{sec}]")
    problems = validate_config(rc.pipeline)
    if problems:
        raise ConfigError("; ".join(problems))
    return rc


def dump_config(rc: RunConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser["meta"] = {"version": str(CONFIG_VERSION)}
    for sec, obj in rc.sections().items():
        parser[sec] = {f.name: _format(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def write_resolved(rc: RunConfig, run_dir) -> Path:
    """Copy of the fully resolved config; written before any compute."""
    root = Path(run_dir)
    root.mkdir(parents=True, exist_ok=True)
    path = root / CONFIG_NAME
    path.write_text(dump_config(rc), encoding="utf-8")
    return path
