"""Flat ``section.key = value`` run configuration with strict key checking.

Example::

    # reference retention run
    model.d_model = 64
    train.steps = 3000
    task.kinds = cell
    sweep.voco_counts = 1,2,4,8

Values are typed by the field's default: ints, floats, booleans
(true/false), strings, and comma-separated tuples.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable

from voco.bench import Scenario
from voco.data import GridTask
from voco.errors import ConfigError, UsageError
from voco.model import ModelConfig
from voco.train import TrainConfig


@dataclass(frozen=True)
class BenchConfig:
    repetitions: int = 30
    scenarios: tuple[str, ...] = ("576:1:32",)  # "vision:voco:text" triples

    def scenario_list(self) -> list[Scenario]:
        out = []
        for spec in self.scenarios:
            try:
                n, v, m = (int(x) for x in spec.split(":"))
            except ValueError:
                raise ConfigError(f"bench.scenarios entry {spec!r} is not n:v:m") from None
            out.append(Scenario(n, v, m))
        return out


@dataclass(frozen=True)
class SweepConfig:
    voco_counts: tuple[int, ...] = (1, 8)
    baselines: tuple[str, ...] = ()
    seeds: tuple[int, ...] = ()
    video_frames: int = 3


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    task: GridTask = field(default_factory=GridTask)
    train: TrainConfig = field(default_factory=TrainConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def snapshot(self) -> dict:
        return {name: {f.name: _plain(getattr(getattr(self, name), f.name)) for f in fields(getattr(self, name))}
                for name in SECTIONS}


SECTIONS = ("model", "task", "train", "bench", "sweep")
INT_TUPLES = {"sweep.voco_counts", "sweep.seeds"}


def _plain(value):
    return list(value) if isinstance(value, tuple) else value


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [x.strip() for x in raw.split(",") if x.strip()]
            if key in INT_TUPLES:
                return tuple(int(x) for x in items)
            return tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def parse_pairs(pairs: Iterable[tuple[str, str]], base: RunConfig | None = None) -> RunConfig:
    """Apply dotted ``(key, value)`` pairs to ``base``; unknown keys raise ConfigError naming the key."""
    cfg = base or RunConfig()
    updates: dict[str, dict] = {s: {} for s in SECTIONS}
    for key, value in pairs:
        section, _, name = key.strip().partition(".")
        if section not in updates or not name:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(cfg, section)
        known = {f.name for f in fields(current)}
        if name not in known:
            raise ConfigError(f"unknown config key {key!r}")
        updates[section][name] = _coerce(key, value, getattr(current, name))
    try:
        return RunConfig(**{s: replace(getattr(cfg, s), **u) if u else getattr(cfg, s)
                            for s, u in updates.items()})
    except (UsageError, TypeError) as exc:
        raise ConfigError(str(exc)) from exc


def parse_text(text: str, base: RunConfig | None = None) -> RunConfig:
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value))
    return parse_pairs(pairs, base)


def parse_overrides(items: Iterable[str], base: RunConfig | None = None) -> RunConfig:
    pairs = []
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        pairs.append((key, value))
    return parse_pairs(pairs, base)


def load_config(path: str | Path | None = None, overrides: Iterable[str] = (), seed: int | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        try:
            cfg = parse_text(Path(path).read_text(), cfg)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    cfg = parse_overrides(overrides, cfg)
    if seed is not None:
        cfg = replace(cfg, train=cfg.train.replace(seed=seed))
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section, values in cfg.snapshot().items():
        for key, value in values.items():
            if isinstance(value, list):
                value = ",".join(map(str, value))
            elif isinstance(value, bool):
                value = str(value).lower()
            lines.append(f"{section}.{key} = {value}")
    return "\n".join(lines) + "\n"
