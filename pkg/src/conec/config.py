"""Flat ``key = value`` run configuration.

Every key names a field of ``EngineConfig``, ``StreamConfig`` or
``BackboneConfig``; ``seed`` and ``input_dim`` feed every section that has
them. Blank lines and ``#`` comments are ignored. Tuples are comma separated,
booleans are ``true``/``false``.
"""

from __future__ import annotations

import types
import typing
from dataclasses import dataclass, field, fields, replace

from conec.backbone import BackboneConfig
from conec.engine import EngineConfig
from conec.errors import ConfigError
from conec.stream import StreamConfig

RUN_KEYS = {"num_orders": int, "order_seed": int}


@dataclass
class RunConfig:
    engine: EngineConfig = field(default_factory=EngineConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    num_orders: int = 5
    order_seed: int = 0

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(
            self,
            engine=replace(self.engine, seed=seed),
            stream=replace(self.stream, seed=seed),
            backbone=replace(self.backbone, seed=seed),
        )

    def as_dict(self) -> dict:
        out = {}
        for sec in (self.backbone, self.stream, self.engine):
            for f in fields(sec):
                out[f.name] = getattr(sec, f.name)
        out.update(num_orders=self.num_orders, order_seed=self.order_seed)
        return out


def _sections():
    return {cls: typing.get_type_hints(cls) for cls in (EngineConfig, StreamConfig, BackboneConfig)}


def _convert(key: str, raw: str, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if hint is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(f"expected true or false, got {raw!r}")
            return low == "true"
        if origin is tuple:
            item = args[0]
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            return tuple(item(p) for p in parts)
        if origin in (typing.Union, types.UnionType):
            if raw.lower() == "none":
                return None
            inner = [a for a in args if a is not type(None)][0]
            return _convert(key, raw, inner)
        return hint(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def parse_text(text: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def build(pairs: dict[str, str]) -> RunConfig:
    sections = _sections()
    per: dict[type, dict] = {cls: {} for cls in sections}
    run: dict = {}
    for key, raw in pairs.items():
        if key in RUN_KEYS:
            run[key] = _convert(key, raw, RUN_KEYS[key])
            continue
        owners = [cls for cls, hints in sections.items() if key in hints]
        if not owners:
            raise ConfigError(f"unknown config key {key!r}")
        for cls in owners:
            per[cls][key] = _convert(key, raw, sections[cls][key])
    try:
        return RunConfig(
            engine=EngineConfig(**per[EngineConfig]),
            stream=StreamConfig(**per[StreamConfig]),
            backbone=BackboneConfig(**per[BackboneConfig]),
            **run,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def load(path) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return build(parse_text(text))


def dumps(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.as_dict().items():
        if isinstance(value, tuple):
            value = ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
