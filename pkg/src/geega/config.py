"""Flat ``section.key = value`` configuration files.

Sections map onto :class:`SyntheticSpec` (``synth``), :class:`FeatureConfig`
(``features``) and :class:`TrainConfig` (``train``). Model dimensions can be
overridden under ``encoder.*`` and ``gcn.*`` on top of the ``train.model``
preset. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .dsp import DEFAULT_BANDS, BandDefinition
from .featuremaps import FeatureConfig
from .model import EncoderConfig, GcnConfig
from .signal_io import SyntheticSpec
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def flat(self) -> dict:
        out = {}
        for section in ("synth", "features", "train"):
            for k, v in dataclasses.asdict(getattr(self, section)).items():
                out[f"{section}.{k}"] = v
        return out


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(key, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(s.strip() for s in raw.split(",") if s.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


_MODEL_KEYS = {
    "encoder": {f.name: f.default for f in dataclasses.fields(EncoderConfig)},
    "gcn": {f.name: f.default for f in dataclasses.fields(GcnConfig)},
}


def parse_bands(raw: str) -> tuple[BandDefinition, ...]:
    """``Delta:1-4,Theta:4-8,...``"""
    bands = []
    for item in raw.split(","):
        name, rng = item.split(":")
        lo, hi = rng.split("-")
        bands.append(BandDefinition(name.strip(), float(lo), float(hi)))
    return tuple(bands)


def apply(cfg: RunConfig, key: str, raw: str) -> None:
    section, _, name = key.partition(".")
    if section in _MODEL_KEYS:
        if name not in _MODEL_KEYS[section]:
            raise ConfigError(f"unknown config key {key!r}")
        cfg.train.overrides[key] = _coerce(key, raw, _MODEL_KEYS[section][name])
        return
    if section == "synth" and name.startswith("amplitude."):
        band = name.split(".", 1)[1]
        if band not in cfg.synth.band_amplitudes:
            raise ConfigError(f"unknown config key {key!r}")
        cfg.synth.band_amplitudes[band] = _coerce(key, raw, 1.0)
        return
    if section == "features" and name == "bands":
        try:
            cfg.features.bands = parse_bands(raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        return
    target = getattr(cfg, section, None) if section in ("synth", "features", "train") else None
    fields = {f.name: f for f in dataclasses.fields(target)} if target is not None else {}
    if name not in fields or name in ("band_amplitudes", "band_tones_hz", "overrides"):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _coerce(key, raw, getattr(target, name)))


def parse(text: str, cfg: RunConfig | None = None) -> RunConfig:
    cfg = cfg or RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = line.split("=", 1)
        apply(cfg, key.strip(), raw)
    return cfg


def load(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"{path}: no such config file")
    return parse(path.read_text())


def dump(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.flat().items():
        if isinstance(value, dict):
            if key == "synth.band_amplitudes":
                lines.extend(f"synth.amplitude.{b} = {v}" for b, v in value.items())
            elif key == "train.overrides":
                lines.extend(f"{k} = {v}" for k, v in value.items())
            continue
        if key == "features.bands":
            value = ",".join(f"{b['name']}:{b['lo_hz']:g}-{b['hi_hz']:g}" for b in value)
        elif isinstance(value, (tuple, list)):
            value = ",".join(map(str, value))
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


__all__ = ["ConfigError", "RunConfig", "load", "parse", "dump", "apply", "DEFAULT_BANDS"]
