"""Run configuration files.

A config is a flat ``key = value`` file (valid TOML) whose keys are dotted
``section.field`` names, e.g.::

    world.preset = "default"
    world.n_train = 500
    encoder.out_dim = 64
    disc.epochs = 100
    flow.ode_steps = 32

Sections are ``world``, ``encoder``, ``disc`` and ``flow``; ``world.preset``
picks a base world from :data:`~promptspk.synthdata.WORLD_PRESETS` before
the other world keys are applied. Unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import fields, replace
from pathlib import Path

import tomli

from .discriminative import DiscConfig
from .flow import FlowConfig
from .prompt import EncoderConfig
from .synthdata import SynthWorldConfig, world_preset
from .systems import RunConfig

SECTIONS = ("world", "encoder", "disc", "flow")


class ConfigError(ValueError):
    pass


def _flatten(doc: dict, prefix: str = "") -> dict:
    out = {}
    for key, value in doc.items():
        name = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, name + "."))
        else:
            out[name] = value
    return out


def _coerce(cls, key: str, overrides: dict) -> dict:
    known = {f.name: f for f in fields(cls)}
    out = {}
    for name, value in overrides.items():
        if name not in known:
            raise ConfigError(f"unknown config key {key}.{name}")
        out[name] = tuple(value) if isinstance(value, list) else value
    return out


def config_from_dict(doc: dict) -> RunConfig:
    """Build a :class:`RunConfig` from a (possibly nested) mapping of dotted keys."""
    grouped = {name: {} for name in SECTIONS}
    for key, value in _flatten(doc).items():
        section, _, name = key.partition(".")
        if section not in SECTIONS or not name or "." in name:
            raise ConfigError(f"unknown config key {key}")
        grouped[section][name] = value
    world_keys = dict(grouped["world"])
    preset = world_keys.pop("preset", "default")
    try:
        world = world_preset(preset, **_coerce(SynthWorldConfig, "world", world_keys))
        return RunConfig(
            world=world,
            encoder=EncoderConfig(**_coerce(EncoderConfig, "encoder", grouped["encoder"])),
            disc=DiscConfig(**_coerce(DiscConfig, "disc", grouped["disc"])),
            flow=FlowConfig(**_coerce(FlowConfig, "flow", grouped["flow"])),
        )
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path, "rb") as fh:
        try:
            doc = tomli.load(fh)
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(doc)


def with_seed(config: RunConfig, seed: int | None) -> RunConfig:
    """Override the world and training seeds with one value."""
    if seed is None:
        return config
    return replace(config, world=replace(config.world, seed=seed),
                   disc=replace(config.disc, seed=seed), flow=replace(config.flow, seed=seed))
