"""Run configuration as nested key = value sections, with CLI overrides."""

from __future__ import annotations

import configparser
import dataclasses

from .runner import RunConfig, RunnerError

# (section, option) -> RunConfig field
FIELD_MAP = {
    ("data", "dataset"): "dataset",
    ("data", "n_per_class"): "n_per_class",
    ("data", "n_classes"): "n_classes",
    ("data", "image_size"): "image_size",
    ("data", "test_n_per_class"): "test_n_per_class",
    ("data", "valid_fraction"): "valid_fraction",
    ("data", "fold_seed"): "fold_seed",
    ("distortion", "ir"): "ir",
    ("distortion", "nr"): "nr",
    ("model", "kind"): "model_kind",
    ("model", "hidden"): "hidden",
    ("model", "channels"): "channels",
    ("train", "epochs"): "epochs",
    ("train", "ho_start_epoch"): "ho_start_epoch",
    ("train", "batch_size"): "batch_size",
    ("train", "inner_lr"): "inner_lr",
    ("train", "inner_momentum"): "inner_momentum",
    ("hyper", "arm"): "arm",
    ("hyper", "lr"): "hyper_lr",
    ("hyper", "beta1"): "hyper_beta1",
    ("hyper", "beta2"): "hyper_beta2",
    ("hyper", "alpha_smooth"): "alpha_smooth",
    ("hyper", "temperature"): "temperature",
    ("hyper", "straight_through"): "straight_through",
    ("hyper", "m_norm"): "m_norm",
    ("neumann", "steps"): "neumann_steps",
    ("neumann", "alpha"): "neumann_alpha",
    ("neumann", "estimator"): "estimator",
    ("protocol", "ho_source"): "ho_source",
    ("protocol", "train_on_all"): "train_on_all",
    ("seeds", "model"): "model_seed",
    ("seeds", "data"): "data_seed",
    ("seeds", "noise"): "noise_seed",
    ("output", "out_dir"): "out_dir",
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _parse_value(field, raw):
    raw = raw.strip()
    ftype = _FIELD_TYPES[field]
    if raw.lower() in ("none", ""):
        return None
    if ftype in ("int", "int | None"):
        return int(raw)
    if ftype in ("float", "float | None"):
        return float(raw)
    if ftype == "bool":
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise RunnerError(f"cannot parse boolean {raw!r} for {field}")
    if ftype == "tuple":
        return tuple(int(x) for x in raw.replace(",", " ").split())
    return raw  # strings


def config_overrides_from_file(path) -> dict:
    """Parse an INI config file into RunConfig field overrides."""
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise RunnerError(f"config file not found: {path}")
    overrides = {}
    for section in parser.sections():
        if section == "augment.ops":
            ops = []
            for kind, value in parser.items(section):
                parts = [float(x) for x in value.replace(",", " ").split()]
                if len(parts) != 2:
                    raise RunnerError(
                        f"augment op {kind!r} needs 'mu, rng', got {value!r}")
                ops.append((kind, parts[0], parts[1]))
            overrides["aug_ops"] = tuple(ops)
            continue
        for option, value in parser.items(section):
            key = (section, option)
            if key not in FIELD_MAP:
                raise RunnerError(f"unknown config entry [{section}] {option}")
            field = FIELD_MAP[key]
            overrides[field] = _parse_value(field, value)
    return overrides


def make_config(config_path=None, **overrides) -> RunConfig:
    """Defaults, then config file entries, then explicit overrides."""
    merged = {}
    if config_path:
        merged.update(config_overrides_from_file(config_path))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig(**merged)


def write_config(cfg: RunConfig, path):
    """Write a config back out in the section format (round-trippable)."""
    parser = configparser.ConfigParser()
    for (section, option), field in FIELD_MAP.items():
        value = getattr(cfg, field)
        if value is None:
            value = "none"
        elif isinstance(value, tuple):
            value = ", ".join(str(v) for v in value)
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, option, str(value))
    if cfg.aug_ops is not None:
        parser.add_section("augment.ops")
        for kind, mu, rng in cfg.aug_ops:
            parser.set("augment.ops", kind, f"{mu}, {rng}")
    with open(path, "w") as f:
        parser.write(f)
