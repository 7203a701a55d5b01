"""Experiment configuration: a small `key = value` file format.

Grammar (documented in the README): one statement per line; sections are
bracketed names (`[network]`); keys and values are separated by `=`;
lists are comma-separated; blank lines and lines starting with `#` are
skipped. Unknown sections or keys are rejected with the offending line
number, as are values of the wrong type. Every key has a default, so the
empty file is a valid configuration.
"""

from __future__ import annotations

import glob as _glob
import os
from dataclasses import dataclass, field, fields

from .errors import ConfigError

_TASKS = ("register", "classify", "extract", "bench")
_FAMILIES = ("sphere", "cube", "cylinder", "torus", "composite")


def _parse_bool(text: str):
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_str_list(text: str):
    return tuple(s.strip() for s in text.split(",") if s.strip())


def _parse_float_list(text: str):
    return tuple(float(s) for s in text.split(",") if s.strip())


def _parse_int_list(text: str):
    return tuple(int(s) for s in text.split(",") if s.strip())


@dataclass
class ExperimentConfig:
    """Typed view of one experiment file; every field has a default."""

    # [run]
    task: str = "register"
    seed: int = 0
    out: str = "runs/out"
    # [data]
    train_families: tuple[str, ...] = ("sphere", "cube", "cylinder")
    test_families: tuple[str, ...] = ("torus", "composite")
    files: tuple[str, ...] = ()
    points: int = 256
    noise_sigma: float = 0.0
    train_size: int = 20
    test_size: int = 20
    max_rotation: float = 45.0
    with_translation: bool = True
    normals: str = "analytic"
    normals_k: int = 16
    # [kernel]
    kernels_per_ring: int = 6
    sigma: float = 0.15
    scales: tuple[float, ...] = ()
    knn: int = 10
    bandwidth: str = "per_kernel"
    # [network]
    conv: str = "circular"
    conv_hidden: bool = False
    widths: tuple[int, ...] = (16, 32, 32, 64)
    descriptor_dim: int = 128
    global_context: bool = True
    global_bandwidth: float = 0.5
    scale_adapt: bool = False
    scale_blend: bool = False
    scale_net: str = "flat"
    scale_hidden: int = 16
    # [train]
    epochs: int = 12
    lr: float = 0.01
    momentum: float = 0.9
    batch: int = 4
    temperature: float = 0.1
    clip: float = 1.0

    def echo(self) -> dict:
        """Plain-dict snapshot for reports (lists as lists, not tuples)."""
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    def encoder_config(self, azimuth: float = 0.0):
        from .network import EncoderConfig

        return EncoderConfig(
            kernels_per_ring=self.kernels_per_ring, knn=self.knn,
            sigma=self.sigma, scales=self.scales,
            scale_adapt=self.scale_adapt, scale_blend=self.scale_blend,
            scale_hidden=self.scale_hidden, scale_net=self.scale_net,
            conv_mode=self.conv, conv_hidden=self.conv_hidden,
            widths=self.widths, descriptor_dim=self.descriptor_dim,
            global_context=self.global_context,
            global_bandwidth=self.global_bandwidth,
            bandwidth_mode=self.bandwidth, azimuth=azimuth,
            k_azimuth=self.normals_k)


# (section, key) -> (field name, parser, human-readable type)
_SCHEMA: dict[tuple[str, str], tuple[str, object, str]] = {}


def _register(section: str, key: str, parser, typename: str,
              field_name: str | None = None):
    _SCHEMA[(section, key)] = (field_name or key, parser, typename)


_register("run", "task", str, "string")
_register("run", "seed", int, "integer")
_register("run", "out", str, "string")
_register("data", "train_families", _parse_str_list, "name list")
_register("data", "test_families", _parse_str_list, "name list")
_register("data", "files", _parse_str_list, "path list")
_register("data", "points", int, "integer")
_register("data", "noise_sigma", float, "number")
_register("data", "train_size", int, "integer")
_register("data", "test_size", int, "integer")
_register("data", "max_rotation", float, "number")
_register("data", "with_translation", _parse_bool, "boolean")
_register("data", "normals", str, "string")
_register("data", "normals_k", int, "integer")
_register("kernel", "kernels_per_ring", int, "integer")
_register("kernel", "sigma", float, "number")
_register("kernel", "scales", _parse_float_list, "number list")
_register("kernel", "knn", int, "integer")
_register("kernel", "bandwidth", str, "string")
_register("network", "conv", str, "string")
_register("network", "conv_hidden", _parse_bool, "boolean")
_register("network", "widths", _parse_int_list, "integer list")
_register("network", "descriptor_dim", int, "integer")
_register("network", "global_context", _parse_bool, "boolean")
_register("network", "global_bandwidth", float, "number")
_register("network", "scale_adapt", _parse_bool, "boolean")
_register("network", "scale_blend", _parse_bool, "boolean")
_register("network", "scale_net", str, "string")
_register("network", "scale_hidden", int, "integer")
_register("train", "epochs", int, "integer")
_register("train", "lr", float, "number")
_register("train", "momentum", float, "number")
_register("train", "batch", int, "integer")
_register("train", "clip", float, "number")
_register("train", "temperature", float, "number")

_SECTIONS = {s for s, _ in _SCHEMA}


def parse_config(text: str) -> ExperimentConfig:
    """Parse configuration text; unknown keys and bad types are errors."""
    cfg = ExperimentConfig()
    section = None
    seen_lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in _SECTIONS:
                raise ConfigError(f"unknown section [{section}]", line=lineno)
            continue
        if "=" not in line:
            raise ConfigError("expected `key = value`", line=lineno)
        if section is None:
            raise ConfigError("key outside any [section]", line=lineno)
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        entry = _SCHEMA.get((section, key))
        if entry is None:
            raise ConfigError(f"unknown key {key!r} in section [{section}]",
                              line=lineno)
        field_name, parser, typename = entry
        try:
            parsed = parser(value)
        except ValueError:
            raise ConfigError(
                f"key {key!r} expects a {typename}, got {value!r}",
                line=lineno) from None
        setattr(cfg, field_name, parsed)
        seen_lines[field_name] = lineno
    _validate(cfg, seen_lines)
    return cfg


def _check(ok: bool, message: str, lineno: int | None):
    if not ok:
        raise ConfigError(message, line=lineno)


def _validate(cfg: ExperimentConfig, lines: dict[str, int]):
    ln = lines.get
    _check(cfg.task in _TASKS, f"task must be one of {_TASKS}", ln("task"))
    for fam_field in ("train_families", "test_families"):
        for fam in getattr(cfg, fam_field):
            _check(fam in _FAMILIES, f"unknown shape family {fam!r}",
                   ln(fam_field))
    _check(cfg.points >= 8, "points must be >= 8", ln("points"))
    _check(cfg.normals in ("analytic", "estimated"),
           "normals must be analytic or estimated", ln("normals"))
    _check(4 <= cfg.kernels_per_ring <= 8, "kernels_per_ring must be 4..8",
           ln("kernels_per_ring"))
    _check(cfg.sigma > 0, "sigma must be positive", ln("sigma"))
    _check(cfg.knn >= 1, "knn must be >= 1", ln("knn"))
    _check(cfg.bandwidth in ("per_kernel", "global"),
           "bandwidth must be per_kernel or global", ln("bandwidth"))
    _check(cfg.conv in ("circular", "channelwise"),
           "conv must be circular or channelwise", ln("conv"))
    _check(cfg.scale_net in ("flat", "pooled"),
           "scale_net must be flat or pooled", ln("scale_net"))
    _check(len(cfg.widths) >= 1 and all(w >= 1 for w in cfg.widths),
           "widths must be positive integers", ln("widths"))
    _check(cfg.descriptor_dim >= 1, "descriptor_dim must be >= 1",
           ln("descriptor_dim"))
    _check(cfg.global_bandwidth > 0, "global_bandwidth must be positive",
           ln("global_bandwidth"))
    if cfg.scale_adapt or cfg.scale_blend:
        _check(len(cfg.scales) >= 2,
               "scale adaptation needs at least two [kernel] scales",
               ln("scales") or ln("scale_adapt"))
        _check(all(b > a for a, b in zip(cfg.scales, cfg.scales[1:])),
               "scales must be strictly increasing", ln("scales"))
    _check(0.0 <= cfg.max_rotation <= 180.0,
           "max_rotation must be in [0, 180]", ln("max_rotation"))
    _check(cfg.epochs >= 0, "epochs must be >= 0", ln("epochs"))
    _check(cfg.lr > 0, "lr must be positive", ln("lr"))
    _check(0.0 <= cfg.momentum < 1.0, "momentum must be in [0, 1)",
           ln("momentum"))
    _check(cfg.batch >= 1, "batch must be >= 1", ln("batch"))
    _check(cfg.clip > 0, "clip must be positive", ln("clip"))
    _check(cfg.temperature > 0, "temperature must be positive",
           ln("temperature"))
    if cfg.files:
        matched = []
        for pattern in cfg.files:
            hits = sorted(_glob.glob(pattern))
            _check(bool(hits), f"no file matches {pattern!r}", ln("files"))
            for h in hits:
                _check(os.path.exists(h), f"missing file {h!r}", ln("files"))
            matched.extend(hits)
        cfg.files = tuple(matched)


def load_config(path: str) -> ExperimentConfig:
    """Read and validate a configuration file."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        return parse_config(fh.read())
