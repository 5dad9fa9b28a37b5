"""Run configuration: one nested structure covering every tunable.

Configs load from YAML or JSON files (YAML is a superset, one parser).
Unknown sections or keys are rejected, every key has a default, and
``--set section.key=value`` style overrides use the same dot paths.
``loss.lambda`` is accepted on the wire and stored as ``loss.lam``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union, get_args, get_origin, get_type_hints

import yaml

from .losses import SSL_LOSS_MODES
from .network import NetworkConfig


class ConfigError(ValueError):
    """Configuration file or override is invalid."""


@dataclass
class MaskSection:
    patch_size: int = 8
    ratio: float = 0.75


@dataclass
class SslSection:
    loss_on: str = "all"  # or "masked_only"


@dataclass
class LossSection:
    lam: float = 1e-2
    backbone: str = "random"  # or "vgg19"
    taps: int = 3
    mu: float = 5000.0


@dataclass
class ApssSection:
    beta: float = 85.0
    eps_low: float = 0.05
    eps_high: float = 0.95
    pool: int = 64


@dataclass
class NetworkSection:
    embed_dim: int = 60
    num_blocks: int = 3
    depth_per_block: int = 2
    num_heads: int = 6
    window_sizes: tuple = (2, 4, 8)
    attn_patch_size: int = 8
    mlp_ratio: float = 2.0
    global_skip: bool = True
    cross_attn_heads: Optional[int] = None


@dataclass
class TrainSection:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 4
    crop: int = 128
    stride: int = 64
    epochs: int = 30
    timesteps: int = 10
    grad_clip: float = 1.0
    seed: int = 0
    device: str = "cpu"
    jitter: bool = True


@dataclass
class DataSection:
    root: str = ""
    run_dir: str = ""
    gamma: float = 2.2


@dataclass
class SynthSection:
    n_unlabeled: int = 20
    m_static: int = 5
    k_dynamic: int = 5
    height: int = 64
    width: int = 64
    motion_px: int = 3
    saturation_frac: float = 0.1
    noise_sigma: float = 0.0


_ALIASES = {("loss", "lambda"): "lam"}
_REVERSE_ALIASES = {("loss", "lam"): "lambda"}


@dataclass
class RunConfig:
    mask: MaskSection = field(default_factory=MaskSection)
    ssl: SslSection = field(default_factory=SslSection)
    loss: LossSection = field(default_factory=LossSection)
    apss: ApssSection = field(default_factory=ApssSection)
    network: NetworkSection = field(default_factory=NetworkSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)

    def network_config(self) -> NetworkConfig:
        n = self.network
        return NetworkConfig(
            embed_dim=n.embed_dim, num_blocks=n.num_blocks,
            depth_per_block=n.depth_per_block, num_heads=n.num_heads,
            window_sizes=tuple(n.window_sizes),
            attn_patch_size=n.attn_patch_size, mlp_ratio=n.mlp_ratio,
            global_skip=n.global_skip, cross_attn_heads=n.cross_attn_heads)

    def to_dict(self) -> dict:
        out = {}
        for sec in dataclasses.fields(self):
            section = getattr(self, sec.name)
            d = {}
            for f in dataclasses.fields(section):
                key = _REVERSE_ALIASES.get((sec.name, f.name), f.name)
                value = getattr(section, f.name)
                if isinstance(value, tuple):
                    value = list(value)
                d[key] = value
            out[sec.name] = d
        return out

    def validate(self) -> "RunConfig":
        t, m, a, l = self.train, self.mask, self.apss, self.loss
        checks = [
            (t.lr > 0, "train.lr must be positive"),
            (0 < t.beta1 < 1 and 0 < t.beta2 < 1, "Adam betas must be in (0,1)"),
            (t.eps > 0, "train.eps must be positive"),
            (t.batch_size >= 1, "train.batch_size must be >= 1"),
            (t.crop >= 1 and t.stride >= 1, "crop and stride must be >= 1"),
            (t.epochs >= 0 and t.timesteps >= 0,
             "epochs and timesteps must be >= 0"),
            (m.patch_size >= 1, "mask.patch_size must be >= 1"),
            (0 <= m.ratio < 1, "mask.ratio must be in [0, 1)"),
            (self.ssl.loss_on in SSL_LOSS_MODES,
             f"ssl.loss_on must be one of {SSL_LOSS_MODES}"),
            (0 < a.beta <= 100, "apss.beta must be in (0, 100]"),
            (0 <= a.eps_low < a.eps_high <= 1,
             "apss thresholds need 0 <= eps_low < eps_high <= 1"),
            (a.pool >= 1, "apss.pool must be >= 1"),
            (l.lam >= 0, "loss.lambda must be >= 0"),
            (l.backbone in ("random", "vgg19"),
             "loss.backbone must be 'random' or 'vgg19'"),
            (1 <= l.taps <= 5, "loss.taps must be in [1, 5]"),
            (l.mu > 0, "loss.mu must be positive"),
            (self.data.gamma > 0, "data.gamma must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            divisor = self.network_config().divisor
        except ValueError as exc:
            raise ConfigError(f"network: {exc}") from exc
        if t.crop % divisor:
            raise ConfigError(
                f"train.crop {t.crop} must be divisible by {divisor} "
                "(lcm of window sizes and attention patch)")
        return self


def _coerce(value, typ, path: str):
    origin = get_origin(typ)
    if origin is Union:  # Optional[...]
        args = [a for a in get_args(typ) if a is not type(None)]
        if value is None:
            return None
        return _coerce(value, args[0], path)
    if origin is tuple or typ is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(int(v) for v in value)
    if typ is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected a boolean, got {value!r}")
        return value
    if typ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if typ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if typ is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    return value


def _apply_section(section, name: str, values: dict) -> None:
    hints = get_type_hints(type(section))
    for raw_key, value in values.items():
        key = _ALIASES.get((name, raw_key), raw_key)
        if key not in hints:
            raise ConfigError(f"unknown config key {name}.{raw_key}")
        setattr(section, key, _coerce(value, hints[key], f"{name}.{raw_key}"))


def config_from_dict(data: dict) -> RunConfig:
    cfg = RunConfig()
    sections = {f.name: f for f in dataclasses.fields(cfg)}
    for name, values in (data or {}).items():
        if name not in sections:
            raise ConfigError(f"unknown config section {name!r}")
        if not isinstance(values, dict):
            raise ConfigError(f"section {name!r} must be a mapping")
        _apply_section(getattr(cfg, name), name, values)
    return cfg


def load_config(path=None, overrides=(), seed: Optional[int] = None) -> RunConfig:
    """Build a validated config from an optional file plus overrides.

    ``overrides`` are ``section.key=value`` strings; values parse as YAML
    scalars so ``--set loss.lambda=0.01`` and ``--set ssl.loss_on=all``
    both do the right thing.  ``seed`` wins over everything.
    """
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file {p} does not exist")
        try:
            data = yaml.safe_load(p.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {p}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"config {p} must be a mapping at top level")
    cfg = config_from_dict(data)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, _, raw = item.partition("=")
        key = key.strip()
        if key.count(".") != 1:
            raise ConfigError(f"override key {key!r} must be section.key")
        section, keyname = key.split(".")
        if not hasattr(cfg, section):
            raise ConfigError(f"unknown config section {section!r}")
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse value for {key}: {exc}") from exc
        _apply_section(getattr(cfg, section), section, {keyname: value})
    if seed is not None:
        cfg.train.seed = seed
    return cfg.validate()
