"""Flat ``key = value`` configuration with environment and command-line overrides.

Precedence, lowest first: defaults, config file, ``FACEREG_<KEY>`` environment
variables, explicit overrides (``--set key=value``).
"""
from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, fields
from pathlib import Path

ENV_PREFIX = "FACEREG_"
# environment switches that are not config keys
_ENV_RESERVED = {"FACEREG_PURE_PYTHON"}


class ConfigError(ValueError):
    pass


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(" ", "").split(",") if t)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class Config:
    # model
    latent_id: int = 256
    latent_exp: int = 256
    encoder_widths: tuple = (64, 64, 64, 128, 1024)
    encoder_group: int = 32
    attention_widths: tuple = (128, 32)
    attention_group: int = 4
    attention: bool = True
    block_style: str = "modified"
    decoder_widths: tuple = (64, 64, 32, 32)
    decoder_seed_width: int = 224
    elu_alpha: float = 1.0
    dtype: str = "float32"
    # template
    c: float = 0.035
    epsilon: float = 5e-4
    d: float = 0.15
    t_factor: float = 1.0
    levels: int = 4
    factor: float = 4.0
    kernels: tuple = (32, 16, 8, 4)
    # losses
    lambda_norm: float = 1e-4
    lambda_edge: float = 5e-5
    lambda_att: float = 1e-4
    lambda_bnd: float = 1e-3
    sigma: float = 5e-4
    # training
    seed: int = 0
    n_points: int = 65536
    lr: float = 1e-4
    lr_decay: float = 0.5
    lr_decay_every: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 2
    refine_batch_size: int = 1
    stage_epochs: tuple = (5, 10, 5, 10, 10, 15)
    checkpoint_every: int = 1
    epoch_repeats: int = 1
    # synthetic data
    synth_id_components: int = 30
    synth_exp_components: int = 20

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = "on" if v else "off"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)

    def set(self, key: str, text: str) -> None:
        spec = {f.name: f for f in fields(self)}
        if key not in spec:
            raise ConfigError(f"unknown config key {key!r}")
        cur = getattr(self, key)
        try:
            if isinstance(cur, bool):
                val = _bool(text)
            elif isinstance(cur, int):
                val = int(text)
            elif isinstance(cur, float):
                val = float(text)
            elif isinstance(cur, tuple):
                val = _ints(text)
            else:
                val = text.strip()
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
        setattr(self, key, val)

    def validate(self) -> None:
        if self.block_style not in ("modified", "vanilla"):
            raise ConfigError(f"block_style must be modified or vanilla, got {self.block_style!r}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if len(self.kernels) != self.levels:
            raise ConfigError(f"{self.levels} levels need {self.levels} kernel sizes")
        if len(self.decoder_widths) != self.levels:
            raise ConfigError(f"{self.levels} levels need {self.levels} decoder widths")
        if self.epoch_repeats < 1:
            raise ConfigError("epoch_repeats must be at least 1")
        if len(self.stage_epochs) != 6:
            raise ConfigError("stage_epochs needs six entries")
        for w in self.encoder_widths:
            if w % self.encoder_group:
                raise ConfigError(f"encoder width {w} not divisible by group size {self.encoder_group}")
        for w in self.attention_widths:
            if w % self.attention_group:
                raise ConfigError(f"attention width {w} not divisible by group size "
                                  f"{self.attention_group}")
        for name in ("lambda_norm", "lambda_edge", "lambda_att", "lambda_bnd", "sigma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out = {}
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{no}: expected key = value")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path=None, overrides=None, env=None) -> Config:
    cfg = Config()
    if path is not None:
        for k, v in parse_text(Path(path).read_text(), str(path)).items():
            cfg.set(k, v)
    env = os.environ if env is None else env
    for k, v in env.items():
        if k.startswith(ENV_PREFIX) and k not in _ENV_RESERVED:
            cfg.set(k[len(ENV_PREFIX):].lower(), v)
    for item in overrides or ():
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            k, v = item.split("=", 1)
        else:
            k, v = item
        cfg.set(k.strip(), str(v).strip())
    cfg.validate()
    return cfg


def config_from_text(text: str) -> Config:
    """Rebuild a config echoed by :meth:`Config.to_text` (e.g. from a checkpoint)."""
    cfg = Config()
    for k, v in parse_text(text).items():
        cfg.set(k, v)
    cfg.validate()
    return cfg
