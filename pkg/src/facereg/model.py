"""Parameter construction for the full encoder/decoder model."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .config import Config
from .decoder import BRANCHES, decoder_param_count, init_decoder
from .encoder import init_encoder
from .sampling import make_rng

# full-resolution template hierarchy (29495 vertices, four decimations by 4)
FULL_SCALE_LEVELS = (29495, 7374, 1843, 461, 115)

IDENTITY_PATHS = ("encoder/head_id", "decoder_id")
EXPRESSION_PATHS = ("encoder/head_exp", "decoder_exp")
SHARED_PATHS = ("encoder/trunk", "encoder/attention")


def init_params(cfg: Config, level_sizes, seed: int | None = None) -> ad.ModelParams:
    rng = make_rng(cfg.seed if seed is None else seed)
    params = ad.ModelParams(np.dtype(cfg.dtype))
    init_encoder(params, cfg, rng)
    for branch in BRANCHES:
        init_decoder(params, cfg, list(level_sizes), rng, branch)
    return params


def encoder_param_count(cfg: Config) -> int:
    total = 0
    f_in = 3
    for w in cfg.encoder_widths:
        total += (f_in + 1) * w + 2 * w
        f_in = w
    joint = f_in
    for w in cfg.attention_widths:
        total += (f_in + 1) * w + 2 * w
        f_in = w
    total += f_in + 1
    total += (joint + 1) * (cfg.latent_id + cfg.latent_exp)
    return total


def param_count(cfg: Config, level_sizes=FULL_SCALE_LEVELS) -> int:
    """Total parameters of a model on a hierarchy with the given level sizes."""
    return encoder_param_count(cfg) + decoder_param_count(cfg, level_sizes)


def check_compatible(params: ad.ModelParams, cfg: Config, level_sizes) -> None:
    """Raise with a shape diff when a checkpoint does not fit the config and bundle."""
    expected = init_params(cfg.replace(dtype=str(params.dtype)), level_sizes, seed=0)
    diff = []
    for path in sorted(set(expected) | set(params)):
        a = expected[path].shape if path in expected else None
        b = params[path].shape if path in params else None
        if a != b:
            diff.append(f"  {path}: expected {a}, checkpoint has {b}")
    if diff:
        raise ValueError("checkpoint does not match config/bundle:\n" + "\n".join(diff))
