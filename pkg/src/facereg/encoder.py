"""Point-cloud encoder: shared per-point blocks, attention-gated max pooling,
and two hyperspherical heads (identity and expression)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import Config, ConfigError


@dataclass(frozen=True, eq=False)
class LatentCode:
    z_joint: ad.Tensor
    z_id: ad.Tensor
    z_exp: ad.Tensor
    attention_logits: ad.Tensor | None  # per input point, in input order

    def attention(self) -> np.ndarray | None:
        if self.attention_logits is None:
            return None
        v = self.attention_logits.value[:, 0].astype(np.float64)
        return 1.0 / (1.0 + np.exp(-v))


def _init_linear(params, prefix, f_in, f_out, rng, gain=2.0):
    w = rng.normal(0.0, np.sqrt(gain / f_in), size=(f_in, f_out))
    params.add(f"{prefix}/weight", w)
    params.add(f"{prefix}/bias", np.zeros((1, f_out)))


def _init_block(params, prefix, f_in, f_out, group, rng):
    if f_out % group:
        raise ConfigError(f"{prefix}: {f_out} features not divisible by group size {group}")
    _init_linear(params, prefix, f_in, f_out, rng)
    params.add(f"{prefix}/gn_scale", np.ones((1, f_out)))
    params.add(f"{prefix}/gn_shift", np.zeros((1, f_out)))


def init_encoder(params: ad.ModelParams, cfg: Config, rng: np.random.Generator) -> None:
    f_in = 3
    for i, w in enumerate(cfg.encoder_widths, 1):
        _init_block(params, f"encoder/trunk/pn{i}", f_in, w, cfg.encoder_group, rng)
        f_in = w
    joint = f_in
    for i, w in enumerate(cfg.attention_widths, 1):
        _init_block(params, f"encoder/attention/pn{i}", f_in, w, cfg.attention_group, rng)
        f_in = w
    _init_linear(params, "encoder/attention/out", f_in, 1, rng, gain=1.0)
    _init_linear(params, "encoder/head_id", joint, cfg.latent_id, rng, gain=1.0)
    _init_linear(params, "encoder/head_exp", joint, cfg.latent_exp, rng, gain=1.0)


def pn_block(x: ad.Tensor, params: ad.ModelParams, prefix: str, group_size: int,
             style: str = "modified") -> ad.Tensor:
    """Shared linear map, then ReLU, then group normalization with affine output.

    The "vanilla" ablation normalizes each channel over the points (instance
    statistics) before the ReLU instead.
    """
    h = ad.linear(x, params[f"{prefix}/weight"], params[f"{prefix}/bias"])
    if style == "modified":
        h = ad.group_norm(ad.relu(h), group_size)
    else:
        h = ad.group_norm(h, 1)
    h = ad.add(ad.mul(h, params[f"{prefix}/gn_scale"]), params[f"{prefix}/gn_shift"])
    return h if style == "modified" else ad.relu(h)


def canonical_order(points: np.ndarray) -> np.ndarray:
    """Lexicographic (x, y, z) order, so reductions never depend on input order."""
    return np.lexsort((points[:, 2], points[:, 1], points[:, 0]))


def encode(points: np.ndarray, params: ad.ModelParams, cfg: Config,
           bypass_attention: bool = False) -> LatentCode:
    """Latent codes of one (N, 3) point cloud.

    ``bypass_attention`` forces every gate to 1 (logits at +inf).
    """
    pts = np.asarray(points)
    if pts.ndim != 2 or pts.shape[1] != 3 or len(pts) == 0:
        raise ValueError(f"expected a non-empty (N, 3) point array, got {pts.shape}")
    order = canonical_order(pts)
    x = ad.Tensor(np.ascontiguousarray(pts[order], dtype=params.dtype))
    for i in range(1, len(cfg.encoder_widths) + 1):
        x = pn_block(x, params, f"encoder/trunk/pn{i}", cfg.encoder_group, cfg.block_style)
    feats = x
    logits = None
    if cfg.attention:
        a = feats
        for i in range(1, len(cfg.attention_widths) + 1):
            a = pn_block(a, params, f"encoder/attention/pn{i}", cfg.attention_group, cfg.block_style)
        logits_sorted = ad.linear(a, params["encoder/attention/out/weight"],
                                  params["encoder/attention/out/bias"])
        inv = np.empty_like(order)
        inv[order] = np.arange(len(order))
        logits = ad.gather(logits_sorted, inv)
    if cfg.attention and not bypass_attention:
        joint = ad.masked_max_pool(feats, ad.sigmoid(logits_sorted))
    else:
        joint = ad.masked_max_pool(feats)
    row = ad.reshape(joint, (1, -1))
    z_id = ad.l2_normalize(ad.linear(row, params["encoder/head_id/weight"],
                                     params["encoder/head_id/bias"]))
    z_exp = ad.l2_normalize(ad.linear(row, params["encoder/head_exp/weight"],
                                      params["encoder/head_exp/bias"]))
    return LatentCode(joint, ad.reshape(z_id, (-1,)), ad.reshape(z_exp, (-1,)), logits)


def heads_from_joint(z_joint, params: ad.ModelParams) -> tuple[ad.Tensor, ad.Tensor]:
    """Identity and expression codes for a given joint vector (used for sampling)."""
    row = ad.reshape(ad.as_tensor(np.asarray(z_joint, dtype=params.dtype)
                                  if not isinstance(z_joint, ad.Tensor) else z_joint), (1, -1))
    z_id = ad.l2_normalize(ad.linear(row, params["encoder/head_id/weight"],
                                     params["encoder/head_id/bias"]))
    z_exp = ad.l2_normalize(ad.linear(row, params["encoder/head_exp/weight"],
                                      params["encoder/head_exp/bias"]))
    return ad.reshape(z_id, (-1,)), ad.reshape(z_exp, (-1,))
