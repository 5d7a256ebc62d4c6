"""Spiral mesh-inception decoders, mouth PCA blending and shape assembly."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import Config
from .template import BundleError, TemplateBundle

BRANCHES = ("id", "exp")


@dataclass(frozen=True, eq=False)
class Registration:
    vertices: ad.Tensor
    faces: np.ndarray
    delta_id: ad.Tensor
    delta_exp: ad.Tensor
    raw_id: ad.Tensor
    raw_exp: ad.Tensor


def _glorot(rng, f_in, f_out):
    return rng.normal(0.0, np.sqrt(2.0 / (f_in + f_out)), size=(f_in, f_out))


def init_decoder(params: ad.ModelParams, cfg: Config, level_sizes, rng: np.random.Generator,
                 branch: str) -> None:
    """Parameters of one decoder; ``level_sizes`` are vertex counts from level 0 upwards."""
    n_conv = len(cfg.decoder_widths)
    latent = cfg.latent_id if branch == "id" else cfg.latent_exp
    n_seed = level_sizes[n_conv]
    pre = f"decoder_{branch}"
    seed_w = cfg.decoder_seed_width
    params.add(f"{pre}/seed/weight", _glorot(rng, latent, n_seed * seed_w))
    params.add(f"{pre}/seed/bias", np.zeros((1, n_seed * seed_w)))
    w_prev = seed_w
    # block b runs at level n_conv-1-b, coarsest first
    for b in range(n_conv):
        k = cfg.kernels[b]
        w = cfg.decoder_widths[b]
        params.add(f"{pre}/block{b}/conv/weight", _glorot(rng, k * w_prev, w))
        params.add(f"{pre}/block{b}/conv/bias", np.zeros((1, w)))
        params.add(f"{pre}/block{b}/mix/weight", _glorot(rng, w + w_prev, w))
        params.add(f"{pre}/block{b}/mix/bias", np.zeros((1, w)))
        w_prev = w
    k_out = cfg.kernels[-1]
    params.add(f"{pre}/out/weight", np.zeros((k_out * w_prev, 3)))
    params.add(f"{pre}/out/bias", np.zeros((1, 3)))


def decoder_param_count(cfg: Config, level_sizes) -> int:
    """Closed-form parameter count of one decoder (no arrays allocated)."""
    n_conv = len(cfg.decoder_widths)
    total = 0
    for branch in BRANCHES:
        latent = cfg.latent_id if branch == "id" else cfg.latent_exp
        n_seed = level_sizes[n_conv]
        total += (latent + 1) * n_seed * cfg.decoder_seed_width
        w_prev = cfg.decoder_seed_width
        for b in range(n_conv):
            k, w = cfg.kernels[b], cfg.decoder_widths[b]
            total += (k * w_prev + 1) * w + (w + w_prev + 1) * w
            w_prev = w
        total += (cfg.kernels[-1] * w_prev + 1) * 3
    return total


def spiral_conv(x: ad.Tensor, spiral: np.ndarray, weight: ad.Tensor, bias: ad.Tensor) -> ad.Tensor:
    """Gather each vertex's spiral, concatenate the features and apply one linear map."""
    n, k = spiral.shape
    if weight.shape[0] != k * x.shape[1]:
        raise ad.ShapeError(f"spiral_conv: kernel {k} x {x.shape[1]} features does not match "
                            f"weight {weight.shape}")
    g = ad.gather(x, spiral)
    return ad.linear(ad.reshape(g, (n, k * x.shape[1])), weight, bias)


def mesh_inception_block(coarse: ad.Tensor, level: int, block: int, params: ad.ModelParams,
                         prefix: str, bundle: TemplateBundle, alpha: float = 1.0) -> ad.Tensor:
    u = ad.sparse_matmul(bundle.upsamplers[level], coarse)
    c = ad.elu(spiral_conv(u, bundle.spirals[level], params[f"{prefix}/block{block}/conv/weight"],
                           params[f"{prefix}/block{block}/conv/bias"]), alpha)
    mixed = ad.linear(ad.concat([c, u], axis=1), params[f"{prefix}/block{block}/mix/weight"],
                      params[f"{prefix}/block{block}/mix/bias"])
    return ad.elu(mixed, alpha)


def decode_blendshape(z: ad.Tensor, params: ad.ModelParams, bundle: TemplateBundle, cfg: Config,
                      branch: str) -> ad.Tensor:
    """Displacement field (N0, 3) on the full-resolution template for a unit code ``z``."""
    pre = f"decoder_{branch}"
    n_conv = len(cfg.decoder_widths)
    n_seed = bundle.levels[n_conv].n_vertices
    row = ad.reshape(z, (1, -1))
    h = ad.linear(row, params[f"{pre}/seed/weight"], params[f"{pre}/seed/bias"])
    h = ad.reshape(h, (n_seed, cfg.decoder_seed_width))
    for b in range(n_conv):
        h = mesh_inception_block(h, n_conv - 1 - b, b, params, pre, bundle, cfg.elu_alpha)
    return spiral_conv(h, bundle.spirals[0], params[f"{pre}/out/weight"], params[f"{pre}/out/bias"])


def mouth_blend(y: ad.Tensor, basis: np.ndarray, bundle: TemplateBundle) -> ad.Tensor:
    """Blend the mouth region of a displacement field with its PCA projection.

    Rows outside the mouth region are returned unchanged, bit for bit.
    """
    region = bundle.mouth_region
    if basis.shape[0] != 3 * len(region):
        raise BundleError(f"basis has {basis.shape[0]} rows but the mouth region has "
                          f"{len(region)} vertices (expected {3 * len(region)})")
    b = basis.astype(y.dtype)
    ym = ad.gather(y, region)
    flat = ad.reshape(ym, (1, -1))
    proj = ad.matmul(ad.matmul(flat, ad.Tensor(b)), ad.Tensor(np.ascontiguousarray(b.T)))
    p = ad.reshape(proj, (len(region), 3))
    m = ad.Tensor(bundle.mouth_mask[region].reshape(-1, 1).astype(y.dtype))
    delta = ad.mul(m, ad.sub(p, ym))
    return ad.add(y, ad.scatter_add(delta, region, y.shape[0]))


def assemble(z_id: ad.Tensor, z_exp: ad.Tensor, params: ad.ModelParams, bundle: TemplateBundle,
             cfg: Config) -> Registration:
    """Template mean plus blended identity and expression blendshapes."""
    raw_id = decode_blendshape(z_id, params, bundle, cfg, "id")
    raw_exp = decode_blendshape(z_exp, params, bundle, cfg, "exp")
    d_id = mouth_blend(raw_id, bundle.pca_id, bundle)
    d_exp = mouth_blend(raw_exp, bundle.pca_exp, bundle)
    mu = ad.Tensor(bundle.mean_shape.vertices.astype(d_id.dtype))
    s = ad.add(ad.add(mu, d_id), d_exp)
    return Registration(s, bundle.mean_shape.faces, d_id, d_exp, raw_id, raw_exp)
