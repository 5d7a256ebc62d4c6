"""Quantitative metrics: landmark error, surface error, stability, specificity,
and latent interpolation."""
from __future__ import annotations

import logging
from collections.abc import Callable, Mapping
from dataclasses import dataclass

import numpy as np

from .bvh import FaceBVH
from .mesh import TriMesh
from .sampling import make_rng

log = logging.getLogger(__name__)


def landmark_group(label: str) -> str:
    """Group of a landmark label: the part before ``:`` (the whole label otherwise)."""
    return label.split(":", 1)[0]


@dataclass(frozen=True)
class GroupError:
    group: str
    median: float
    std: float
    count: int


def landmark_distances(vertices: np.ndarray, raw_landmarks: Mapping[str, np.ndarray],
                       landmark_map: Mapping[str, int]) -> dict[str, float]:
    out = {}
    for label, point in raw_landmarks.items():
        if label not in landmark_map:
            raise KeyError(f"landmark {label!r} is not in the template landmark map")
        out[label] = float(np.linalg.norm(vertices[landmark_map[label]] - np.asarray(point)))
    return out


def landmark_error(vertices: np.ndarray, raw_landmarks: Mapping[str, np.ndarray],
                   landmark_map: Mapping[str, int]) -> list[GroupError]:
    """Per-group median and standard deviation of landmark distances.

    The last row, group ``"inner"``, pools every group except the face contour.
    """
    return group_errors([landmark_distances(vertices, raw_landmarks, landmark_map)])


def group_errors(per_scan: list[dict[str, float]], outer: str = "contour") -> list[GroupError]:
    """Cohort table from per-scan landmark distances (label -> distance)."""
    groups: dict[str, list[float]] = {}
    for dists in per_scan:
        per_group: dict[str, list[float]] = {}
        for label, d in dists.items():
            per_group.setdefault(landmark_group(label), []).append(d)
        # one value per scan and group: the group's mean landmark distance
        for g, ds in per_group.items():
            groups.setdefault(g, []).append(float(np.mean(ds)))
    rows = [GroupError(g, float(np.median(v)), float(np.std(v)), len(v))
            for g, v in sorted(groups.items())]
    inner = [x for g, v in groups.items() if g != outer for x in v]
    if inner:
        rows.append(GroupError("inner", float(np.median(inner)), float(np.std(inner)), len(inner)))
    return rows


@dataclass(frozen=True, eq=False)
class SurfaceError:
    distances: np.ndarray
    median: float


def surface_error(vertices: np.ndarray, raw: TriMesh | FaceBVH) -> SurfaceError:
    """Distance from each registration vertex to the closest point of the raw surface."""
    bvh = raw if isinstance(raw, FaceBVH) else FaceBVH(raw)
    d = bvh.closest(np.asarray(vertices, dtype=np.float64)).distance
    return SurfaceError(d, float(np.median(d)))


def error_cdf(medians, n_thresholds: int = 101, max_threshold: float | None = None) -> np.ndarray:
    """Rows of (threshold, fraction of scans with median error <= threshold)."""
    m = np.sort(np.asarray(medians, dtype=np.float64).ravel())
    if m.size == 0:
        raise ValueError("error_cdf needs at least one value")
    top = float(m[-1]) if max_threshold is None else float(max_threshold)
    thr = np.linspace(0.0, top, n_thresholds)
    frac = np.searchsorted(m, thr, side="right") / m.size
    return np.stack([thr, frac], axis=1)


@dataclass(frozen=True)
class Stability:
    median_of_medians: float
    median_of_maxima: float


def stability_from_registrations(regs: np.ndarray) -> Stability:
    """Statistics of per-vertex distances to the mean of repeated registrations (R, N, 3)."""
    regs = np.asarray(regs, dtype=np.float64)
    if regs.shape[0] < 2:
        raise ValueError("need at least two repeated registrations")
    mean = regs.mean(axis=0)
    d = np.linalg.norm(regs - mean, axis=2)
    return Stability(float(np.median(np.median(d, axis=0))), float(np.median(d.max(axis=0))))


def resampling_stability(register: Callable[[int], np.ndarray], n_repeats: int, seed: int) -> Stability:
    """Register one scan ``n_repeats`` times with fresh sampling seeds.

    ``register(seed)`` returns registration vertices for that sampling seed.
    """
    if n_repeats < 2:
        raise ValueError("n_repeats must be at least 2")
    rng = make_rng(seed)
    seeds = rng.integers(0, 2**62, size=n_repeats)
    return stability_from_registrations(np.stack([register(int(s)) for s in seeds]))


def nearest_registration(sample: np.ndarray, registrations: np.ndarray) -> tuple[int, float]:
    """Index of and mean vertex distance to the closest training registration."""
    d = np.linalg.norm(registrations - sample[None], axis=2).mean(axis=1)
    k = int(np.argmin(d))
    return k, float(d[k])


@dataclass(frozen=True, eq=False)
class Specificity:
    value: float
    distances: np.ndarray
    nearest: np.ndarray
    samples: np.ndarray


def fit_gaussian(latents: np.ndarray, jitter: float = 1e-8) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(latents, dtype=np.float64)
    if z.shape[0] < 2:
        raise ValueError("need at least two latent vectors to fit a Gaussian")
    mean = z.mean(axis=0)
    cov = np.cov(z, rowvar=False)
    eig = np.linalg.eigvalsh(cov)
    if eig.min() <= 0 or eig.min() < 1e-12 * max(eig.max(), 1e-300):
        log.warning("singular latent covariance; adding diagonal jitter %g", jitter)
        cov = cov + jitter * np.eye(len(cov))
    return mean, cov


def sample_gaussian(mean: np.ndarray, cov: np.ndarray, n: int, seed: int) -> np.ndarray:
    rng = make_rng(seed)
    # eigen-decomposition tolerates the semi-definite covariance a small cohort gives
    w, v = np.linalg.eigh(cov)
    root = v * np.sqrt(np.clip(w, 0.0, None))
    return mean + rng.normal(size=(n, len(mean))) @ root.T


def specificity(decode_joint: Callable[[np.ndarray], np.ndarray], training_latents: np.ndarray,
                training_registrations: np.ndarray, n_samples: int = 10000, seed: int = 0,
                keep_samples: bool = False) -> Specificity:
    """Mean distance from generated faces to their nearest training registration.

    ``decode_joint(z)`` maps a joint latent vector to registration vertices.
    """
    mean, cov = fit_gaussian(training_latents)
    zs = sample_gaussian(mean, cov, n_samples, seed)
    regs = np.asarray(training_registrations, dtype=np.float64)
    dist = np.empty(n_samples)
    near = np.empty(n_samples, dtype=np.int64)
    kept = []
    for i, z in enumerate(zs):
        v = np.asarray(decode_joint(z), dtype=np.float64)
        near[i], dist[i] = nearest_registration(v, regs)
        if keep_samples:
            kept.append(v)
    return Specificity(float(dist.mean()), dist, near, np.array(kept))


class DegenerateInterpolation(ValueError):
    pass


def interpolate_latents(z1, z2, t: float) -> np.ndarray:
    """normalize(z1 + t (z2 - z1)); exact at both endpoints."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if t == 0:
        return z1.copy()
    if t == 1:
        return z2.copy()
    v = z1 + t * (z2 - z1)
    n = np.linalg.norm(v)
    if n < 1e-12:
        raise DegenerateInterpolation("interpolation passes through the origin (antipodal codes)")
    return v / n
