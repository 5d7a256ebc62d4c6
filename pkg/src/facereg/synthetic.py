"""Procedural face-like template and a linear shape model for synthetic scans.

The template is a height field over an elliptical disc (about one unit tall),
viewed from +z. Identity and expression modes are smooth displacement fields
built from Gaussian bumps; synthetic scans are the template plus a random
combination of modes, so their correspondence to the template is exact.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mesh import TriMesh, vertex_normals, write_index_set, write_landmarks, write_mesh
from .primitives import grid
from .sampling import derive_seed, make_rng
from .template import build_blending_mask, mouth_pca_basis

MOUTH_CENTER = np.array([0.0, -0.24])
MOUTH_RADII = np.array([0.09, 0.025])

# (label, x, y) on the template plane; the label prefix before ":" is the group
LANDMARKS = [
    ("eyebrows:left_outer", -0.26, 0.22), ("eyebrows:left_inner", -0.08, 0.24),
    ("eyebrows:right_inner", 0.08, 0.24), ("eyebrows:right_outer", 0.26, 0.22),
    ("eyes:left_outer", -0.24, 0.13), ("eyes:left_inner", -0.09, 0.13),
    ("eyes:right_inner", 0.09, 0.13), ("eyes:right_outer", 0.24, 0.13),
    ("nose:tip", 0.0, -0.04), ("nose:left_alar", -0.05, -0.08), ("nose:right_alar", 0.05, -0.08),
    ("mouth:left_corner", -0.09, -0.24), ("mouth:right_corner", 0.09, -0.24),
    ("mouth:upper_lip", 0.0, -0.205), ("mouth:lower_lip", 0.0, -0.275),
    ("chin:tip", 0.0, -0.44),
    ("contour:left_jaw", -0.30, -0.30), ("contour:right_jaw", 0.30, -0.30),
    ("contour:left_cheek", -0.36, 0.0), ("contour:right_cheek", 0.36, 0.0),
]


def _height(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    def bump(cx, cy, sx, sy, a):
        return a * np.exp(-(((x - cx) / sx) ** 2 + ((y - cy) / sy) ** 2))

    z = 0.18 * (1.0 - (x / 0.55) ** 2 - (y / 0.75) ** 2)
    z += bump(0.0, -0.02, 0.05, 0.14, 0.10)  # nose ridge
    z += bump(0.0, -0.05, 0.06, 0.05, 0.05)  # nose tip
    z -= bump(-0.165, 0.13, 0.08, 0.05, 0.035) + bump(0.165, 0.13, 0.08, 0.05, 0.035)  # eye sockets
    z += bump(-0.165, 0.22, 0.11, 0.03, 0.02) + bump(0.165, 0.22, 0.11, 0.03, 0.02)  # brows
    z += bump(0.0, -0.24, 0.11, 0.05, 0.025)  # lips
    z += bump(0.0, -0.43, 0.10, 0.06, 0.02)  # chin
    return z


def make_template(nx: int = 61, ny: int = 75) -> tuple[TriMesh, np.ndarray, np.ndarray]:
    """Face-like template, its inner-lip vertex set and boundary crop."""
    base = grid(nx, ny, 2.0, 2.0)
    u = base.vertices[:, 0] - 1.0
    v = base.vertices[:, 1] - 1.0
    # square-to-disc map keeps the grid connectivity and gives an elliptical outline
    x = 0.45 * u * np.sqrt(1.0 - v * v / 2.0)
    y = 0.60 * v * np.sqrt(1.0 - u * u / 2.0)
    verts = np.stack([x, y, _height(x, y)], axis=1)
    mesh = TriMesh(verts, base.faces)

    labels = {}
    for name, lx, ly in LANDMARKS:
        labels[name] = int(np.argmin((x - lx) ** 2 + (y - ly) ** 2))
    mesh = TriMesh(verts, base.faces, labels)

    # inner lips: vertices close to the lip-line ellipse
    t = np.linspace(0.0, 2 * np.pi, 720, endpoint=False)
    curve = MOUTH_CENTER + MOUTH_RADII * np.stack([np.cos(t), np.sin(t)], axis=1)
    d = np.min(np.hypot(x[:, None] - curve[None, :, 0], y[:, None] - curve[None, :, 1]), axis=1)
    spacing = 1.2 / (ny - 1)
    inner = np.flatnonzero(d < 0.6 * spacing)

    ring = np.zeros(nx * ny, dtype=bool)
    ii, jj = np.meshgrid(np.arange(nx), np.arange(ny))
    band = (ii < 2) | (ii > nx - 3) | (jj < 2) | (jj > ny - 3)
    ring[(jj * nx + ii)[band]] = True
    return mesh, inner, np.flatnonzero(ring)


@dataclass(frozen=True, eq=False)
class ShapeModel:
    """Linear model: template + id_modes @ a + exp_modes @ b (modes are (n*3, k))."""

    template: TriMesh
    id_modes: np.ndarray
    exp_modes: np.ndarray
    id_sigma: np.ndarray
    exp_sigma: np.ndarray

    def displacement(self, a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n = self.template.n_vertices
        return (self.id_modes @ a).reshape(n, 3), (self.exp_modes @ b).reshape(n, 3)

    def sample(self, seed: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        rng = make_rng(seed)
        a = rng.normal(size=len(self.id_sigma)) * self.id_sigma
        b = rng.normal(size=len(self.exp_sigma)) * self.exp_sigma
        di, de = self.displacement(a, b)
        return di, de, a, b


def _mode(xy: np.ndarray, normals: np.ndarray, rng, centers, width, amplitude) -> np.ndarray:
    field = np.zeros((len(xy), 3))
    for c in centers:
        w = np.exp(-np.sum((xy - c) ** 2, axis=1) / (2 * width ** 2))
        direction = normals + 0.5 * rng.normal(size=3)
        field += amplitude * rng.normal() * w[:, None] * direction
    return field


def make_shape_model(template: TriMesh, n_id: int = 30, n_exp: int = 20, seed: int = 0) -> ShapeModel:
    rng = make_rng(seed)
    xy = template.vertices[:, :2]
    nrm = vertex_normals(template)
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    id_modes = []
    for _ in range(n_id):
        centers = lo + (hi - lo) * rng.random((3, 2))
        id_modes.append(_mode(xy, nrm, rng, centers, 0.12 + 0.1 * rng.random(), 0.03).ravel())
    exp_modes = []
    for _ in range(n_exp):
        # expressions concentrate around the mouth, with some brow and cheek motion
        around = MOUTH_CENTER + np.array([0.15, 0.08]) * rng.normal(size=(2, 2))
        other = lo + (hi - lo) * rng.random((1, 2))
        centers = np.concatenate([around, other])
        exp_modes.append(_mode(xy, nrm, rng, centers, 0.05 + 0.05 * rng.random(), 0.03).ravel())
    id_modes = np.linalg.qr(np.array(id_modes).T)[0]
    exp_modes = np.linalg.qr(np.array(exp_modes).T)[0]
    # orthonormal columns have tiny per-vertex magnitude; scale so a typical
    # identity moves vertices by ~1.5% of the face size
    root = np.sqrt(template.n_vertices)
    id_sigma = 0.006 * root * np.linspace(1.0, 0.3, n_id)
    exp_sigma = 0.003 * root * np.linspace(1.0, 0.3, n_exp)
    return ShapeModel(template, id_modes, exp_modes, id_sigma, exp_sigma)


def mouth_bases(model: ShapeModel, region, n_id: int = 30, n_exp: int = 20,
                n_samples: int = 200, seed: int = 1):
    """Mouth PCA bases from sampled identity and expression displacements."""
    rng = make_rng(seed)
    n = model.template.n_vertices
    a = rng.normal(size=(n_samples, len(model.id_sigma))) * model.id_sigma
    b = rng.normal(size=(n_samples, len(model.exp_sigma))) * model.exp_sigma
    di = (a @ model.id_modes.T).reshape(n_samples, n, 3)
    de = (b @ model.exp_modes.T).reshape(n_samples, n, 3)
    return mouth_pca_basis(di, region, n_id), mouth_pca_basis(de, region, n_exp)


def write_dataset(out_dir, model: ShapeModel, n_scans: int, seed: int,
                  expressive_fraction: float = 0.5, duplicate_as_real: bool = True) -> Path:
    """Write synthetic scans as OBJ plus landmark files and a manifest CSV.

    With ``duplicate_as_real`` every scan is listed a second time under the
    neutral/expressive label, so the real-data stages of a schedule also have data.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    tmpl = model.template
    for i in range(n_scans):
        s = derive_seed(seed, i)
        di, de, _, _ = model.sample(s)
        expressive = i >= int(round(n_scans * (1 - expressive_fraction)))
        if not expressive:
            de = np.zeros_like(de)
        verts = tmpl.vertices + di + de
        name = f"scan_{i:04d}"
        write_mesh(out / f"{name}.obj", TriMesh(verts, tmpl.faces))
        with open(out / f"{name}.lmk", "w") as fh:
            for label, idx in tmpl.landmarks.items():
                p = verts[idx]
                x, y, z = p.tolist()
                fh.write(f"{label} {x!r} {y!r} {z!r}\n")
        subject = f"s{i:04d}"
        rows.append((f"{name}.obj", "mesh", "synthetic", subject))
        if duplicate_as_real:
            rows.append((f"{name}.obj", "mesh", "expressive" if expressive else "neutral", subject))
    with open(out / "manifest.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "kind", "label", "subject"])
        w.writerows(rows)
    return out / "manifest.csv"


def write_template_assets(out_dir, nx: int = 61, ny: int = 75, seed: int = 0,
                          n_id: int = 30, n_exp: int = 20) -> tuple[dict, ShapeModel]:
    """Template mesh, lip and boundary sets, landmarks and PCA bases as plain files."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh, inner, crop = make_template(nx, ny)
    model = make_shape_model(mesh, n_id, n_exp, seed)
    _, region, _ = build_blending_mask(mesh, inner)
    pid, pexp = mouth_bases(model, region, n_id, n_exp, seed=derive_seed(seed, 1))
    paths = {
        "template": out / "template.obj", "inner_lips": out / "inner_lips.txt",
        "boundary": out / "boundary.txt", "landmarks": out / "landmarks.txt",
        "pca_id": out / "pca_id.npy", "pca_exp": out / "pca_exp.npy",
    }
    write_mesh(paths["template"], mesh)
    write_index_set(paths["inner_lips"], inner)
    write_index_set(paths["boundary"], crop)
    write_landmarks(paths["landmarks"], mesh.landmarks)
    np.save(paths["pca_id"], pid)
    np.save(paths["pca_exp"], pexp)
    return paths, model
