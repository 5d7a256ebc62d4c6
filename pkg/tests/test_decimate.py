import numpy as np
import pytest

from facereg.bvh import FaceBVH
from facereg.decimate import decimate
from facereg.mesh import edge_set, vertex_normals
from facereg.primitives import grid, icosphere
from facereg.template import build_upsampler


@pytest.fixture(scope="module")
def sphere_levels():
    fine = icosphere(4)
    mid, anc1 = decimate(fine, 642)
    coarse, anc2 = decimate(mid, 160)
    return fine, (mid, anc1), (coarse, anc2)


def closed_manifold(m):
    f = m.faces
    e = np.sort(np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return bool(np.all(counts == 2))


def test_target_must_shrink():
    with pytest.raises(ValueError):
        decimate(icosphere(1), icosphere(1).n_vertices)
    with pytest.raises(ValueError):
        decimate(icosphere(1), 3)


def test_sphere_counts_and_topology(sphere_levels):
    _, (mid, anc), _ = sphere_levels
    assert mid.n_vertices == 642 and anc.reached_target
    assert closed_manifold(mid)
    assert mid.n_vertices - len(edge_set(mid)) + mid.n_faces == 2
    # orientation survives: normals still point outwards
    n = vertex_normals(mid)
    assert np.all(np.sum(n * mid.vertices, axis=1) > 0)


def test_decimated_surface_stays_close(sphere_levels):
    fine, (mid, anc), _ = sphere_levels
    diag = fine.bbox_diagonal()
    to_fine = FaceBVH(fine).closest(mid.vertices).distance
    to_coarse = FaceBVH(mid).closest(fine.vertices).distance
    assert to_fine.mean() < 0.01 * diag
    assert to_coarse.mean() < 0.01 * diag


def test_ancestry_is_consistent(sphere_levels):
    fine, (mid, anc), _ = sphere_levels
    assert np.array_equal(fine.vertices[anc.kept], mid.vertices)
    assert np.array_equal(anc.merged_into[anc.kept], np.arange(mid.n_vertices))
    assert anc.merged_into.min() >= 0 and anc.merged_into.max() < mid.n_vertices


def test_planar_grid_stays_planar():
    g = grid(21, 21)
    coarse, anc = decimate(g, 110)
    assert coarse.n_vertices == 110
    assert np.abs(coarse.vertices[:, 2]).max() <= 1e-9
    assert coarse.face_areas().sum() == pytest.approx(1.0, abs=1e-9)
    # the outline is kept: all four corners survive
    assert {0, 20, 420, 440} <= set(anc.kept.tolist())


def test_upsampler_rows(sphere_levels):
    fine, (mid, anc), _ = sphere_levels
    u = build_upsampler(fine, mid, anc.kept)
    nnz = np.diff(u.indptr)
    assert nnz.max() <= 3 and u.data.min() >= 0
    assert np.abs(np.asarray(u.sum(axis=1)).ravel() - 1).max() <= 1e-9
    # coincident vertices carry a single unit weight
    rows = u[anc.kept]
    assert np.all(np.diff(rows.indptr) == 1) and np.all(rows.data == 1.0)
    assert np.array_equal(rows.indices, np.arange(mid.n_vertices))


def test_upsampler_reconstruction(sphere_levels):
    fine, (mid, a1), (coarse, a2) = sphere_levels
    u1 = build_upsampler(fine, mid, a1.kept)
    u2 = build_upsampler(mid, coarse, a2.kept)
    diag = fine.bbox_diagonal()
    err1 = np.linalg.norm(u1 @ mid.vertices - fine.vertices, axis=1).mean()
    err12 = np.linalg.norm(u1 @ (u2 @ coarse.vertices) - fine.vertices, axis=1).mean()
    assert err1 < 0.02 * diag
    assert err12 < 0.05 * diag
