"""Registration and generation with a trained model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .config import Config
from .decoder import assemble
from .encoder import LatentCode, encode, heads_from_joint
from .mesh import PointCloud, TriMesh
from .sampling import sample_surface, select_points
from .template import TemplateBundle


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    mesh: TriMesh
    code: LatentCode
    points: np.ndarray
    attention: np.ndarray | None


class Registrar:
    """Bundles a frozen model, its config and the template for repeated use."""

    def __init__(self, params: ad.ModelParams, cfg: Config, bundle: TemplateBundle):
        self.params = params
        self.cfg = cfg
        self.bundle = bundle

    def _mesh(self, vertices: np.ndarray) -> TriMesh:
        v = np.asarray(vertices, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise FloatingPointError("registration produced non-finite coordinates")
        return TriMesh(v, self.bundle.mean_shape.faces, self.bundle.landmark_map)

    def register_points(self, points: np.ndarray) -> RegistrationResult:
        code = encode(points, self.params, self.cfg)
        reg = assemble(code.z_id, code.z_exp, self.params, self.bundle, self.cfg)
        return RegistrationResult(self._mesh(reg.vertices.value), code, np.asarray(points),
                                  code.attention())

    def register_scan(self, scan: TriMesh | PointCloud, seed: int, n_points: int | None = None
                      ) -> RegistrationResult:
        n = n_points or self.cfg.n_points
        if isinstance(scan, TriMesh):
            cloud = sample_surface(scan, n, seed)
        else:
            cloud = select_points(scan, n, seed)
        return self.register_points(cloud.points)

    def decode(self, z_id, z_exp) -> TriMesh:
        dt = self.params.dtype
        reg = assemble(ad.Tensor(np.asarray(z_id, dtype=dt)), ad.Tensor(np.asarray(z_exp, dtype=dt)),
                       self.params, self.bundle, self.cfg)
        return self._mesh(reg.vertices.value)

    def decode_joint(self, z_joint) -> TriMesh:
        z_id, z_exp = heads_from_joint(z_joint, self.params)
        reg = assemble(z_id, z_exp, self.params, self.bundle, self.cfg)
        return self._mesh(reg.vertices.value)
