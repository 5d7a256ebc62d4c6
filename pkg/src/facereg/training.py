"""Staged training: manifest loading, per-scan losses, the schedule and the loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import Config
from .decoder import assemble
from .encoder import encode
from .losses import (
    attention_loss,
    boundary_loss,
    chamfer_loss,
    edge_loss,
    l1_vertex_loss,
    normal_loss,
    vertex_normals,
)
from .mesh import PointCloud, TriMesh, edge_set, parse_mesh, read_point_cloud
from .mesh import vertex_normals as mesh_vertex_normals
from .model import EXPRESSION_PATHS, IDENTITY_PATHS, SHARED_PATHS, init_params
from .sampling import derive_seed, make_rng, sample_surface, select_points
from .template import TemplateBundle

log = logging.getLogger(__name__)

LABELS = ("synthetic", "neutral", "expressive")
FILTERS = {
    "synthetic": ("synthetic",),
    "real-neutral": ("neutral",),
    "real-expressive": ("expressive",),
    "real-all": ("neutral", "expressive"),
}
LOSS_TERMS = ("vertex", "chamfer", "normal", "edge", "attention", "boundary")


class NumericError(RuntimeError):
    pass


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    kind: str
    label: str
    subject: str


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    base = path.parent
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = {"path", "kind", "label", "subject"}
        if reader.fieldnames is None or not need <= set(reader.fieldnames):
            raise DataError(f"{path}: manifest needs columns {sorted(need)}")
        for no, row in enumerate(reader, 2):
            kind = row["kind"].strip()
            label = row["label"].strip()
            if kind not in ("mesh", "cloud"):
                raise DataError(f"{path}:{no}: kind must be mesh or cloud, got {kind!r}")
            if label not in LABELS:
                raise DataError(f"{path}:{no}: label must be one of {LABELS}, got {label!r}")
            p = Path(row["path"].strip())
            out.append(ManifestEntry(p if p.is_absolute() else base / p, kind, label,
                                     row["subject"].strip()))
    return out


@dataclass(frozen=True)
class Stage:
    name: str
    data: str
    trainable: tuple
    epochs: int
    batch_size: int


def default_schedule(cfg: Config) -> list[Stage]:
    e = cfg.stage_epochs
    ident = SHARED_PATHS + IDENTITY_PATHS
    expr = SHARED_PATHS + EXPRESSION_PATHS
    every = SHARED_PATHS + IDENTITY_PATHS + EXPRESSION_PATHS
    b = cfg.batch_size
    return [
        Stage("identity-synthetic", "synthetic", ident, e[0], b),
        Stage("identity-real", "real-neutral", ident, e[1], b),
        Stage("expression-synthetic", "synthetic", expr, e[2], b),
        Stage("expression-real", "real-expressive", expr, e[3], b),
        Stage("joint-real", "real-all", every, e[4], b),
        Stage("refine", "real-all", every, e[5], cfg.refine_batch_size),
    ]


@dataclass
class Sample:
    """One manifest entry loaded into memory."""

    entry: ManifestEntry
    mesh: TriMesh | None = None
    cloud: PointCloud | None = None
    normals: np.ndarray | None = None  # vertex normals of a synthetic input mesh
    edges: object = None

    @property
    def synthetic(self) -> bool:
        return self.entry.label == "synthetic"

    def points(self, n: int, seed: int) -> PointCloud:
        if self.mesh is not None:
            return sample_surface(self.mesh, n, seed)
        return select_points(self.cloud, n, seed)


def load_sample(entry: ManifestEntry, bundle: TemplateBundle) -> Sample:
    try:
        if entry.kind == "mesh":
            mesh = parse_mesh(entry.path)
            s = Sample(entry, mesh=mesh)
        else:
            s = Sample(entry, cloud=read_point_cloud(entry.path))
    except OSError as exc:
        raise DataError(f"cannot read {entry.path}: {exc}") from None
    if s.synthetic:
        if s.mesh is None or s.mesh.n_vertices != bundle.n_vertices:
            raise DataError(f"{entry.path}: synthetic scans must be meshes on the template "
                            f"topology ({bundle.n_vertices} vertices)")
        s.normals = mesh_vertex_normals(s.mesh)
        s.edges = edge_set(bundle.mean_shape, reference=s.mesh)
    elif s.cloud is None and s.mesh is not None and s.mesh.n_faces == 0:
        raise DataError(f"{entry.path}: mesh has no faces to sample")
    return s


@dataclass
class LossBreakdown:
    total: ad.Tensor
    terms: dict = field(default_factory=dict)


class Trainer:
    """Owns parameters, optimizer state and the loss definition."""

    def __init__(self, cfg: Config, bundle: TemplateBundle, params: ad.ModelParams | None = None):
        self.cfg = cfg
        self.bundle = bundle
        self.params = params or init_params(cfg, bundle.level_sizes())
        self.opt = ad.Adam(self.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
        self.template_edges = edge_set(bundle.mean_shape)
        self.global_epoch = 0
        self.step_count = 0

    def lr_at(self, global_epoch: int) -> float:
        return self.cfg.lr * self.cfg.lr_decay ** (global_epoch // max(self.cfg.lr_decay_every, 1))

    def item_loss(self, sample: Sample, cloud: PointCloud) -> LossBreakdown:
        cfg = self.cfg
        code = encode(cloud.points, self.params, cfg)
        reg = assemble(code.z_id, code.z_exp, self.params, self.bundle, cfg)
        s = reg.vertices
        faces = self.bundle.mean_shape.faces
        normals = vertex_normals(s, faces)
        terms = {}
        if sample.synthetic:
            terms["vertex"] = l1_vertex_loss(s, sample.mesh.vertices)
            idx = np.arange(s.shape[0])
            terms["normal"] = normal_loss(normals, idx, sample.normals)
            terms["edge"] = edge_loss(s, sample.edges)
        else:
            ch, m = chamfer_loss(s, cloud.points, cfg.sigma)
            terms["chamfer"] = ch
            si = np.flatnonzero(m.keep_s)
            pi = np.flatnonzero(m.keep_p)
            if cloud.normals is not None and (si.size or pi.size):
                idx = np.concatenate([si, m.p_to_s[pi]])
                tgt = np.concatenate([cloud.normals[m.s_to_p[si]], cloud.normals[pi]])
                terms["normal"] = normal_loss(normals, idx, tgt)
            terms["edge"] = edge_loss(s, self.template_edges)
        terms["attention"] = attention_loss(code.attention_logits, sample.synthetic)
        terms["boundary"] = boundary_loss(s, self.bundle.mean_shape, self.bundle.boundary_crop,
                                          self.template_edges)
        w = {"vertex": 1.0, "chamfer": 1.0, "normal": cfg.lambda_norm, "edge": cfg.lambda_edge,
             "attention": cfg.lambda_att, "boundary": cfg.lambda_bnd}
        total = None
        for k, t in terms.items():
            wt = ad.mul(t, w[k])
            total = wt if total is None else ad.add(total, wt)
        return LossBreakdown(total, terms)

    def train_step(self, batch: list[tuple[Sample, PointCloud]], lr: float) -> dict[str, float]:
        self.params.zero_grad()
        logs = {k: 0.0 for k in LOSS_TERMS}
        total = 0.0
        for sample, cloud in batch:
            br = self.item_loss(sample, cloud)
            ad.mul(br.total, 1.0 / len(batch)).backward()
            value = float(br.total.value)
            if not math.isfinite(value):
                names = ", ".join(str(s.entry.path) for s, _ in batch)
                raise NumericError(f"non-finite loss at step {self.step_count} on batch [{names}]")
            total += value / len(batch)
            for k, t in br.terms.items():
                logs[k] += float(t.value) / len(batch)
        for path, t in self.params.items():
            if t.grad is not None and not np.all(np.isfinite(t.grad)):
                names = ", ".join(str(s.entry.path) for s, _ in batch)
                raise NumericError(f"non-finite gradient in {path} at step {self.step_count} "
                                   f"on batch [{names}]")
        self.opt.lr = lr
        self.opt.step()
        self.step_count += 1
        logs["total"] = total
        return logs


def train(manifest, bundle: TemplateBundle, cfg: Config, out_dir, schedule: list[Stage] | None = None,
          params: ad.ModelParams | None = None, log_every: int = 1) -> Trainer:
    """Run every stage in order, writing metrics.csv and checkpoints into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    entries = read_manifest(manifest) if not isinstance(manifest, list) else manifest
    if not entries:
        raise DataError("manifest is empty")
    samples = [load_sample(e, bundle) for e in entries]
    trainer = Trainer(cfg, bundle, params)
    schedule = schedule or default_schedule(cfg)
    for st in schedule:
        for p in st.trainable:
            if not trainer.params.paths(p):
                raise ValueError(f"stage {st.name} references unknown parameter path {p!r}")
    header = ["stage", "epoch", "step", "total", *LOSS_TERMS, "lr"]
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for si, st in enumerate(schedule, 1):
            pool = [i for i, s in enumerate(samples) if s.entry.label in FILTERS[st.data]]
            if not pool or st.epochs == 0:
                log.info("stage %s: skipped (%d scans, %d epochs)", st.name, len(pool), st.epochs)
                continue
            trainer.params.freeze_all_except(st.trainable)
            for epoch in range(st.epochs):
                lr = trainer.lr_at(trainer.global_epoch)
                rng = make_rng(derive_seed(cfg.seed, si, epoch, 0xFFFF))
                # an epoch may pass over the stage's data several times (epoch_repeats)
                order = [(r, pool[i]) for r in range(cfg.epoch_repeats)
                         for i in rng.permutation(len(pool))]
                for b0 in range(0, len(order), st.batch_size):
                    batch = []
                    for r, i in order[b0:b0 + st.batch_size]:
                        seed = derive_seed(cfg.seed, si, epoch, r, i)
                        batch.append((samples[i], samples[i].points(cfg.n_points, seed)))
                    logs = trainer.train_step(batch, lr)
                    writer.writerow([st.name, trainer.global_epoch, trainer.step_count,
                                     repr(logs["total"])] + [repr(logs[k]) for k in LOSS_TERMS]
                                    + [repr(lr)])
                trainer.global_epoch += 1
                fh.flush()
                if cfg.checkpoint_every and trainer.global_epoch % cfg.checkpoint_every == 0:
                    save_checkpoint(out / "checkpoint_latest.frgc", trainer)
            save_checkpoint(out / f"checkpoint_stage{si}.frgc", trainer)
    trainer.params.set_trainable(None, True)
    save_checkpoint(out / "model.frgc", trainer)
    return trainer


def save_checkpoint(path, trainer: Trainer) -> None:
    meta = {"config": trainer.cfg.to_text(), "level_sizes": trainer.bundle.level_sizes(),
            "global_epoch": trainer.global_epoch, "step": trainer.step_count}
    ad.save_params(path, trainer.params, meta)
