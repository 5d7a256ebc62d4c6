"""Command-line entry point: ``facereg <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .bvh import FaceBVH
from .config import Config, ConfigError, config_from_text, load_config
from .container import ContainerError
from .evaluation import (
    DegenerateInterpolation,
    error_cdf,
    fit_gaussian,
    group_errors,
    landmark_distances,
    resampling_stability,
    sample_gaussian,
    specificity,
    surface_error,
)
from .inference import Registrar
from .mesh import (
    MeshParseError,
    PointCloud,
    TriMesh,
    parse_mesh,
    read_index_set,
    read_landmarks,
    read_point_cloud,
    read_point_landmarks,
    write_mesh,
    write_ply,
)
from .model import FULL_SCALE_LEVELS, check_compatible, init_params
from .sampling import derive_seed
from .template import BundleError, SpiralError, build_bundle, load_bundle, save_bundle
from .training import DataError, NumericError, read_manifest, train

log = logging.getLogger("facereg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------- helpers


def _config(args, base: Config | None = None) -> Config:
    """Effective config: base (or defaults/file/env), then --set, then --seed."""
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if base is None:
        return load_config(args.config, overrides)
    cfg = base.replace()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        k, v = item.split("=", 1)
        cfg.set(k.strip(), v.strip())
    cfg.validate()
    return cfg


def _echo(out_dir, cfg: Config) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    return out


def _load_model(args):
    bundle = load_bundle(args.bundle)
    params, meta = ad.load_params(args.model)
    if "config" not in meta:
        raise DataError(f"{args.model}: checkpoint carries no config")
    cfg = _config(args, config_from_text(meta["config"]))
    check_compatible(params, cfg, bundle.level_sizes())
    return Registrar(params, cfg, bundle), cfg


def _read_scan(path) -> TriMesh | PointCloud:
    path = Path(path)
    if path.suffix.lower() == ".ply":
        # a PLY with a non-empty face element is a mesh; otherwise a point cloud
        with open(path, "rb") as fh:
            head = fh.read(65536).split(b"end_header", 1)[0].decode("ascii", "replace")
        n_faces = 0
        for line in head.splitlines():
            parts = line.split()
            if parts[:2] == ["element", "face"] and len(parts) == 3:
                n_faces = int(parts[2])
        return parse_mesh(path) if n_faces else read_point_cloud(path)
    if path.suffix.lower() == ".obj":
        return parse_mesh(path)
    return read_point_cloud(path)


def _scan_seed(cfg: Config, index: int) -> int:
    return derive_seed(cfg.seed, index)


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _floats(a) -> list[float]:
    return [float(x) for x in np.asarray(a, dtype=np.float64).ravel()]


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, items))


# --------------------------------------------------------------------------- subcommands


def cmd_prepare_template(args) -> int:
    cfg = _config(args)
    template = parse_mesh(args.template)
    inner = read_index_set(args.inner_lips)
    crop = read_index_set(args.boundary)
    landmarks = read_landmarks(args.landmarks) if args.landmarks else {}
    pca_id = np.load(args.pca_id)
    pca_exp = np.load(args.pca_exp)
    bundle = build_bundle(template, inner, crop, landmarks, pca_id, pca_exp, cfg.c, cfg.epsilon,
                          cfg.d, cfg.levels, cfg.factor, cfg.kernels, cfg.t_factor)
    out = Path(args.out)
    _echo(out.parent, cfg)
    save_bundle(out, bundle)
    print(f"bundle: {out} levels {bundle.level_sizes()}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    from .synthetic import write_dataset, write_template_assets

    cfg = _config(args)
    out = _echo(args.out, cfg)
    paths, model = write_template_assets(out / "template", args.nx, args.ny, cfg.seed,
                                         cfg.synth_id_components, cfg.synth_exp_components)
    manifest = write_dataset(out / "scans", model, args.n_scans, derive_seed(cfg.seed, 2),
                             args.expressive_fraction, not args.no_duplicate)
    print(f"manifest: {manifest}")
    if not args.no_bundle:
        bundle = build_bundle(parse_mesh(paths["template"]), read_index_set(paths["inner_lips"]),
                              read_index_set(paths["boundary"]), read_landmarks(paths["landmarks"]),
                              np.load(paths["pca_id"]), np.load(paths["pca_exp"]), cfg.c,
                              cfg.epsilon, cfg.d, cfg.levels, cfg.factor, cfg.kernels, cfg.t_factor)
        save_bundle(out / "bundle.frgc", bundle)
        print(f"bundle: {out / 'bundle.frgc'} levels {bundle.level_sizes()}")
    return EXIT_OK


def cmd_train(args) -> int:
    bundle = load_bundle(args.bundle)
    params = None
    if args.init:
        params, meta = ad.load_params(args.init)
        cfg = _config(args, config_from_text(meta["config"])) if args.config is None else _config(args)
        check_compatible(params, cfg, bundle.level_sizes())
    else:
        cfg = _config(args)
    trainer = train(args.manifest, bundle, cfg, args.out, params=params)
    print(f"model: {Path(args.out) / 'model.frgc'} steps {trainer.step_count}")
    return EXIT_OK


def cmd_register(args) -> int:
    reg, cfg = _load_model(args)
    scan = _read_scan(args.scan)
    seed = cfg.seed
    n = args.n_points or cfg.n_points
    res = reg.register_scan(scan, seed, n)
    out = _echo(args.out, cfg)
    stem = Path(args.scan).stem
    mesh_path = out / f"{stem}_registered.{args.format}"
    write_mesh(mesh_path, res.mesh)
    if res.attention is not None:
        write_ply(out / f"{stem}_attention.ply", res.points, None,
                  {"attention": np.asarray(res.attention, dtype=np.float64)})
    side = {"scan": str(args.scan), "seed": seed, "n_points": n,
            "z_id": _floats(res.code.z_id.value), "z_exp": _floats(res.code.z_exp.value),
            "z_joint": _floats(res.code.z_joint.value)}
    (out / f"{stem}_registered.json").write_text(json.dumps(side, indent=1))
    print(f"registration: {mesh_path}")
    return EXIT_OK


def _joint_codes(reg: Registrar, cfg: Config, entries, jobs: int):
    def one(item):
        i, e = item
        res = reg.register_scan(_read_scan(e.path), _scan_seed(cfg, i))
        return res.code.z_joint.value.ravel().astype(np.float64), res.mesh.vertices
    return _map(one, list(enumerate(entries)), jobs)


def _unique_entries(manifest):
    seen, out = set(), []
    for e in read_manifest(manifest):
        if e.path not in seen:
            seen.add(e.path)
            out.append(e)
    return out


def cmd_generate(args) -> int:
    reg, cfg = _load_model(args)
    stats = Path(args.stats)
    if not stats.exists():
        if not args.manifest:
            raise DataError(f"latent statistics {stats} not found; compute them first with "
                            f"'facereg generate --manifest TRAINING_MANIFEST --stats {stats} ...' "
                            f"or 'facereg evaluate', which writes latent_stats.npz")
        codes = _joint_codes(reg, cfg, _unique_entries(args.manifest), args.jobs)
        mean, cov = fit_gaussian(np.stack([z for z, _ in codes]))
        np.savez(stats, mean=mean, cov=cov)
        print(f"latent statistics: {stats}")
    with np.load(stats) as f:
        mean, cov = f["mean"], f["cov"]
    out = _echo(args.out, cfg)
    if args.n == 0:
        return EXIT_OK
    zs = sample_gaussian(mean, cov, args.n, cfg.seed)

    def one(i):
        write_mesh(out / f"sample_{i:05d}.{args.format}", reg.decode_joint(zs[i]))
    _map(one, range(args.n), args.jobs)
    print(f"wrote {args.n} samples to {out}")
    return EXIT_OK


def cmd_interpolate(args) -> int:
    from .evaluation import interpolate_latents

    reg, cfg = _load_model(args)
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    a = reg.register_scan(_read_scan(args.source), _scan_seed(cfg, 0)).code
    b = reg.register_scan(_read_scan(args.target), _scan_seed(cfg, 1)).code
    out = _echo(args.out, cfg)
    rows = []
    for k, t in enumerate(np.linspace(0.0, 1.0, args.steps)):
        t = float(t)
        zi, ze = a.z_id.value, a.z_exp.value
        if args.mode in ("joint", "identity"):
            zi = interpolate_latents(a.z_id.value, b.z_id.value, t)
        if args.mode in ("joint", "expression"):
            ze = interpolate_latents(a.z_exp.value, b.z_exp.value, t)
        write_mesh(out / f"interp_{k:03d}.{args.format}", reg.decode(zi, ze))
        rows.append((k, repr(t)))
    _write_rows(out / "interpolation.csv", ["index", "t"], rows)
    print(f"wrote {args.steps} {args.mode} interpolation meshes to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    reg, cfg = _load_model(args)
    entries = _unique_entries(args.manifest)
    if not entries:
        raise DataError("manifest is empty")
    out = _echo(args.out, cfg)

    def one(item):
        i, e = item
        scan = _read_scan(e.path)
        res = reg.register_scan(scan, _scan_seed(cfg, i))
        med = surface_error(res.mesh.vertices, FaceBVH(scan)).median if isinstance(scan, TriMesh) else None
        lmk = Path(e.path).with_suffix(args.landmark_suffix)
        dists = None
        if lmk.exists():
            raw = read_point_landmarks(lmk, scan if isinstance(scan, TriMesh) else None)
            dists = landmark_distances(res.mesh.vertices, raw, reg.bundle.landmark_map)
        return res.code.z_joint.value.ravel().astype(np.float64), res.mesh.vertices, med, dists

    results = _map(one, list(enumerate(entries)), args.jobs)
    medians = [(e, r[2]) for e, r in zip(entries, results) if r[2] is not None]
    _write_rows(out / "surface_errors.csv", ["scan", "median_error"],
                [(str(e.path), repr(m)) for e, m in medians])
    if medians:
        _write_rows(out / "error_cdf.csv", ["threshold", "fraction"],
                    [(repr(t), repr(f)) for t, f in error_cdf([m for _, m in medians])])
    per_scan = [r[3] for r in results if r[3]]
    if per_scan:
        _write_rows(out / "landmark_errors.csv", ["group", "median", "std", "count"],
                    [(g.group, repr(g.median), repr(g.std), g.count) for g in group_errors(per_scan)])
    latents = np.stack([r[0] for r in results])
    regs = np.stack([r[1] for r in results])
    if len(entries) >= 2:
        mean, cov = fit_gaussian(latents)
        np.savez(out / "latent_stats.npz", mean=mean, cov=cov)
    if args.stability_repeats:
        rows = []
        for i, e in enumerate(entries[: args.stability_scans]):
            scan = _read_scan(e.path)
            st = resampling_stability(lambda s: reg.register_scan(scan, s).mesh.vertices,
                                      args.stability_repeats, _scan_seed(cfg, i))
            rows.append((str(e.path), repr(st.median_of_medians), repr(st.median_of_maxima)))
        _write_rows(out / "stability.csv", ["scan", "median_of_medians", "median_of_maxima"], rows)
    if args.specificity_samples:
        sp = specificity(lambda z: reg.decode_joint(z).vertices, latents, regs,
                         args.specificity_samples, cfg.seed)
        _write_rows(out / "specificity.csv", ["samples", "specificity"],
                    [(args.specificity_samples, repr(sp.value))])
    print(f"evaluated {len(entries)} scans into {out}")
    return EXIT_OK


def cmd_param_count(args) -> int:
    if args.model:
        params, _ = ad.load_params(args.model)
    else:
        cfg = _config(args)
        sizes = load_bundle(args.bundle).level_sizes() if args.bundle else FULL_SCALE_LEVELS
        params = init_params(cfg, sizes)
    print(f"total {params.count()}")
    for path, n in params.subtree_counts(args.depth).items():
        print(f"{path} {n}")
    return EXIT_OK


# --------------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="facereg", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int)

    def model(sp):
        sp.add_argument("--model", required=True, help="checkpoint (.frgc)")
        sp.add_argument("--bundle", required=True, help="template bundle (.frgc)")
        common(sp, config=False)

    s = sub.add_parser("prepare-template", help="decimate, build spirals, mask and PCA bundle")
    s.add_argument("--template", required=True)
    s.add_argument("--inner-lips", required=True)
    s.add_argument("--boundary", required=True)
    s.add_argument("--landmarks")
    s.add_argument("--pca-id", required=True, help=".npy of shape (|S_mouth|*3, k)")
    s.add_argument("--pca-exp", required=True)
    s.add_argument("--out", required=True, help="bundle file to write")
    common(s)
    s.set_defaults(fn=cmd_prepare_template)

    s = sub.add_parser("synth-data", help="write a synthetic template, scans and bundle")
    s.add_argument("--out", required=True)
    s.add_argument("--n-scans", type=int, default=20)
    s.add_argument("--nx", type=int, default=61)
    s.add_argument("--ny", type=int, default=75)
    s.add_argument("--expressive-fraction", type=float, default=0.5)
    s.add_argument("--no-duplicate", action="store_true",
                   help="do not also list scans as neutral/expressive real data")
    s.add_argument("--no-bundle", action="store_true")
    common(s)
    s.set_defaults(fn=cmd_synth_data)

    s = sub.add_parser("train", help="run the staged training schedule")
    s.add_argument("--manifest", required=True)
    s.add_argument("--bundle", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--init", help="checkpoint to start from")
    common(s)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("register", help="register one scan onto the template")
    model(s)
    s.add_argument("--scan", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--n-points", type=int)
    s.add_argument("--format", choices=("obj", "ply"), default="obj")
    s.set_defaults(fn=cmd_register)

    s = sub.add_parser("generate", help="sample faces from the joint latent Gaussian")
    model(s)
    s.add_argument("--stats", required=True, help="latent statistics .npz (read, or written)")
    s.add_argument("--manifest", help="training manifest to compute missing statistics from")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--format", choices=("obj", "ply"), default="obj")
    s.set_defaults(fn=cmd_generate)

    s = sub.add_parser("interpolate", help="interpolate between two registered scans")
    model(s)
    s.add_argument("--from", "--source", dest="source", required=True)
    s.add_argument("--to", "--target", dest="target", required=True)
    s.add_argument("--mode", choices=("joint", "identity", "expression"), default="joint")
    s.add_argument("--steps", type=int, default=5)
    s.add_argument("--out", required=True)
    s.add_argument("--format", choices=("obj", "ply"), default="obj")
    s.set_defaults(fn=cmd_interpolate)

    s = sub.add_parser("evaluate", help="landmark, surface, stability and specificity metrics")
    model(s)
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--landmark-suffix", default=".lmk")
    s.add_argument("--stability-repeats", type=int, default=0)
    s.add_argument("--stability-scans", type=int, default=1)
    s.add_argument("--specificity-samples", type=int, default=0)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("param-count", help="parameter totals by hierarchical path")
    s.add_argument("--model", help="checkpoint; otherwise counts the configured model")
    s.add_argument("--bundle", help="bundle giving level sizes (default: full-scale hierarchy)")
    s.add_argument("--depth", type=int, default=2)
    common(s)
    s.set_defaults(fn=cmd_param_count)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, UsageError) as exc:
        print(f"facereg: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, DegenerateInterpolation) as exc:
        print(f"facereg: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, MeshParseError, BundleError, SpiralError, ContainerError, OSError,
            KeyError, ValueError) as exc:
        print(f"facereg: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
