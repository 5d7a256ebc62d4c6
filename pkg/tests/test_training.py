import numpy as np
import pytest

from facereg import autodiff as ad
from facereg.autodiff.gradcheck import check_gradients
from facereg.mesh import PointCloud
from facereg.model import check_compatible, init_params
from facereg.sampling import sample_surface
from facereg.synthetic import write_dataset
from facereg.training import (
    DataError,
    NumericError,
    Trainer,
    default_schedule,
    load_sample,
    read_manifest,
    train,
)

from conftest import tiny_config


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory, tiny_assets):
    _, _, _, model = tiny_assets
    return write_dataset(tmp_path_factory.mktemp("data"), model, 4, seed=11)


def _metrics(path):
    return (path / "metrics.csv").read_text()


def test_manifest_parsing(tiny_data):
    entries = read_manifest(tiny_data)
    assert len(entries) == 8
    assert {e.label for e in entries} == {"synthetic", "neutral", "expressive"}
    assert all(e.path.is_absolute() or e.path.exists() for e in entries)


@pytest.mark.parametrize("text, match", [
    ("path,kind\nx.obj,mesh\n", "columns"),
    ("path,kind,label,subject\nx.obj,voxels,neutral,a\n", "kind must be"),
    ("path,kind,label,subject\nx.obj,mesh,happy,a\n", "label must be"),
])
def test_manifest_errors(tmp_path, text, match):
    p = tmp_path / "m.csv"
    p.write_text(text)
    with pytest.raises(DataError, match=match):
        read_manifest(p)


def test_missing_scan_and_empty_manifest(tmp_path, tiny_bundle):
    p = tmp_path / "m.csv"
    p.write_text("path,kind,label,subject\nnope.obj,mesh,neutral,a\n")
    with pytest.raises(DataError, match="nope.obj"):
        load_sample(read_manifest(p)[0], tiny_bundle)
    p.write_text("path,kind,label,subject\n")
    with pytest.raises(DataError, match="empty"):
        train(p, tiny_bundle, tiny_config(), tmp_path / "out")


def test_schedule_shape():
    st = default_schedule(tiny_config(stage_epochs=(1, 2, 3, 4, 5, 6), refine_batch_size=1))
    assert [s.epochs for s in st] == [1, 2, 3, 4, 5, 6]
    assert st[-1].batch_size == 1 and st[0].data == "synthetic"
    assert not any(p.startswith("decoder_exp") for p in st[0].trainable)
    assert not any(p.startswith("decoder_id") for p in st[2].trainable)


def test_lr_schedule(tiny_bundle):
    t = Trainer(tiny_config(lr=1e-3, lr_decay=0.5, lr_decay_every=5), tiny_bundle)
    assert [t.lr_at(e) for e in (0, 4, 5, 9, 10)] == [1e-3, 1e-3, 5e-4, 5e-4, 2.5e-4]


def test_training_is_deterministic_and_staged(tmp_path, tiny_data, tiny_bundle):
    cfg = tiny_config(seed=5)
    a = train(tiny_data, tiny_bundle, cfg, tmp_path / "a")
    train(tiny_data, tiny_bundle, cfg, tmp_path / "b")
    assert _metrics(tmp_path / "a") == _metrics(tmp_path / "b")
    rows = _metrics(tmp_path / "a").splitlines()
    assert rows[0].startswith("stage,epoch,step,total") and len(rows) > 6

    stage = {i: ad.load_params(tmp_path / "a" / f"checkpoint_stage{i}.frgc")[0] for i in range(1, 7)}
    # the expression stages leave the identity branch alone, bit for bit
    for path in stage[2]:
        if path.startswith(("decoder_id", "encoder/head_id")):
            assert np.array_equal(stage[2][path].value, stage[3][path].value)
            assert np.array_equal(stage[3][path].value, stage[4][path].value)
        if path.startswith(("decoder_exp", "encoder/head_exp")):
            assert np.array_equal(stage[1][path].value, init_params(cfg, tiny_bundle.level_sizes())[path].value)
    # something moved in every stage that had data
    for i in range(2, 7):
        assert any(not np.array_equal(stage[i - 1][p].value, stage[i][p].value) for p in stage[i])

    final, meta = ad.load_params(tmp_path / "a" / "model.frgc")
    check_compatible(final, cfg, tiny_bundle.level_sizes())
    assert meta["level_sizes"] == tiny_bundle.level_sizes() and "latent_id = 8" in meta["config"]
    assert all(final.is_trainable(p) for p in final)
    assert a.global_epoch == 6 and (tmp_path / "a" / "checkpoint_latest.frgc").exists()


def test_non_finite_loss_names_batch(tmp_path, tiny_data, tiny_bundle):
    cfg = tiny_config()
    params = init_params(cfg, tiny_bundle.level_sizes(), seed=0)
    params["decoder_id/out/bias"].value[:] = np.nan
    with pytest.raises(NumericError, match=r"scan_000\d\.obj"):
        train(tiny_data, tiny_bundle, cfg, tmp_path / "nan", params=params)


def _randomized(cfg, bundle):
    p = init_params(cfg, bundle.level_sizes(), seed=2)
    rng = np.random.default_rng(3)
    for path in p:
        if "/out/" in path:
            p[path].value = rng.normal(scale=0.02, size=p[path].shape)
    return p


def test_full_pipeline_gradients_synthetic(tiny_data, tiny_bundle):
    cfg = tiny_config()
    tr = Trainer(cfg, tiny_bundle, _randomized(cfg, tiny_bundle))
    sample = load_sample(read_manifest(tiny_data)[0], tiny_bundle)
    cloud = sample.points(cfg.n_points, 0)
    inputs = [tr.params[p] for p in ("encoder/trunk/pn1/weight", "encoder/attention/out/bias",
                                     "encoder/head_id/weight", "decoder_id/seed/bias",
                                     "decoder_exp/block1/conv/weight", "decoder_id/out/weight")]
    f = lambda: tr.item_loss(sample, cloud).total
    assert check_gradients(f, inputs) <= 1e-4


def test_full_pipeline_gradients_real(tiny_data, tiny_bundle):
    cfg = tiny_config(sigma=1e9)
    tr = Trainer(cfg, tiny_bundle, _randomized(cfg, tiny_bundle))
    entry = [e for e in read_manifest(tiny_data) if e.label != "synthetic"][0]
    sample = load_sample(entry, tiny_bundle)
    pc = sample_surface(sample.mesh, cfg.n_points, 1)
    cloud = PointCloud(pc.points, pc.normals)
    inputs = [tr.params[p] for p in ("encoder/trunk/pn2/gn_scale", "encoder/head_exp/bias",
                                     "decoder_exp/block0/mix/weight", "decoder_id/out/bias")]
    f = lambda: tr.item_loss(sample, cloud).total
    assert check_gradients(f, inputs) <= 1e-4
