import numpy as np
import pytest

from facereg.config import Config
from facereg.model import init_params
from facereg.synthetic import make_shape_model, make_template, mouth_bases
from facereg.template import build_blending_mask, build_bundle


def tiny_config(**kw) -> Config:
    """Smallest model that still exercises every code path (double precision)."""
    base = dict(latent_id=8, latent_exp=8, encoder_widths=(8, 8, 16), encoder_group=4,
                attention_widths=(8, 4), attention_group=2, decoder_widths=(4, 4),
                decoder_seed_width=8, levels=2, kernels=(8, 4), n_points=64, dtype="float64",
                batch_size=2, stage_epochs=(1, 1, 1, 1, 1, 1), synth_id_components=6,
                synth_exp_components=4)
    base.update(kw)
    cfg = Config(**base)
    cfg.validate()
    return cfg


@pytest.fixture(scope="session")
def tiny_assets():
    mesh, inner, crop = make_template(13, 15)
    model = make_shape_model(mesh, 6, 4, seed=0)
    return mesh, inner, crop, model


@pytest.fixture(scope="session")
def tiny_bundle(tiny_assets):
    mesh, inner, crop, model = tiny_assets
    _, region, _ = build_blending_mask(mesh, inner)
    pid, pexp = mouth_bases(model, region, 6, 4)
    return build_bundle(mesh, inner, crop, mesh.landmarks, pid, pexp, levels=2, kernels=(8, 4))


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_params(tiny_cfg, tiny_bundle):
    return init_params(tiny_cfg, tiny_bundle.level_sizes(), seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def face_assets():
    """The bundled synthetic face template at its default resolution."""
    mesh, inner, crop = make_template()
    model = make_shape_model(mesh, 30, 20, seed=0)
    return mesh, inner, crop, model


@pytest.fixture(scope="session")
def face_bundle(face_assets):
    mesh, inner, crop, model = face_assets
    _, region, _ = build_blending_mask(mesh, inner)
    pid, pexp = mouth_bases(model, region, 30, 20)
    return build_bundle(mesh, inner, crop, mesh.landmarks, pid, pexp)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def report(number: int, name: str, ok: bool, detail: str = "") -> None:
    line = f"ACCEPTANCE {number:2d} {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
