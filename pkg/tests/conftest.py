import numpy as np
import pytest

from sghfnet.config import ModelConfig, OptimConfig, preset
from sghfnet.pfe import extract_features, train_pfe
from sghfnet.pfsm import stack_volumes, train_pfsm
from sghfnet.synth_data import DataConfig, generate_dataset


@pytest.fixture(scope="session")
def smoke_cfg():
    return preset("smoke")


@pytest.fixture(scope="session")
def smoke_subjects(smoke_cfg):
    return generate_dataset(smoke_cfg.data, 0)


@pytest.fixture(scope="session")
def smoke_stack(smoke_cfg, smoke_subjects):
    """Small trained pathology classifier, its features and a trained generator."""
    cfg = smoke_cfg
    pfe, _ = train_pfe(smoke_subjects, cfg.model, cfg.optim, 3, seed=1)
    feats = extract_features(smoke_subjects, pfe)
    vols = stack_volumes(smoke_subjects, cfg.data)
    g, d, log = train_pfsm(smoke_subjects, feats, cfg.model, cfg.optim, cfg.data, seed=1, steps=4, volumes=vols)
    return {"pfe": pfe, "features": feats, "volumes": vols, "g": g, "d": d, "log": log}


# a small but learnable configuration, used for end-to-end checks
SMALL_DATA = DataConfig(n_subjects=100, volume_shape=(24, 24, 12), voi_shape=(12, 12, 6), patch_size=32,
                        patches_per_subject=4)
SMALL_MODEL = ModelConfig(feature_dim=16, widths=(4, 8), heads=2, d_k=8, token_size=8, disc_hidden=(32, 32))
SMALL_OPTIM = OptimConfig(pfe_epochs=20, pfsm_steps=300, sghf_epochs=20, instance_noise=1.0)


@pytest.fixture(scope="session")
def small_subjects():
    return generate_dataset(SMALL_DATA, 3)


@pytest.fixture(scope="session")
def small_pipeline(small_subjects):
    train, test = small_subjects[:80], small_subjects[80:]
    pfe, pfe_log = train_pfe(train, SMALL_MODEL, SMALL_OPTIM, SMALL_OPTIM.pfe_epochs, seed=3)
    feats = extract_features(small_subjects, pfe)
    vols = stack_volumes(train, SMALL_DATA)
    g, d, log = train_pfsm(train, feats, SMALL_MODEL, SMALL_OPTIM, SMALL_DATA, seed=3, volumes=vols)
    return {"train": train, "test": test, "pfe": pfe, "pfe_log": pfe_log, "features": feats,
            "volumes": vols, "g": g, "d": d, "log": log}


def digest(module):
    return {k: v.tobytes() for k, v in module.state_dict().items()}


@pytest.fixture
def rng():
    return np.random.default_rng(0)


# -- acceptance summary ------------------------------------------------------------------


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion covered by the test")


@pytest.fixture(autouse=True)
def _criterion_tag(request, record_property):
    mark = request.node.get_closest_marker("criterion")
    if mark is not None:
        record_property("criterion", mark.args)


def pytest_terminal_summary(terminalreporter):
    rows = {}
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props or (outcome == "passed" and rep.when != "call"):
                continue
            (n, title) = props["criterion"]
            prev_ok, _, prev_detail = rows.get(n, (True, title, ""))
            detail = "; ".join(d for d in (prev_detail, props.get("detail", "")) if d)
            rows[n] = (prev_ok and outcome == "passed", title, detail)
    if not rows:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(rows):
        ok, title, detail = rows[n]
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
