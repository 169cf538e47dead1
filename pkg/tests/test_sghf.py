from dataclasses import replace

import numpy as np
import pytest
from conftest import SMALL_DATA, SMALL_MODEL, SMALL_OPTIM, digest

from sghfnet.config import ModelConfig
from sghfnet.pfsm import build_gan
from sghfnet.sghf import (FreezeViolation, build_model, check_gradient_partition, hard_label, params_digest,
                          predict, predict_proba, train_sghf)


def n_params(model):
    return sum(p.size for p in model.trainable_parameters().values())


def test_structure(smoke_cfg, smoke_stack):
    g = smoke_stack["g"]
    f = smoke_cfg.model.feature_dim
    bench = build_model("benchmark-rf", smoke_cfg.model, 0)
    assert hasattr(bench, "rfem") and not hasattr(bench, "rfem2") and bench.generator is None
    full = build_model("sghf", smoke_cfg.model, 0, g)
    assert full.generator is g
    assert not any(k.startswith("_generator") for k in full.named_parameters())
    assert full.hidden.w.shape == (2 * f, f)
    spf = build_model("spf-only", smoke_cfg.model, 0, g)
    assert spf.encoder_parameters() == {} and set(spf.trainable_parameters()) == {"out.w", "out.b"}


def test_missing_generator_rejected(smoke_cfg):
    for v in ("sghf", "spf-only"):
        with pytest.raises(ValueError):
            build_model(v, smoke_cfg.model, 0)
        untrained, _ = build_gan(smoke_cfg.model, 0)
        with pytest.raises(ValueError):
            build_model(v, smoke_cfg.model, 0, untrained)
    with pytest.raises(ValueError):
        build_model("triple-rf", smoke_cfg.model, 0)


@pytest.mark.parametrize("widths,f", [((8, 16), 16), ((4, 8), 8), ((8, 16, 32, 64), 32), (None, 64)])
def test_double_rf_parameter_ratio(widths, f):
    cfg = ModelConfig(feature_dim=f, widths=widths, backbone="cnn-medium" if widths and len(widths) == 4 else "cnn-small")
    ratio = n_params(build_model("double-rf", cfg, 0)) / n_params(build_model("benchmark-rf", cfg, 0))
    assert 1.9 <= ratio <= 2.1


def test_variant_equivalence_of_encoders(smoke_cfg, smoke_stack):
    vols = smoke_stack["volumes"]
    full = build_model("sghf", smoke_cfg.model, 7, smoke_stack["g"]).eval()
    bench = build_model("benchmark-rf", smoke_cfg.model, 7).eval()
    assert np.array_equal(full.rfem(vols[:, None]).data, bench.rfem(vols[:, None]).data)


def test_freeze_invariant_and_partition(smoke_cfg, smoke_subjects, smoke_stack):
    g = smoke_stack["g"]
    before = params_digest(g)
    raw = digest(g)
    steps = []
    model = build_model("sghf", smoke_cfg.model, 1, g)
    train_sghf(model, smoke_subjects, smoke_cfg.optim, smoke_cfg.data, seed=1, epochs=2,
               volumes=smoke_stack["volumes"], on_step=lambda m: steps.append(check_gradient_partition(m)))
    assert len(steps) > 0
    assert params_digest(g) == before and digest(g) == raw
    assert all(p.grad is None for p in g.named_parameters().values())


def test_freeze_violation_detected(smoke_cfg, smoke_subjects, smoke_stack):
    g, d = build_gan(smoke_cfg.model, 9)
    g.trained = True
    model = build_model("sghf", smoke_cfg.model, 1, g)

    def tamper(m):
        m.generator.encoder.head.b.data += 1.0

    with pytest.raises(FreezeViolation):
        train_sghf(model, smoke_subjects, smoke_cfg.optim, smoke_cfg.data, seed=1, epochs=1,
                   volumes=smoke_stack["volumes"], on_step=tamper)

    def leak(m):
        m.generator.encoder.head.b.grad = np.ones_like(m.generator.encoder.head.b.data)

    g.zero_grad()
    with pytest.raises(FreezeViolation):
        train_sghf(build_model("sghf", smoke_cfg.model, 1, g), smoke_subjects, smoke_cfg.optim, smoke_cfg.data,
                   seed=1, epochs=1, volumes=smoke_stack["volumes"], on_step=leak)
    g.zero_grad()


def test_same_seed_same_weights(smoke_cfg, smoke_subjects, smoke_stack):
    out = []
    for _ in range(2):
        m = build_model("sghf", smoke_cfg.model, 2, smoke_stack["g"])
        train_sghf(m, smoke_subjects, smoke_cfg.optim, smoke_cfg.data, seed=2, epochs=2, volumes=smoke_stack["volumes"])
        out.append(digest(m))
    assert out[0] == out[1]


def test_prediction_contracts(smoke_cfg, smoke_subjects, smoke_stack):
    m = build_model("sghf", smoke_cfg.model, 3, smoke_stack["g"])
    train_sghf(m, smoke_subjects, smoke_cfg.optim, smoke_cfg.data, seed=3, epochs=1, volumes=smoke_stack["volumes"])
    batch = predict_proba(m, smoke_subjects, smoke_cfg.data, batch=7)
    assert np.all((batch > 0) & (batch < 1))
    assert np.max(np.abs(batch - predict_proba(m, smoke_subjects, smoke_cfg.data))) <= 1e-12
    single = np.array([predict(m, s, smoke_cfg.data)[0] for s in smoke_subjects])
    assert np.max(np.abs(single - batch)) <= 1e-12
    rev = predict_proba(m, smoke_subjects[::-1], smoke_cfg.data)
    assert np.max(np.abs(rev[::-1] - batch)) <= 1e-12


def test_tie_rule():
    assert hard_label(0.5) == 1 and hard_label(0.4999999) == 0
    assert hard_label(np.array([0.2, 0.5, 0.9])).tolist() == [0, 1, 1]


def test_true_label_mode_needs_labels(smoke_cfg, smoke_stack):
    m = build_model("sghf", smoke_cfg.model, 0, smoke_stack["g"], c_mode="true")
    with pytest.raises(ValueError):
        m.pathology_features(smoke_stack["volumes"])


def test_desk_training_fits_and_both_branches_live(small_pipeline):
    train = small_pipeline["train"]
    vols = small_pipeline["volumes"]
    m = build_model("sghf", SMALL_MODEL, 0, small_pipeline["g"])
    _, log = train_sghf(m, train, replace(SMALL_OPTIM, sghf_epochs=50), SMALL_DATA, seed=0, volumes=vols)
    acc = np.mean(hard_label(predict_proba(m, train, SMALL_DATA)) == np.array([s.label for s in train]))
    assert acc > 0.9
    f_p = m.pathology_features(vols[:8])
    a = m(vols[:8], f_p).data
    assert np.array_equal(a, m(vols[:8], f_p).data)
    # zeroing the raw f_p branch moves the output
    assert np.max(np.abs(m(vols[:8], np.zeros_like(f_p)).data - a)) > 0
