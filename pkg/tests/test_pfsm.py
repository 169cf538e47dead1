import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import SMALL_DATA, digest

from sghfnet.gradcheck import check_gradients
from sghfnet.nn_layers import frozen
from sghfnet.optim import Adam, gan_d_loss, gan_source_d_loss
from sghfnet.pfsm import (NEUTRAL_LABEL, build_gan, discriminator_forward, generator_forward, synthesize_feature,
                          synthesize_features, train_pfsm)
from sghfnet.synth_data import preprocess_volume
from sghfnet.tensor_engine import ShapeError, Tensor, concat


def test_generator_shape_determinism_conditioning(smoke_cfg, smoke_subjects):
    g, _ = build_gan(smoke_cfg.model, 0)
    g.eval()
    vol = preprocess_volume(smoke_subjects[0], smoke_cfg.data)
    a0, a1 = generator_forward(vol, 0.0, g), generator_forward(vol, 1.0, g)
    assert a0.shape == a1.shape == (smoke_cfg.model.feature_dim,)
    assert np.array_equal(a0, generator_forward(vol, 0.0, g))
    assert np.linalg.norm(a0 - a1) > 0
    with pytest.raises(ShapeError):
        generator_forward(vol[None], 0.0, g)


def test_discriminator_range_purity_and_width(smoke_cfg, rng):
    _, d = build_gan(smoke_cfg.model, 0)
    d.eval()
    x = rng.standard_normal((10, smoke_cfg.model.feature_dim)) * 3
    y1, y2 = discriminator_forward(x, d)
    for y in (y1.data, y2.data):
        assert np.all((y > 0) & (y < 1))
    assert np.array_equal(discriminator_forward(x, d)[0].data, y1.data)
    s1, _ = discriminator_forward(x[0], d)
    assert s1.shape == ()
    with pytest.raises(ShapeError):
        discriminator_forward(np.ones((2, 3)), d)


def test_discriminator_input_gradient(smoke_cfg, rng):
    _, d = build_gan(smoke_cfg.model, 1)
    d.eval()
    x = rng.standard_normal((3, smoke_cfg.model.feature_dim))
    assert check_gradients(lambda t: discriminator_forward(t[0], d)[0].sum(), [x]) < 1e-4


def test_equilibrium_source_loss():
    half = np.full(5, 0.5)
    assert float(gan_source_d_loss(half, half).data) == pytest.approx(2 * math.log(2), abs=1e-15)


def _train(cfg, stack, subjects, **kw):
    return train_pfsm(subjects, stack["features"], cfg.model, kw.pop("optim", cfg.optim), cfg.data, seed=2,
                      volumes=stack["volumes"], **kw)


def test_kd_zero_leaves_discriminator(smoke_cfg, smoke_subjects, smoke_stack):
    _, d0 = build_gan(smoke_cfg.model, 2)
    _, d, _ = _train(smoke_cfg, smoke_stack, smoke_subjects, optim=replace(smoke_cfg.optim, k_d=0), steps=3)
    assert digest(d) == digest(d0)


def test_same_seed_identical_generator(smoke_cfg, smoke_subjects, smoke_stack):
    a = _train(smoke_cfg, smoke_stack, smoke_subjects, steps=3)
    b = _train(smoke_cfg, smoke_stack, smoke_subjects, steps=3)
    assert digest(a[0]) == digest(b[0]) and digest(a[1]) == digest(b[1])
    assert a[2] == b[2]


def test_missing_features_rejected(smoke_cfg, smoke_subjects, smoke_stack):
    feats = dict(smoke_stack["features"])
    feats.pop(smoke_subjects[0].id)
    with pytest.raises(KeyError):
        train_pfsm(smoke_subjects, feats, smoke_cfg.model, smoke_cfg.optim, smoke_cfg.data, seed=0, steps=1)


def test_gradient_partition_each_step(smoke_cfg, smoke_subjects, smoke_stack):
    seen = []

    def hook(phase, g, d):
        g_grads = [p.grad is not None for p in g.named_parameters().values()]
        d_grads = [p.grad is not None for p in d.named_parameters().values()]
        if phase == "d":
            assert not any(g_grads) and any(d_grads)
        else:
            assert any(g_grads) and not any(d_grads)
        seen.append(phase)

    _train(smoke_cfg, smoke_stack, smoke_subjects, steps=3, on_step=hook)
    assert seen.count("g") == 3 and seen.count("d") == 3 * smoke_cfg.optim.k_d


def test_discriminator_step_descends(smoke_cfg, smoke_stack, smoke_subjects):
    g, d = build_gan(smoke_cfg.model, 4)
    g.eval()
    d.train()
    opt = Adam(d.named_parameters(), lr=1e-3)
    feats = np.stack([smoke_stack["features"][s.id] for s in smoke_subjects])
    labels = np.array([s.label for s in smoke_subjects], dtype=float)
    fakes = g(smoke_stack["volumes"], labels).data
    rng = np.random.default_rng(0)
    deltas = []

    def loss_on(idx):
        y1, y2 = d(concat([Tensor(feats[idx]), Tensor(fakes[idx])], axis=0))
        n = len(idx)
        return gan_d_loss(y1[:n], y1[n:], y2[:n], y2[n:], labels[idx])

    for _ in range(100):
        idx = rng.choice(len(labels), 4, replace=False)
        loss = loss_on(idx)
        opt.zero_grad()
        loss.backward()
        opt.step()
        with frozen(d):
            deltas.append(float(loss_on(idx).data) - float(loss.data))
    assert np.mean(deltas) < 0


def test_synthesis_contracts(smoke_cfg, smoke_subjects, smoke_stack):
    g = smoke_stack["g"]
    s = smoke_subjects[0]
    f = synthesize_feature(s, g, smoke_cfg.data)
    assert f.shape == (smoke_cfg.model.feature_dim,)
    assert np.array_equal(f, synthesize_feature(s, g, smoke_cfg.data, NEUTRAL_LABEL))
    assert np.array_equal(synthesize_feature(s, g, smoke_cfg.data, 1.0), synthesize_feature(s, g, smoke_cfg.data, 1.0))
    fresh, _ = build_gan(smoke_cfg.model, 0)
    with pytest.raises(RuntimeError):
        synthesize_features(fresh, smoke_stack["volumes"][:1], 0.5)


def test_log_columns(smoke_stack):
    row = smoke_stack["log"][-1]
    assert set(row) == {"step", "loss_d", "loss_g", "acc_src", "acc_cls"}
    assert all(np.isfinite(v) for v in row.values())


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def test_synthesized_features_resemble_own_subject(small_pipeline):
    g, feats, test = small_pipeline["g"], small_pipeline["features"], small_pipeline["test"]
    # compared in the standardized units the generator is trained in
    real = {s.id: g.standardize(feats[s.id]) for s in test}
    for c in ("true", None):
        synth = {s.id: g.standardize(synthesize_feature(s, g, SMALL_DATA, float(s.label) if c else None))
                 for s in test}
        same = np.mean([_cos(synth[s.id], real[s.id]) for s in test])
        cross = np.mean([_cos(synth[a.id], real[b.id]) for a in test for b in test if a.label != b.label])
        assert same > cross
