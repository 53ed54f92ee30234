import numpy as np
import pytest

from hydravton.dataset import synth_dataset
from hydravton.rng import Rng
from hydravton.training import AdamW, TrainingError, train_toy
from hydravton.tensor import Tensor

from conftest import tiny_model


def test_zero_lr_leaves_parameters_bitwise():
    model = tiny_model(seed=1)
    before = {n: t.data.copy() for n, t in model.named_parameters().items()}
    data = synth_dataset(2, Rng(2), latent_hw=(4, 4))
    train_toy(model, data, steps=3, rng=Rng(3), lr=0.0, batch_size=2)
    for n, t in model.named_parameters().items():
        assert t.data.tobytes() == before[n].tobytes(), n


def test_training_deterministic_per_seed():
    curves = []
    for _ in range(2):
        model = tiny_model(seed=4)
        data = synth_dataset(2, Rng(5), latent_hw=(4, 4))
        curve, _ = train_toy(model, data, steps=5, rng=Rng(6), lr=1e-3, batch_size=2)
        curves.append(curve)
    assert curves[0] == curves[1]


def test_loss_decreases_on_short_overfit():
    model = tiny_model(seed=7)
    data = synth_dataset(2, Rng(8), latent_hw=(4, 4))
    curve, ckpt = train_toy(model, data, steps=200, rng=Rng(9), lr=2e-3, batch_size=2)
    assert np.mean(curve[-15:]) < 0.5 * np.mean(curve[:5])
    assert "main.conv_in.weight" in ckpt.names()


def test_adamw_moment_shapes_match_parameters():
    model = tiny_model(seed=10)
    opt = AdamW(model.parameters(), lr=1e-3)
    for p, m, v in zip(opt.params, opt.m, opt.v):
        assert m.shape == p.data.shape and v.shape == p.data.shape


def test_adamw_weight_decay_shrinks_unused_weights():
    p = Tensor(np.full(4, 2.0, np.float32), requires_grad=True)
    p.grad = np.zeros(4, np.float32)
    opt = AdamW([p], lr=0.1, weight_decay=0.5)
    opt.step()
    np.testing.assert_allclose(p.data, 2.0 - 0.1 * 0.5 * 2.0, atol=1e-6)


def test_nan_loss_aborts_with_step_index():
    model = tiny_model(seed=11)
    # poison a parameter so the forward overflows float32 on step 0
    model.main.conv_in.weight.data[...] = 1e38
    data = synth_dataset(1, Rng(12), latent_hw=(4, 4))
    with pytest.raises(TrainingError, match="step 0"):
        train_toy(model, data, steps=2, rng=Rng(13), lr=1e-3, batch_size=1)


def test_log_fn_receives_constant_lr():
    model = tiny_model(seed=14)
    data = synth_dataset(1, Rng(15), latent_hw=(4, 4))
    rows = []
    train_toy(
        model, data, steps=3, rng=Rng(16), lr=5e-5, batch_size=1,
        log_fn=lambda s, l, lr: rows.append((s, l, lr)),
    )
    assert [r[0] for r in rows] == [0, 1, 2]
    assert all(r[2] == 5e-5 for r in rows)
