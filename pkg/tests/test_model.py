import numpy as np
import pytest

from seqdx import tensor as T
from seqdx.model import (ConfigError, EmptySequenceError, ModelConfig, encode_image,
                         forward_sequence, head_probs, init_model, layer_shapes)
from seqdx.tensor import ShapeError, Tensor

from conftest import tiny_config, tiny_model


def _images(rng, n, size=8):
    return [Tensor(rng.random((3, size, size))) for _ in range(n)]


def test_init_is_deterministic():
    a, b = tiny_model(5), tiny_model(5)
    for (na, pa), (nb, pb) in zip(a.named_parameters().items(), b.named_parameters().items()):
        assert na == nb and np.array_equal(pa.data, pb.data)
    c = tiny_model(6)
    assert not np.array_equal(a.head.weight.data, c.head.weight.data)


def test_no_freezing_by_default():
    m = tiny_model()
    assert all(p.requires_grad for p in m.named_parameters().values())


def test_freeze_first_n_counts_convs_then_fcs():
    m = tiny_model(freeze_first_n=3)
    frozen = [layer.frozen for layer in m.encoder_layers]
    assert frozen == [True, True, True, False]
    assert all(p.requires_grad for p in m.lstm.parameters().values())
    assert m.head.weight.requires_grad


def test_full_scale_single_disease_shapes():
    cfg = ModelConfig(image_size=32, encoder_channels=[8, 16, 32], fc_sizes=[512, 512],
                      lstm_hidden=600, num_outputs=1)
    shapes = layer_shapes(cfg)
    assert shapes["head.weight"] == (1, 600)
    assert shapes["lstm.W_i"] == (600, 512)
    assert shapes["lstm.U_f"] == (600, 600)
    m = init_model(cfg, 0)
    assert m.head.weight.shape == (1, 600)
    assert encode_image(m, Tensor(np.zeros((3, 32, 32)))).shape == (512,)
    assert {k: p.shape for k, p in m.named_parameters().items()} == shapes


def test_parameter_count_is_a_function_of_config():
    cfg = tiny_config()
    expected = sum(int(np.prod(s)) for s in layer_shapes(cfg).values())
    assert init_model(cfg, 1).num_parameters() == init_model(cfg, 2).num_parameters() == expected


@pytest.mark.parametrize("kw", [dict(num_outputs=3), dict(image_size=10), dict(freeze_first_n=9),
                                dict(fc_sizes=[])])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        init_model(tiny_config(**kw), 0)


def test_encode_is_pure(rng):
    m = tiny_model()
    img = Tensor(rng.random((3, 8, 8)))
    assert np.array_equal(encode_image(m, img).data, encode_image(m, img).data)


def test_zero_image_through_zero_encoder_gives_last_bias():
    m = tiny_model()
    for layer in m.encoder_layers:
        layer.weight.data[:] = 0
        layer.bias.data[:] = 0
    m.fcs[-1].bias.data[:] = np.arange(5)
    feats = encode_image(m, Tensor(np.zeros((3, 8, 8))))
    assert feats.data.tolist() == [0, 1, 2, 3, 4]


def test_encode_shape_errors(rng):
    m = tiny_model()
    with pytest.raises(ShapeError):
        encode_image(m, Tensor(rng.random((1, 8, 8))))
    with pytest.raises(ShapeError):
        encode_image(m, Tensor(rng.random((3, 16, 16))))


def test_single_image_base_case(rng):
    m = tiny_model()
    img = _images(rng, 1)
    pred = forward_sequence(m, img)
    from seqdx.layers import LstmState, lstm_cell_step
    st = lstm_cell_step(m.lstm, encode_image(m, img[0]), LstmState.zeros(4))
    assert np.array_equal(pred.final_probs.data, head_probs(m, st.h).data)
    assert len(pred.per_step_probs) == 1


def test_zero_head_gives_half(rng):
    m = tiny_model(num_outputs=5)
    m.head.weight.data[:] = 0
    m.head.bias.data[:] = 0
    pred = forward_sequence(m, _images(rng, 4))
    assert pred.final_probs.data.tolist() == [0.5] * 5


def test_variable_lengths_share_a_model(rng):
    m = tiny_model()
    for n in (1, 50):
        pred = forward_sequence(m, _images(rng, n))
        assert len(pred.per_step_probs) == n
        assert pred.final_probs.shape == (1,)
        assert np.all(np.isfinite(pred.final_probs.data))
        assert all(0 <= p.item() <= 1 for p in pred.per_step_probs)


def test_empty_sequence_rejected():
    with pytest.raises(EmptySequenceError):
        forward_sequence(tiny_model(), [])


def test_last_step_sufficiency(rng):
    m = tiny_model()
    pred = forward_sequence(m, _images(rng, 6))
    assert pred.final_probs is pred.per_step_probs[-1]
    again = head_probs(m, Tensor(pred.hidden[-1].data.copy()))
    assert np.array_equal(again.data, pred.final_probs.data)


def test_truncation_causality(rng):
    m = tiny_model()
    imgs = _images(rng, 7)
    full = forward_sequence(m, imgs)
    for t in range(1, 7):
        part = forward_sequence(m, imgs[:t])
        for a, b in zip(part.per_step_probs, full.per_step_probs[:t]):
            assert np.array_equal(a.data, b.data)


def test_all_timesteps_feed_encoder_gradients(rng, f64):
    m = tiny_model(seed=3)
    imgs = _images(rng, 3)

    def encoder_grad(images):
        m.zero_grad()
        pred = forward_sequence(m, images)
        T.backward(T.total(pred.final_probs))
        return m.convs[0].weight.grad.copy()

    full = encoder_grad(imgs)
    zeroed = encoder_grad([Tensor(np.zeros((3, 8, 8)))] + imgs[1:])
    assert not np.allclose(full, zeroed)

    def loss():
        return T.total(forward_sequence(m, imgs).final_probs)

    report = T.gradient_check(loss, {"conv0": m.convs[0].weight, "fc0": m.fcs[0].weight})
    assert max(report.values()) < 1e-3
