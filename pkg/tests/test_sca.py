import numpy as np
import pytest

from typoflow import numerics as nx, sca
from typoflow.backbone import Model, ModelConfig, attention
from typoflow.numerics import Tensor
from typoflow.tokenizer import parse_prompt

TINY = dict(image_size=16, patch=4, d=16, heads=2, n_mm=2, n_single=2, d_txt=8, n_txt_layers=1,
            context=24, mlp_ratio=2)


def trained_like(seed=0):
    m = Model(ModelConfig(**TINY), seed=seed)
    rng = np.random.default_rng(seed)
    for n in m.params:
        t = m.params[n]
        if not t.data.any():
            t.data = (0.2 * rng.standard_normal(t.shape)).astype(np.float32)
    return m


def encoder(seed=0):
    return sca.StyleEncoder(d=TINY["d"], image_size=TINY["image_size"], heads=2, seed=seed)


def batch(seed=0, n=2):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, 16, 16, 3)).astype(np.float32)
    seqs = [parse_prompt(p) for p in ("ink", "<b*>ok<\\b*> go", "hi", "yes")[:n]]
    styles = rng.random((n, 16, 16, 3)).astype(np.float32)
    return z, np.linspace(0.2, 0.9, n), seqs, styles


def test_encoder_shape_and_determinism():
    enc = encoder()
    x = np.random.default_rng(0).random((3, 16, 16, 3))
    a, b = enc.encode(x).data, enc.encode(x).data
    assert a.shape == (3, sca.N_STYLE_TOKENS, 16) and a.tobytes() == b.tobytes()
    zero = sca.encode_style(enc, np.zeros((16, 16, 3)))
    one = sca.encode_style(enc, np.ones((16, 16, 3)))
    assert zero.shape == (sca.N_STYLE_TOKENS, 16)
    assert np.linalg.norm(zero - one) > 0
    with pytest.raises(ValueError):
        enc.encode(np.zeros((1, 8, 8, 3)))


def test_decoupled_lambda_zero_is_bitwise_base():
    rng = np.random.default_rng(1)
    q, k, v = (Tensor(rng.standard_normal((2, 5, 4)).astype(np.float32)) for _ in range(3))
    c = Tensor(rng.standard_normal((2, 3, 4)).astype(np.float32))
    w = Tensor(rng.standard_normal((4, 4)).astype(np.float32))
    out = sca.decoupled_forward(q, k, v, 3, c, w, w, 0.0, heads=2)
    assert out.data.tobytes() == attention(q, k, v, 2).data.tobytes()


def test_single_style_token_adds_scaled_value_row():
    rng = np.random.default_rng(2)
    q, k, v = (Tensor(rng.standard_normal((1, 4, 2)).astype(np.float64)) for _ in range(3))
    c = Tensor(np.array([[[0.5, -1.0]]]))
    wk = Tensor(rng.standard_normal((2, 2)))
    wv = Tensor(np.array([[2.0, 0.0], [1.0, 3.0]]))
    lam = 0.7
    out = sca.decoupled_forward(q, k, v, 2, c, wk, wv, lam, heads=1).data
    base = attention(q, k, v, 1).data
    vrow = c.data[0, 0] @ wv.data
    assert np.allclose(out[0, :2], base[0, :2] + lam * vrow, atol=1e-12)
    assert np.array_equal(out[0, 2:], base[0, 2:])


def test_two_style_tokens_by_hand():
    # width 1, one head: image row query 0.8 attends to two style keys
    q = Tensor(np.array([[[0.8], [0.1]]]))
    k = Tensor(np.array([[[0.3], [-0.2]]]))
    v = Tensor(np.array([[[1.0], [2.0]]]))
    c = Tensor(np.array([[[1.0], [-2.0]]]))
    wk, wv = Tensor(np.array([[1.5]])), Tensor(np.array([[0.5]]))
    out = sca.decoupled_forward(q, k, v, 1, c, wk, wv, 0.9, heads=1).data
    keys, vals = np.array([1.5, -3.0]), np.array([0.5, -1.0])
    w = np.exp(0.8 * keys) / np.exp(0.8 * keys).sum()
    base = np.exp(0.8 * np.array([0.3, -0.2]))
    base = base @ np.array([1.0, 2.0]) / base.sum()
    assert out[0, 0, 0] == pytest.approx(base + 0.9 * (w @ vals), abs=1e-6)


def test_install_layers_and_counts():
    m = Model(ModelConfig(**TINY))
    assert sca.install_adapters(m, 2).adapters.layers == (0, 2)
    assert sca.install_adapters(m, 1).adapters.layers == (0, 1, 2, 3)
    assert sca.install_adapters(m, 3).adapters.layers == (0, 3)
    with pytest.raises(ValueError):
        sca.install_adapters(m, 0)
    d = TINY["d"]
    for stride in (1, 2, 3):
        sca.install_adapters(m, stride)
        assert m.adapters.count() == sca.adapter_param_count(d, 4, stride)
        assert m.adapters.count() == 2 * d * d * -(-4 // stride)
    assert sca.adapter_param_count(d, 4, 2) * 2 == sca.adapter_param_count(d, 4, 1)


def _forward(m, style):
    z, t, seqs, _ = batch()
    with nx.no_grad():
        return m.velocity(z, t, seqs, style=style).data


@pytest.mark.parametrize("lam", [0.0, 0.3, 0.9, 1.0])
def test_zero_init_adapters_are_a_noop(lam):
    m = trained_like()
    ref = _forward(m, None)
    sca.install_adapters(m, 2)
    _, _, _, styles = batch()
    cond = sca.StyleCondition(encoder().encode(styles), lam)
    assert _forward(m, cond).tobytes() == ref.tobytes()


def test_style_without_adapters_is_an_error():
    m = trained_like()
    _, _, _, styles = batch()
    with pytest.raises(ValueError):
        _forward(m, sca.StyleCondition(encoder().encode(styles), 0.5))


def _random_adapters(m, seed=3, scale=0.5):
    rng = np.random.default_rng(seed)
    for n in m.adapters.params:
        t = m.adapters.params[n]
        t.data = (scale * rng.standard_normal(t.shape)).astype(np.float32)


def test_trained_adapters_lambda_zero_match_base():
    m = trained_like()
    ref = _forward(m, None)
    sca.install_adapters(m, 1)
    _random_adapters(m)
    _, _, _, styles = batch()
    out = _forward(m, sca.StyleCondition(encoder().encode(styles), 0.0))
    assert np.abs(out - ref).max() < 1e-6


def test_influence_grows_with_lambda():
    m = trained_like()
    ref = _forward(m, None)
    sca.install_adapters(m, 2)
    _random_adapters(m)
    _, _, _, styles = batch()
    tokens = encoder().encode(styles)
    deltas = [np.linalg.norm(_forward(m, sca.StyleCondition(tokens, lam)) - ref)
              for lam in (0.0, 0.3, 0.6, 0.9)]
    assert deltas[0] == 0.0
    assert all(b >= a for a, b in zip(deltas, deltas[1:]))


def test_checkpoint_round_trip(tmp_path):
    m = trained_like()
    sca.install_adapters(m, 2)
    _random_adapters(m)
    enc = encoder(seed=4)
    sca.save_sca(tmp_path / "a.ckpt", m.adapters, enc)
    other, enc2 = trained_like(), encoder(seed=9)
    sca.load_sca(tmp_path / "a.ckpt", other, enc2)
    assert other.adapters.layers == (0, 2)
    for n in m.adapters.params:
        assert other.adapters.params[n].data.tobytes() == m.adapters.params[n].data.tobytes()
    for n in enc.params:
        assert enc2.params[n].data.tobytes() == enc.params[n].data.tobytes()


def _style_data(n=4):
    rng = np.random.default_rng(5)
    imgs = rng.random((n, 16, 16, 3)).astype(np.float32)
    seqs = [parse_prompt(w) for w in ("red", "teal", "gold", "plum")[:n]]
    return imgs, seqs


def test_two_phase_training_freezes_the_right_parts(tmp_path):
    m, enc = trained_like(), encoder()
    backbone = m.params.snapshot()
    enc0 = enc.params.snapshot()
    imgs, seqs = _style_data()
    sca.sca_train(m, enc, 1, imgs, seqs, steps=2, lr=1e-2, batch=2)
    assert all(m.params[n].data.tobytes() == backbone[n].tobytes() for n in m.params)
    assert any(enc.params[n].data.tobytes() != enc0[n].tobytes() for n in enc.params)
    assert any(m.adapters.params[n].data.any() for n in m.adapters.params)
    sca.save_sca(tmp_path / "p1.ckpt", m.adapters, enc)

    m2, enc2 = trained_like(), encoder(seed=7)
    sca.sca_train(m2, enc2, 2, imgs, seqs, steps=0, init_from=tmp_path / "p1.ckpt")
    for n in m.adapters.params:
        assert m2.adapters.params[n].data.tobytes() == m.adapters.params[n].data.tobytes()

    enc1 = enc2.params.snapshot()
    ad1 = m2.adapters.params.snapshot()
    sca.sca_train(m2, enc2, 2, imgs, seqs, steps=2, lr=1e-2, batch=2, init_from=tmp_path / "p1.ckpt")
    assert all(m2.params[n].data.tobytes() == backbone[n].tobytes() for n in m2.params)
    assert all(enc2.params[n].data.tobytes() == enc1[n].tobytes() for n in enc2.params)
    assert any(m2.adapters.params[n].data.tobytes() != ad1[n].tobytes() for n in m2.adapters.params)


def test_phase_two_needs_phase_one_checkpoint(tmp_path):
    m, enc = trained_like(), encoder()
    imgs, seqs = _style_data()
    with pytest.raises(sca.PhaseError):
        sca.sca_train(m, enc, 2, imgs, seqs, steps=1)
    with pytest.raises(sca.PhaseError):
        sca.sca_train(m, enc, 2, imgs, seqs, steps=1, init_from=tmp_path / "missing.ckpt")
    with pytest.raises(ValueError):
        sca.sca_train(m, enc, 3, imgs, seqs, steps=1)
