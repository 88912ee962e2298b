import math

import numpy as np
import pytest

from typoflow import numerics as nx
from typoflow.backbone import (
    ContextLengthError, Model, ModelConfig, attention, block_names, param_report, patchify,
    read_config, unpatchify, write_config,
)
from typoflow.numerics import ParamGroup, Tensor
from typoflow.tokenizer import VOCAB, parse_prompt

TINY = dict(image_size=8, patch=4, d=8, heads=2, n_mm=1, n_single=1, d_txt=8, n_txt_layers=1,
            context=24, mlp_ratio=2)


def tiny(seed=0, **kw):
    return Model(ModelConfig(**{**TINY, **kw}), seed=seed)


def perturb(model, seed=0, scale=0.3):
    """Give zero-initialised weights random values so every path carries gradient."""
    rng = np.random.default_rng(seed)
    for n in model.params:
        t = model.params[n]
        if not t.data.any():
            t.data = (scale * rng.standard_normal(t.shape)).astype(np.float32)
    return model


def inputs(model, prompts=("a <b*>bold<\\b*> cat", "hi"), seed=0):
    rng = np.random.default_rng(seed)
    cfg = model.cfg
    z = rng.standard_normal((len(prompts), cfg.image_size, cfg.image_size, cfg.channels))
    seqs = [parse_prompt(p) for p in prompts]
    return z.astype(np.float32), np.array([0.3, 0.8][:len(prompts)]), seqs


def test_two_token_joint_attention_by_hand():
    # one image token and one text token, width 1, one head
    q = np.array([[[0.7], [-0.4]]])
    k = np.array([[[1.3], [0.5]]])
    v = np.array([[[2.0], [-1.0]]])
    out = attention(Tensor(q), Tensor(k), Tensor(v), heads=1).data
    for r in range(2):
        s = np.array([q[0, r, 0] * k[0, 0, 0], q[0, r, 0] * k[0, 1, 0]])
        w = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
        assert out[0, r, 0] == pytest.approx(w @ v[0, :, 0], rel=1e-6)


def test_masked_attention_rows_are_stochastic():
    rng = np.random.default_rng(1)
    scores = Tensor(rng.standard_normal((2, 3, 5, 7)).astype(np.float32))
    keep = np.ones((2, 1, 1, 7), dtype=bool)
    keep[1, ..., 5:] = False
    p = nx.softmax_lastdim(scores, keep=keep).data
    assert np.allclose(p.sum(-1), 1.0, atol=1e-6)
    assert not p[1, ..., 5:].any()


def test_zero_output_at_init_and_determinism():
    m = tiny()
    z, t, seqs = inputs(m)
    v1 = m.velocity(z, t, seqs).data
    assert v1.shape == z.shape and not v1.any()
    perturb(m)
    a = m.velocity(z, t, seqs).data
    b = m.velocity(z, t, seqs).data
    assert a.any() and a.tobytes() == b.tobytes()


def test_forward_errors():
    m = tiny()
    z, t, seqs = inputs(m)
    c, pooled, keep = m.encode_text(seqs)
    with pytest.raises(ValueError):
        m.forward(z, np.array([0.3, 1.2]), c, pooled, keep)
    with pytest.raises(ValueError):
        m.forward(z, t, c, pooled, keep, style=object())
    with pytest.raises(nx.ShapeError):
        m.forward(z[:, :4], t, c, pooled, keep)


def test_empty_prompt_and_context_limit():
    m = tiny()
    c, pooled, keep = m.encode_text([parse_prompt("")])
    assert c.shape == (1, 2, m.cfg.d) and pooled.shape == (1, m.cfg.d)
    with pytest.raises(ContextLengthError):
        m.encode_text([parse_prompt("x" * 30)])


def test_control_rows_only_touch_control_positions():
    m = tiny()
    from typoflow.backbone import embed_tokens
    tagged = parse_prompt("a <b*>bold<\\b*> cat")
    plain = parse_prompt("a bold cat")
    et = embed_tokens(m.params, np.array([tagged.ids])).data[0]
    ep = embed_tokens(m.params, np.array([plain.ids])).data[0]
    ctrl = np.array([VOCAB.is_control(i) for i in tagged.ids])
    assert ctrl.sum() == 2
    assert np.array_equal(et[~ctrl], ep)
    # moving the control table changes exactly the control positions
    m.params["text.embed.control"].data = m.params["text.embed.control"].data + 1.0
    et2 = embed_tokens(m.params, np.array([tagged.ids])).data[0]
    changed = (et2 != et).any(1)
    assert np.array_equal(changed, ctrl)


def test_pooled_matches_hand_path():
    # with d_txt == d the output projection is square, so final states can be recovered
    m = tiny(d=8, d_txt=8)
    seqs = [parse_prompt("a <i*>tilted<\\i*> word"), parse_prompt("ok")]
    c, pooled, keep = m.encode_text(seqs)
    p = m.params
    h = np.linalg.solve(p["text.proj"].data.astype(np.float64).T,
                        c.data.astype(np.float64).transpose(0, 2, 1)).transpose(0, 2, 1)
    for b in range(2):
        mean = h[b][keep[b]].mean(0)
        want = mean @ p["text.pooled.w"].data + p["text.pooled.b"].data
        assert np.allclose(pooled.data[b], want, atol=1e-4)


def test_text_permutation_leaves_image_stream_unchanged():
    m = perturb(tiny(pos_embed=False))
    rng = np.random.default_rng(3)
    z, t, _ = inputs(m)
    c = rng.standard_normal((2, 6, m.cfg.d)).astype(np.float32)
    pooled = Tensor(rng.standard_normal((2, m.cfg.d)).astype(np.float32))
    keep = np.ones((2, 6), dtype=bool)
    keep[1, 4:] = False
    perm = np.array([3, 0, 5, 1, 4, 2])
    a = m.forward(z, t, Tensor(c), pooled, keep).data
    b = m.forward(z, t, Tensor(c[:, perm]), pooled, keep[:, perm]).data
    assert np.allclose(a, b, atol=1e-5)


def _block_matrices(m):
    return [n for n in m.params if n.split(".")[0] in ("mm0", "single0") and m.params[n].data.ndim == 2]


def test_grad_check_every_block_matrix():
    m = perturb(tiny())
    z, t, seqs = inputs(m)
    rng = np.random.default_rng(5)
    target = rng.standard_normal(z.shape).astype(np.float32)

    def loss(_):
        v = m.velocity(z, t, seqs)
        d = nx.sub(v, Tensor(target))
        return nx.mean(nx.mul(d, d))

    names = _block_matrices(m)
    assert len(names) >= 20
    for n in names:
        err = nx.grad_check(loss, m.params[n], eps=1e-3, max_elements=6)
        assert err < 1e-4, (n, err)


def test_param_groups_partition():
    m = Model(ModelConfig(d=64, heads=4, n_mm=2, n_single=2))
    groups = m.params.groups
    assert set(groups) == set(m.params)
    assert {ParamGroup.TXT_ATTN, ParamGroup.IMG_ATTN, ParamGroup.MM_OTHER, ParamGroup.SINGLE_DIT,
            ParamGroup.TOKEN_EMBED, ParamGroup.OTHER} == set(groups.values())
    for n, g in groups.items():
        if ".txt.attn." in n:
            assert g is ParamGroup.TXT_ATTN
        elif n.startswith("single"):
            assert g is ParamGroup.SINGLE_DIT


def test_param_report_closed_form():
    d = 64
    m = Model(ModelConfig(d=d, heads=4, n_mm=2, n_single=2))
    rep = param_report(m.params)
    total = sum(m.params[n].data.size for n in m.params)
    assert rep["TxtAttn"]["count"] == 2 * 4 * d * d
    assert rep["TxtAttn"]["fraction"] == pytest.approx(2 * 4 * d * d / total, rel=1e-12)
    assert math.fsum(r["fraction"] for r in rep.values()) == pytest.approx(1.0, abs=1e-9)
    assert all(r["count"] > 0 for r in rep.values())


def test_patchify_round_trip():
    x = np.random.default_rng(0).random((2, 8, 8, 3)).astype(np.float32)
    back = unpatchify(Tensor(patchify(x, 4)), 4, 8, 3).data
    assert np.array_equal(back, x)


def test_checkpoint_round_trip(tmp_path):
    a = perturb(tiny(seed=1))
    a.save(tmp_path / "m.ckpt")
    b = tiny(seed=2).load(tmp_path / "m.ckpt")
    z, t, seqs = inputs(a)
    assert a.velocity(z, t, seqs).data.tobytes() == b.velocity(z, t, seqs).data.tobytes()


def test_config_file_round_trip(tmp_path):
    cfg = ModelConfig(**TINY)
    write_config(tmp_path / "model.cfg", cfg.to_dict())
    assert ModelConfig.from_dict(read_config(tmp_path / "model.cfg")) == cfg
    with pytest.raises((KeyError, ValueError)):
        ModelConfig.from_dict({"depth": 3})


def test_block_order():
    assert block_names(ModelConfig()) == ["mm0", "mm1", "single0", "single1"]
