"""Style-control adapters: a small style encoder and decoupled joint attention.

Adapted blocks add ``lam * Attention(Q', c_img W'_k, c_img W'_v)`` to the
image rows of their joint-attention output, where ``Q'`` reuses the block's
image-stream query projection. Only W'_k, W'_v (and, in phase 1, the style
encoder) are trained; the backbone stays frozen.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import flow
from . import numerics as nx
from .backbone import Model, ModelParams, attention, patchify
from .numerics import ParamGroup, Tensor

STYLE_PATCH = 8
N_STYLE_TOKENS = 4


class StyleEncoder:
    """Patch embedding, one self-attention layer, attention pooling into K tokens."""

    def __init__(self, d=128, image_size=64, channels=3, heads=4, k=N_STYLE_TOKENS, seed=0):
        if image_size % STYLE_PATCH:
            raise ValueError("style image size must be a multiple of the style patch")
        self.d, self.image_size, self.channels, self.heads, self.k = d, image_size, channels, heads, k
        rng = np.random.default_rng([seed, 8191])
        n = (image_size // STYLE_PATCH) ** 2
        pd = STYLE_PATCH * STYLE_PATCH * channels
        S = ParamGroup.SCA
        p = ModelParams()
        p.add("style.patch.w", rng.standard_normal((pd, d)) / math.sqrt(pd), S)
        p.add("style.patch.b", np.zeros(d), S)
        p.add("style.pos", rng.standard_normal((n, d)) * 0.1, S)
        for w in "qkvo":
            p.add(f"style.attn.w_{w}", rng.standard_normal((d, d)) / math.sqrt(d), S)
        p.add("style.queries", rng.standard_normal((k, d)), S)
        p.add("style.pool.w_k", rng.standard_normal((d, d)) / math.sqrt(d), S)
        p.add("style.pool.w_v", rng.standard_normal((d, d)) / math.sqrt(d), S)
        p.add("style.proj", rng.standard_normal((d, d)) / math.sqrt(d), S)
        self.params = p

    @property
    def n_tokens(self):
        return (self.image_size // STYLE_PATCH) ** 2

    def encode(self, images) -> Tensor:
        """(B, H, W, C) images in [0, 1] -> (B, K, d) style tokens."""
        x = np.asarray(images, dtype=np.float32)
        if x.ndim == 3:
            x = x[None]
        if x.shape[1:] != (self.image_size, self.image_size, self.channels):
            raise ValueError(f"style image must be {self.image_size}x{self.image_size}x{self.channels}, "
                             f"got {x.shape[1:]}")
        p = self.params
        B = x.shape[0]
        h = nx.linear(Tensor(patchify(x - 0.5, STYLE_PATCH)), p["style.patch.w"], p["style.patch.b"])
        h = nx.add(h, nx.expand(p["style.pos"], 0, B))
        hn = nx.rmsnorm(h)
        q, k, v = (nx.matmul(hn, p[f"style.attn.w_{w}"]) for w in "qkv")
        h = nx.add(h, nx.matmul(attention(q, k, v, self.heads), p["style.attn.w_o"]))
        hn = nx.rmsnorm(h)
        queries = nx.expand(p["style.queries"], 0, B)
        pooled = attention(queries, nx.matmul(hn, p["style.pool.w_k"]),
                           nx.matmul(hn, p["style.pool.w_v"]), self.heads)
        return nx.matmul(nx.rmsnorm(pooled), p["style.proj"])

    def pooled(self, image):
        """Mean style token as a float64 vector (style-consistency feature)."""
        with nx.no_grad():
            tok = self.encode(image).data
        feat = tok.astype(np.float64).mean(axis=1)
        return feat[0] if np.asarray(image).ndim == 3 else feat


def encode_style(encoder: StyleEncoder, image):
    with nx.no_grad():
        return encoder.encode(image).data[0] if np.asarray(image).ndim == 3 else encoder.encode(image).data


@dataclass
class StyleCondition:
    tokens: Tensor        # (B, K, d)
    scale: float = 0.9

    def take(self, lo, hi):
        if self.tokens.shape[0] == 1:
            return StyleCondition(nx.expand(nx.reshape(self.tokens, self.tokens.shape[1:]), 0, hi - lo),
                                  self.scale)
        return StyleCondition(Tensor(self.tokens.data[lo:hi]), self.scale)


class AdapterSet:
    """Per-block W'_k, W'_v; zero-initialised so a fresh install changes nothing."""

    def __init__(self, layers, d):
        self.layers = tuple(sorted(layers))
        self.d = d
        self.params = ModelParams()
        for i in self.layers:
            self.params.add(f"sca.block{i}.w_k", np.zeros((d, d)), ParamGroup.SCA)
            self.params.add(f"sca.block{i}.w_v", np.zeros((d, d)), ParamGroup.SCA)

    def w_k(self, i):
        return self.params[f"sca.block{i}.w_k"]

    def w_v(self, i):
        return self.params[f"sca.block{i}.w_v"]

    def count(self):
        return sum(self.params.count(n) for n in self.params)


def adapter_layers(n_blocks, stride):
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return list(range(0, n_blocks, stride))


def install_adapters(model: Model, stride=2) -> Model:
    """Adapters on blocks 0, stride, 2*stride, ... over the MM-then-Single block list."""
    model.adapters = AdapterSet(adapter_layers(model.cfg.n_blocks, stride), model.cfg.d)
    return model


def adapter_param_count(d, n_blocks, stride):
    return 2 * d * d * math.ceil(n_blocks / stride)


def decoupled_forward(q, k, v, n_img, c_img, w_k, w_v, lam, heads=1, keep=None):
    """Joint attention over (q, k, v) plus the scaled style branch on the first ``n_img`` rows.

    ``q, k, v``: (B, L, d) projections of the joint sequence (image rows first);
    ``c_img``: (B, K, d) style tokens. Q' is the image rows of ``q``.
    """
    base = attention(q, k, v, heads, keep)
    if lam == 0.0:
        return base
    qi = nx.slice_(q, 1, 0, n_img)
    extra = nx.mul(attention(qi, nx.matmul(c_img, w_k), nx.matmul(c_img, w_v), heads), float(lam))
    img = nx.add(nx.slice_(base, 1, 0, n_img), extra)
    if n_img == base.shape[1]:
        return img
    return nx.concat([img, nx.slice_(base, 1, n_img, base.shape[1])], 1)


# -- checkpoints -------------------------------------------------------------------------

def save_sca(path, adapters: AdapterSet, encoder: StyleEncoder):
    nx.save_checkpoint(path, adapters.params.records() + encoder.params.records())


def load_sca(path, model: Model, encoder: StyleEncoder):
    """Install adapters named in the checkpoint and load them plus the encoder."""
    recs = nx.load_checkpoint(path)
    layers = sorted({int(n.split(".")[1][5:]) for n, _, _ in recs if n.startswith("sca.block")})
    model.adapters = AdapterSet(layers, model.cfg.d)
    model.adapters.params.load_records([r for r in recs if r[0].startswith("sca.")])
    encoder.params.load_records([r for r in recs if r[0].startswith("style.")])
    return model


# -- training ------------------------------------------------------------------------------

class _StyleFeed:
    """Style condition for a batch: the target images themselves, encoded."""

    def __init__(self, encoder, adapters, images, lam, train_encoder):
        self.encoder, self.adapters, self.images = encoder, adapters, images
        self.lam, self.train_encoder = lam, train_encoder

    def __call__(self, idx):
        return StyleCondition(self.encoder.encode(self.images[idx]), self.lam)

    def parameters(self):
        out = {n: self.adapters.params[n] for n in self.adapters.params}
        if self.train_encoder:
            out.update({n: self.encoder.params[n] for n in self.encoder.params})
        return out


class PhaseError(RuntimeError):
    pass


def sca_train(model: Model, encoder: StyleEncoder, phase, images, seqs, steps, lr=1e-4, seed=0,
              batch=8, lam=1.0, init_from=None, log=None, on_step=None):
    """Phase 1 trains adapters and encoder; phase 2 starts from a phase-1 checkpoint
    and trains the adapters only. The backbone is frozen throughout."""
    if phase not in (1, 2):
        raise ValueError("phase must be 1 or 2")
    if phase == 2:
        if init_from is None or not Path(init_from).exists():
            raise PhaseError("phase 2 needs a phase-1 adapter checkpoint")
        load_sca(init_from, model, encoder)
    elif model.adapters is None:
        install_adapters(model, 2)
    feed = _StyleFeed(encoder, model.adapters, images, lam, train_encoder=(phase == 1))
    flow.train(model, images, seqs, steps, lr=lr, seed=seed, batch=batch, trainable=[],
               style_fn=feed, log=log, on_step=on_step)
    return model
