"""MM-DiT velocity model on pixel patches with a small character-level text encoder.

Shapes follow (batch, tokens, width). Image tokens always precede text tokens
in every joint sequence. Each parameter carries a ParamGroup tag so that
fine-tuning masks and the parameter-change analysis can select by role.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import numerics as nx
from .numerics import ParamGroup, Tensor
from .tokenizer import VOCAB, TokenSequence


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 64
    channels: int = 3
    patch: int = 4
    d: int = 128
    heads: int = 4
    n_mm: int = 2
    n_single: int = 2
    d_txt: int = 64
    n_txt_layers: int = 2
    context: int = 64
    mlp_ratio: int = 4
    pos_embed: bool = True

    def __post_init__(self):
        if self.image_size % self.patch:
            raise ValueError("image_size must be a multiple of patch")
        if self.d % self.heads or self.d_txt % self.heads:
            raise ValueError("widths must divide evenly into heads")
        if self.n_mm < 1:
            raise ValueError("at least one MM-DiT block is required")

    @property
    def n_img(self):
        return (self.image_size // self.patch) ** 2

    @property
    def patch_dim(self):
        return self.patch * self.patch * self.channels

    @property
    def n_blocks(self):
        return self.n_mm + self.n_single

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f.type for f in fields(cls)}
        kw = {}
        for k, v in d.items():
            if k not in known:
                raise KeyError(f"unknown model key {k!r}")
            default = getattr(cls, k)
            kw[k] = _coerce(v, type(default))
        return cls(**kw)

    def to_dict(self):
        return asdict(self)


def _coerce(v, typ):
    if isinstance(v, typ):
        return v
    if typ is bool:
        s = str(v).strip().lower()
        if s in ("1", "true", "yes", "on"):
            return True
        if s in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {v!r}")
    return typ(v)


class ContextLengthError(ValueError):
    pass


class ModelParams:
    """Named parameters with a group tag each; groups partition the set."""

    def __init__(self):
        self.tensors: dict[str, Tensor] = {}
        self.groups: dict[str, ParamGroup] = {}

    def add(self, name, data, group):
        if name in self.tensors:
            raise KeyError(f"duplicate parameter {name}")
        self.tensors[name] = Tensor(np.asarray(data, dtype=np.float32), name=name)
        self.groups[name] = ParamGroup(group)
        return self.tensors[name]

    def __getitem__(self, name):
        return self.tensors[name]

    def __contains__(self, name):
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def names(self, groups=None):
        if groups is None:
            return list(self.tensors)
        groups = {ParamGroup(g) for g in groups}
        return [n for n in self.tensors if self.groups[n] in groups]

    def records(self):
        return [(n, self.groups[n], self.tensors[n].data) for n in self.tensors]

    def load_records(self, records, strict=True):
        seen = set()
        for name, group, arr in records:
            if name not in self.tensors:
                if strict:
                    raise KeyError(f"checkpoint has unknown parameter {name}")
                continue
            if self.tensors[name].shape != arr.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {self.tensors[name].shape}")
            if self.groups[name] != group:
                raise ValueError(f"{name}: group {group.label} != {self.groups[name].label}")
            self.tensors[name].data = np.array(arr, dtype=np.float32)
            seen.add(name)
        missing = set(self.tensors) - seen
        if strict and missing:
            raise KeyError(f"checkpoint lacks {sorted(missing)[:3]}...")

    def snapshot(self):
        return {n: t.data.copy() for n, t in self.tensors.items()}

    def count(self, name):
        return int(self.tensors[name].data.size)

    def set_requires_grad(self, names):
        names = set(names)
        for n, t in self.tensors.items():
            t.requires_grad = n in names
            t.grad = None


def param_report(params: ModelParams):
    """Per-group parameter counts and fractions of the total."""
    counts = {g: 0 for g in ParamGroup if g is not ParamGroup.SCA}
    for n in params:
        counts[params.groups[n]] = counts.get(params.groups[n], 0) + params.count(n)
    total = sum(counts.values())
    return {g.label: {"count": c, "fraction": c / total} for g, c in counts.items()}


# -- initialisation ---------------------------------------------------------------

def _normal(rng, shape, std):
    return (rng.standard_normal(shape) * std).astype(np.float32)


def _dense(rng, fan_in, fan_out):
    return _normal(rng, (fan_in, fan_out), 1.0 / math.sqrt(fan_in))


def _attn_block_params(p, rng, prefix, d, group):
    for w in ("q", "k", "v", "o"):
        p.add(f"{prefix}.w_{w}", _dense(rng, d, d), group)


def _mlp_params(p, rng, prefix, d, hidden, group):
    p.add(f"{prefix}.mlp.w1", _dense(rng, d, hidden), group)
    p.add(f"{prefix}.mlp.b1", np.zeros(hidden), group)
    p.add(f"{prefix}.mlp.w2", _dense(rng, hidden, d), group)
    p.add(f"{prefix}.mlp.b2", np.zeros(d), group)


def _mod_params(p, prefix, d, n_out, group):
    # adaLN-zero: shifts, scales and gates all start at zero
    p.add(f"{prefix}.mod.w", np.zeros((d, n_out * d)), group)
    p.add(f"{prefix}.mod.b", np.zeros(n_out * d), group)


def init_params(cfg: ModelConfig, seed=0) -> ModelParams:
    rng = np.random.default_rng(seed)
    p = ModelParams()
    O = ParamGroup.OTHER
    d, dt, hid = cfg.d, cfg.d_txt, cfg.d * cfg.mlp_ratio
    # text encoder
    p.add("text.embed.base", _normal(rng, (VOCAB.n_base, dt), 0.5), O)
    p.add("text.embed.control", _normal(rng, (len(VOCAB) - VOCAB.n_base, dt), 0.5),
          ParamGroup.TOKEN_EMBED)
    if cfg.pos_embed:
        p.add("text.pos", _normal(rng, (cfg.context, dt), 0.1), O)
    for i in range(cfg.n_txt_layers):
        _attn_block_params(p, rng, f"text.layer{i}", dt, O)
        _mlp_params(p, rng, f"text.layer{i}", dt, dt * cfg.mlp_ratio, O)
    p.add("text.proj", _dense(rng, dt, d), O)
    p.add("text.pooled.w", _dense(rng, dt, d), O)
    p.add("text.pooled.b", np.zeros(d), O)
    # image input and conditioning
    p.add("img.patch.w", _dense(rng, cfg.patch_dim, d), O)
    p.add("img.patch.b", np.zeros(d), O)
    if cfg.pos_embed:
        p.add("img.pos", _normal(rng, (cfg.n_img, d), 0.1), O)
        p.add("txt.pos", _normal(rng, (cfg.context, d), 0.1), O)
    p.add("time.w1", _dense(rng, d, d), O)
    p.add("time.b1", np.zeros(d), O)
    p.add("time.w2", _dense(rng, d, d), O)
    p.add("time.b2", np.zeros(d), O)
    for i in range(cfg.n_mm):
        pre = f"mm{i}"
        _attn_block_params(p, rng, f"{pre}.txt.attn", d, ParamGroup.TXT_ATTN)
        _attn_block_params(p, rng, f"{pre}.img.attn", d, ParamGroup.IMG_ATTN)
        for s in ("txt", "img"):
            _mlp_params(p, rng, f"{pre}.{s}", d, hid, ParamGroup.MM_OTHER)
            _mod_params(p, f"{pre}.{s}", d, 6, ParamGroup.MM_OTHER)
    for i in range(cfg.n_single):
        pre = f"single{i}"
        _attn_block_params(p, rng, f"{pre}.attn", d, ParamGroup.SINGLE_DIT)
        _mlp_params(p, rng, pre, d, hid, ParamGroup.SINGLE_DIT)
        _mod_params(p, pre, d, 6, ParamGroup.SINGLE_DIT)
    _mod_params(p, "final", d, 2, O)
    p.add("final.w", np.zeros((d, cfg.patch_dim)), O)
    p.add("final.b", np.zeros(cfg.patch_dim), O)
    groups = set(p.groups.values())
    if ParamGroup.TXT_ATTN not in groups or ParamGroup.IMG_ATTN not in groups:
        raise AssertionError("group partition lost an MM-DiT group")
    return p


# -- building blocks --------------------------------------------------------------------

def attention(q, k, v, heads, keep=None):
    """Multi-head scaled dot-product attention.

    q: (B, Lq, D), k/v: (B, Lk, D); ``keep`` is a boolean (B, Lk) key mask.
    """
    B, Lq, D = q.shape
    Lk = k.shape[1]
    dh = D // heads
    qh = nx.permute(nx.reshape(q, (B, Lq, heads, dh)), (0, 2, 1, 3))
    kh = nx.permute(nx.reshape(k, (B, Lk, heads, dh)), (0, 2, 3, 1))
    vh = nx.permute(nx.reshape(v, (B, Lk, heads, dh)), (0, 2, 1, 3))
    scores = nx.mul(nx.matmul(qh, kh), 1.0 / math.sqrt(dh))
    mask = None if keep is None else np.asarray(keep, dtype=bool)[:, None, None, :]
    probs = nx.softmax_lastdim(scores, keep=mask)
    out = nx.matmul(probs, vh)
    return nx.reshape(nx.permute(out, (0, 2, 1, 3)), (B, Lq, D))


def mlp(x, p, prefix):
    h = nx.gelu(nx.linear(x, p[f"{prefix}.mlp.w1"], p[f"{prefix}.mlp.b1"]))
    return nx.linear(h, p[f"{prefix}.mlp.w2"], p[f"{prefix}.mlp.b2"])


def _per_token(v, n):
    """(B, D) -> (B, n, D) by repetition."""
    return nx.expand(v, 1, n)


def modulate(x, shift, scale):
    n = x.shape[1]
    return nx.add(nx.mul(nx.rmsnorm(x), nx.add(_per_token(scale, n), 1.0)), _per_token(shift, n))


def _mod_chunks(cond, p, prefix, k, d):
    m = nx.linear(cond, p[f"{prefix}.mod.w"], p[f"{prefix}.mod.b"])
    return [nx.slice_(m, 1, i * d, (i + 1) * d) for i in range(k)]


def _gated(x, gate, y):
    return nx.add(x, nx.mul(_per_token(gate, x.shape[1]), y))


def timestep_embedding(t, dim):
    """Sinusoidal features of 1000·t, shape (B, dim)."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = 1000.0 * t[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1).astype(np.float32)


def patchify(images, patch):
    """(B, H, W, C) array -> (B, N, patch*patch*C) array, row-major over patches."""
    x = np.asarray(images, dtype=np.float32)
    B, H, W, C = x.shape
    x = x.reshape(B, H // patch, patch, W // patch, patch, C).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(B, (H // patch) * (W // patch), patch * patch * C)


def unpatchify(tokens, patch, size, channels):
    """Differentiable inverse of ``patchify`` on a Tensor."""
    B = tokens.shape[0]
    g = size // patch
    x = nx.reshape(tokens, (B, g, g, patch, patch, channels))
    x = nx.permute(x, (0, 1, 3, 2, 4, 5))
    return nx.reshape(x, (B, size, size, channels))


# -- text encoder ---------------------------------------------------------------------------

def batch_ids(seqs, context):
    """Pad token sequences into an id matrix and a key mask."""
    if isinstance(seqs, TokenSequence):
        seqs = [seqs]
    L = max(len(s.ids) for s in seqs)
    if L > context:
        raise ContextLengthError(f"prompt has {L} tokens; context limit is {context}")
    ids = np.full((len(seqs), L), VOCAB.pad, dtype=np.int64)
    keep = np.zeros((len(seqs), L), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s.ids)] = s.ids
        keep[i, :len(s.ids)] = True
    return ids, keep


def embed_tokens(p, ids):
    table = nx.concat([p["text.embed.base"], p["text.embed.control"]], axis=0)
    return nx.gather_rows(table, ids)


def encode_text(model, seqs):
    """Returns (c_txt: (B, L, d), pooled: (B, d), keep: (B, L))."""
    cfg, p = model.cfg, model.params
    ids, keep = batch_ids(seqs, cfg.context)
    B, L = ids.shape
    h = embed_tokens(p, ids)
    if cfg.pos_embed:
        h = nx.add(h, nx.expand(nx.slice_(p["text.pos"], 0, 0, L), 0, B))
    for i in range(cfg.n_txt_layers):
        pre = f"text.layer{i}"
        x = nx.rmsnorm(h)
        q, k, v = (nx.matmul(x, p[f"{pre}.w_{w}"]) for w in "qkv")
        h = nx.add(h, nx.matmul(attention(q, k, v, cfg.heads, keep), p[f"{pre}.w_o"]))
        h = nx.add(h, mlp(nx.rmsnorm(h), p, pre))
    h = nx.rmsnorm(h)
    c_txt = nx.matmul(h, p["text.proj"])
    # masked mean over real tokens as a (B, 1, L) x (B, L, d_txt) product
    w = (keep / keep.sum(1, keepdims=True)).astype(np.float32)[:, None, :]
    mean_state = nx.reshape(nx.matmul(Tensor(w), h), (B, cfg.d_txt))
    pooled = nx.linear(mean_state, p["text.pooled.w"], p["text.pooled.b"])
    return c_txt, pooled, keep


# -- DiT blocks --------------------------------------------------------------------------------

def _style_term(model, idx, q_img, style):
    """Decoupled style attention for block ``idx``; None when no adapter applies."""
    if style is None:
        return None
    ad = model.adapters
    if ad is None or idx not in ad.layers:
        return None
    c_img, lam = style.tokens, style.scale
    if lam == 0.0:
        return None
    k = nx.matmul(c_img, ad.w_k(idx))
    v = nx.matmul(c_img, ad.w_v(idx))
    return nx.mul(attention(q_img, k, v, model.cfg.heads), float(lam))


def mm_block(model, i, x, c, cond, keep, style=None):
    cfg, p = model.cfg, model.params
    d, N = cfg.d, x.shape[1]
    pre = f"mm{i}"
    mi = _mod_chunks(cond, p, f"{pre}.img", 6, d)
    mt = _mod_chunks(cond, p, f"{pre}.txt", 6, d)
    xn = modulate(x, mi[0], mi[1])
    cn = modulate(c, mt[0], mt[1])
    qi, ki, vi = (nx.matmul(xn, p[f"{pre}.img.attn.w_{w}"]) for w in "qkv")
    qt, kt, vt = (nx.matmul(cn, p[f"{pre}.txt.attn.w_{w}"]) for w in "qkv")
    full_keep = np.concatenate([np.ones((keep.shape[0], N), dtype=bool), keep], axis=1)
    joint = attention(nx.concat([qi, qt], 1), nx.concat([ki, kt], 1), nx.concat([vi, vt], 1),
                      cfg.heads, full_keep)
    ai = nx.slice_(joint, 1, 0, N)
    at = nx.slice_(joint, 1, N, joint.shape[1])
    extra = _style_term(model, i, qi, style)
    if extra is not None:
        ai = nx.add(ai, extra)
    x = _gated(x, mi[2], nx.matmul(ai, p[f"{pre}.img.attn.w_o"]))
    c = _gated(c, mt[2], nx.matmul(at, p[f"{pre}.txt.attn.w_o"]))
    x = _gated(x, mi[5], mlp(modulate(x, mi[3], mi[4]), p, f"{pre}.img"))
    c = _gated(c, mt[5], mlp(modulate(c, mt[3], mt[4]), p, f"{pre}.txt"))
    return x, c


def single_block(model, i, s, n_img, cond, keep, style=None):
    cfg, p = model.cfg, model.params
    pre = f"single{i}"
    m = _mod_chunks(cond, p, pre, 6, cfg.d)
    sn = modulate(s, m[0], m[1])
    q, k, v = (nx.matmul(sn, p[f"{pre}.attn.w_{w}"]) for w in "qkv")
    full_keep = np.concatenate([np.ones((keep.shape[0], n_img), dtype=bool), keep], axis=1)
    a = attention(q, k, v, cfg.heads, full_keep)
    extra = _style_term(model, cfg.n_mm + i, nx.slice_(q, 1, 0, n_img), style)
    if extra is not None:
        a = nx.concat([nx.add(nx.slice_(a, 1, 0, n_img), extra),
                       nx.slice_(a, 1, n_img, a.shape[1])], 1)
    s = _gated(s, m[2], nx.matmul(a, p[f"{pre}.attn.w_o"]))
    return _gated(s, m[5], mlp(modulate(s, m[3], m[4]), p, pre))


class Model:
    """Config + parameters (+ optional style adapters)."""

    def __init__(self, cfg: ModelConfig | None = None, seed=0, params: ModelParams | None = None):
        self.cfg = cfg or ModelConfig()
        self.params = params if params is not None else init_params(self.cfg, seed)
        self.adapters = None

    def encode_text(self, seqs):
        return encode_text(self, seqs)

    def condition(self, t, pooled):
        cfg, p = self.cfg, self.params
        B = pooled.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
        temb = Tensor(timestep_embedding(t, cfg.d))
        h = nx.silu(nx.linear(temb, p["time.w1"], p["time.b1"]))
        h = nx.linear(h, p["time.w2"], p["time.b2"])
        return nx.silu(nx.add(h, pooled))

    def forward(self, z_t, t, c_txt, pooled, keep, style=None):
        """Velocity prediction with the same (B, H, W, C) shape as ``z_t``."""
        cfg, p = self.cfg, self.params
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any(t_arr < 0) or np.any(t_arr > 1):
            raise ValueError("t must lie in [0, 1]")
        if style is not None and self.adapters is None:
            raise ValueError("style condition given but no adapters are installed")
        z = z_t.data if isinstance(z_t, Tensor) else np.asarray(z_t, dtype=np.float32)
        if z.shape[1:] != (cfg.image_size, cfg.image_size, cfg.channels):
            raise nx.ShapeError("forward", z.shape, detail="image shape does not match config")
        B = z.shape[0]
        x = nx.linear(Tensor(patchify(z, cfg.patch)), p["img.patch.w"], p["img.patch.b"])
        c = c_txt
        L = c.shape[1]
        if cfg.pos_embed:
            x = nx.add(x, nx.expand(p["img.pos"], 0, B))
            c = nx.add(c, nx.expand(nx.slice_(p["txt.pos"], 0, 0, L), 0, B))
        cond = self.condition(t_arr, pooled)
        for i in range(cfg.n_mm):
            x, c = mm_block(self, i, x, c, cond, keep, style)
        s = nx.concat([x, c], 1)
        for i in range(cfg.n_single):
            s = single_block(self, i, s, cfg.n_img, cond, keep, style)
        x = nx.slice_(s, 1, 0, cfg.n_img)
        sh, sc = _mod_chunks(cond, p, "final", 2, cfg.d)
        out = nx.linear(modulate(x, sh, sc), p["final.w"], p["final.b"])
        return unpatchify(out, cfg.patch, cfg.image_size, cfg.channels)

    def velocity(self, z_t, t, seqs, pooled_seqs=None, style=None):
        """Convenience: encode prompts then run ``forward``."""
        c_txt, pooled, keep = self.encode_text(seqs)
        if pooled_seqs is not None:
            pooled = self.encode_text(pooled_seqs)[1]
            if pooled.shape[0] != c_txt.shape[0]:
                pooled = nx.expand(nx.reshape(pooled, (pooled.shape[1],)), 0, c_txt.shape[0])
        return self.forward(z_t, t, c_txt, pooled, keep, style)

    # checkpoints
    def save(self, path):
        nx.save_checkpoint(path, self.params.records())

    def load(self, path):
        self.params.load_records(nx.load_checkpoint(path))
        return self


def block_names(cfg: ModelConfig):
    """Block labels in execution order: MM-DiT blocks then Single-DiT blocks."""
    return [f"mm{i}" for i in range(cfg.n_mm)] + [f"single{i}" for i in range(cfg.n_single)]


def layer_of(name):
    """Layer label used for grouping parameters in the change analysis."""
    parts = name.split(".")
    if parts[0].startswith(("mm", "single")):
        return parts[0]
    if parts[0] == "text" and parts[1].startswith("layer"):
        return f"text.{parts[1]}"
    if parts[0] == "text" and parts[1] == "embed":
        return name
    return parts[0]


def read_config(path):
    """Flat ``key=value`` text; '#' starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{n}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def write_config(path, d):
    with open(path, "w", encoding="utf-8") as fh:
        for k in sorted(d):
            fh.write(f"{k}={d[k]}\n")
