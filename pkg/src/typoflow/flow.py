"""Rectified flow: linear noise path, flow-matching loss, Euler sampler, training loop."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .optim import Adam


class DivergenceError(RuntimeError):
    def __init__(self, message, step):
        super().__init__(f"{message} at step {step}")
        self.step = step


def a(t):
    return 1.0 - t


def b(t):
    return t


def _check_t(t):
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0) or np.any(np.isnan(t)):
        raise ValueError("t must lie in [0, 1]")
    return t


def _per_sample(t, x):
    """Shape per-sample times so they scale each sample of ``x``."""
    t = np.asarray(t, dtype=x.dtype)
    if t.ndim == 0:
        return t
    return t.reshape((-1,) + (1,) * (x.ndim - 1))


def forward_interpolate(x0, eps, t):
    """z_t = (1 - t) x0 + t eps, with exact endpoints."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ")
    tt = _check_t(t)
    if tt.ndim == 0:
        if tt == 0.0:
            return x0.copy()
        if tt == 1.0:
            return eps.copy()
    tt = _per_sample(tt, x0)
    return (1.0 - tt) * x0 + tt * eps


def conditional_velocity(x0, eps):
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ")
    return eps - x0


def cfm_loss(v_pred, x0, eps):
    """Mean of (v_pred - (eps - x0))^2; ``v_pred`` may be a Tensor (differentiable)."""
    target = conditional_velocity(x0, eps)
    if isinstance(v_pred, Tensor):
        if v_pred.shape != target.shape:
            raise ValueError(f"prediction {v_pred.shape} vs target {target.shape}")
        diff = nx.sub(v_pred, Tensor(target.astype(v_pred.data.dtype)))
        return nx.mean(nx.mul(diff, diff))
    v_pred = np.asarray(v_pred)
    if v_pred.shape != target.shape:
        raise ValueError(f"prediction {v_pred.shape} vs target {target.shape}")
    d = v_pred - target
    return float((d * d).sum() / d.size)


def euler_sample(velocity, shape, steps, seed, dtype=np.float32):
    """Integrate dz/dt = v from t=1 (seeded unit normal) down to t=0; clamp to [0, 1].

    ``velocity(z, t)`` returns an array shaped like ``z``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    z = np.random.default_rng(seed).standard_normal(shape).astype(dtype)
    return integrate(velocity, z, steps)


def integrate(velocity, z, steps):
    """Euler steps from t=1 to t=0 starting at ``z``; result clamped to [0, 1]."""
    if steps < 1:
        raise ValueError("steps must be >= 1")
    dt = 1.0 / steps
    for k in range(steps):
        t = 1.0 - k * dt
        v = np.asarray(velocity(z, t), dtype=z.dtype)
        z = z - z.dtype.type(dt) * v
        if not np.all(np.isfinite(z)):
            raise DivergenceError("non-finite sampler state", k)
    return np.clip(z, 0.0, 1.0)


def model_velocity(model, seqs, pooled_seqs=None, style=None):
    """Closure ``(z, t) -> v`` for a backbone model with fixed conditioning."""
    with nx.no_grad():
        c_txt, pooled, keep = model.encode_text(seqs)
        if pooled_seqs is not None:
            p = model.encode_text(pooled_seqs)[1]
            pooled = Tensor(np.repeat(p.data[:1], c_txt.shape[0], axis=0))

    def f(z, t):
        with nx.no_grad():
            ts = np.full(z.shape[0], t)
            return model.forward(z, ts, c_txt, pooled, keep, style).data

    return f


def sample_images(model, seqs, steps=20, seed=0, pooled_seqs=None, style=None, batch=16):
    """Euler samples for a list of prompts; each prompt's noise depends only on (seed, index)."""
    cfg = model.cfg
    out = []
    for lo in range(0, len(seqs), batch):
        chunk = seqs[lo:lo + batch]
        shape = (cfg.image_size, cfg.image_size, cfg.channels)
        z1 = np.stack([np.random.default_rng([seed, lo + i]).standard_normal(shape)
                       for i in range(len(chunk))]).astype(np.float32)
        st = style.take(lo, lo + len(chunk)) if style is not None and hasattr(style, "take") else style
        vel = model_velocity(model, chunk, pooled_seqs, st)
        out.append(integrate(vel, z1, steps))
    return np.concatenate(out, axis=0)


# -- training ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    path: Path | None = None
    rows: list = field(default_factory=list)

    def __post_init__(self):
        if self.path is not None:
            self.path = Path(self.path)
            if not self.path.exists():
                with open(self.path, "w", newline="") as fh:
                    csv.writer(fh).writerow(["step", "loss", "lr", "seed"])

    def append(self, step, loss, lr, seed):
        self.rows.append((step, loss, lr, seed))
        if self.path is not None:
            with open(self.path, "a", newline="") as fh:
                csv.writer(fh).writerow([step, repr(float(loss)), lr, seed])

    @property
    def losses(self):
        return [r[1] for r in self.rows]


def draw_batch(rng, n_items, batch):
    return rng.choice(n_items, size=min(batch, n_items), replace=False)


def flow_step(model, x0, seqs, rng, pooled_seqs=None, style=None):
    """One differentiable loss evaluation with fresh noise and uniform times."""
    eps = rng.standard_normal(x0.shape).astype(np.float32)
    t = rng.random(x0.shape[0])
    z = forward_interpolate(x0, eps, t).astype(np.float32)
    v = model.velocity(z, t, seqs, pooled_seqs, style)
    return cfm_loss(v, x0, eps)


def eval_loss(model, images, seqs, seed=1234, pooled_seqs=None, style_fn=None, batch=16):
    """Flow loss on fixed noise and times; a stable yardstick across training."""
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(images.shape).astype(np.float32)
    t = (np.arange(len(images)) + 0.5) / len(images)
    t = t[rng.permutation(len(images))]
    total = 0.0
    with nx.no_grad():
        for lo in range(0, len(images), batch):
            sl = slice(lo, lo + batch)
            z = forward_interpolate(images[sl], eps[sl], t[sl]).astype(np.float32)
            style = style_fn(sl) if style_fn else None
            v = model.velocity(z, t[sl], seqs[sl], pooled_seqs, style)
            total += cfm_loss(v.data, images[sl], eps[sl]) * len(z)
    return total / len(images)


def train(model, images, seqs, steps, lr=1e-4, seed=0, batch=8, trainable=None,
          pooled_seqs=None, style_fn=None, log: TrainLog | None = None, on_step=None,
          lr_decay=True, optimizer=None):
    """Adam on the flow-matching loss over ``trainable`` parameter names.

    ``style_fn(indices)`` supplies a style condition for the batch when given.
    Returns the optimizer (its moments can seed a resumed run).
    """
    params = model.params
    names = list(params) if trainable is None else list(trainable)
    extra = {}
    if style_fn is not None and hasattr(style_fn, "parameters"):
        extra = style_fn.parameters()
    params.set_requires_grad(names)
    for t in extra.values():
        t.requires_grad = True
    opt = optimizer or Adam({**{n: params[n] for n in names}, **extra}, lr=lr)
    rng = np.random.default_rng(seed)
    log = log or TrainLog()
    try:
        for step in range(steps):
            idx = np.sort(draw_batch(rng, len(images), batch))
            cur_lr = lr * 0.5 * (1 + math.cos(math.pi * step / steps)) if lr_decay else lr
            opt.lr = cur_lr
            style = style_fn(idx) if style_fn is not None else None
            loss = flow_step(model, images[idx], [seqs[i] for i in idx], rng, pooled_seqs, style)
            val = float(loss.data)
            if not math.isfinite(val):
                nx.current_graph().clear()
                raise DivergenceError("non-finite loss", step)
            nx.backward(loss)
            opt.step()
            opt.zero_grad()
            log.append(step, val, cur_lr, seed)
            if on_step is not None:
                on_step(step, val)
    finally:
        params.set_requires_grad([])
        for t in extra.values():
            t.requires_grad = False
            t.grad = None
    return opt
