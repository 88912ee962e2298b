"""Typography-control fine-tuning: freeze masks, the masked training loop, and the
per-layer parameter-change analysis."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import flow
from .backbone import ModelParams
from .numerics import ParamGroup
from .tokenizer import parse_prompt, with_prefix

TCFT_GROUPS = frozenset({ParamGroup.TXT_ATTN, ParamGroup.TOKEN_EMBED})
PREFIX = "sks"
POOLED_PROMPT = "words only, clean background"


@dataclass
class FreezeMask:
    trainable: dict          # name -> bool
    fraction: float          # trainable share of all parameters

    @property
    def names(self):
        return [n for n, on in self.trainable.items() if on]


def _as_groups(groups):
    out = set()
    for g in groups:
        out.add(ParamGroup.from_label(g) if isinstance(g, str) else ParamGroup(g))
    return out


def build_freeze_mask(params: ModelParams, groups=TCFT_GROUPS) -> FreezeMask:
    groups = _as_groups(groups)
    if not groups:
        raise ValueError("freeze mask needs at least one trainable group")
    flags = {n: params.groups[n] in groups for n in params}
    total = sum(params.count(n) for n in params)
    on = sum(params.count(n) for n, f in flags.items() if f)
    return FreezeMask(flags, on / total)


def inject_control_rows(params: ModelParams, seed=0, sigma=0.01):
    """Set the control/font embedding rows to the base-row mean plus seeded noise."""
    base = params["text.embed.base"].data
    ctrl = params["text.embed.control"]
    rng = np.random.default_rng([seed, 4099])
    mean = base.astype(np.float64).mean(0)
    ctrl.data = (mean[None, :] + sigma * rng.standard_normal(ctrl.shape)).astype(np.float32)


def tcft_train(model, images, seqs, mask: FreezeMask, steps, lr=1e-4, seed=0, batch=8,
               prefix=PREFIX, pooled_prompt=POOLED_PROMPT, log=None, on_step=None):
    """Fine-tune only the masked parameters on prefixed prompts with a fixed pooled prompt."""
    if len(images) == 0:
        raise ValueError("empty fine-tuning set")
    train_seqs = [with_prefix(s, prefix) for s in seqs]
    pooled = parse_prompt(pooled_prompt)
    flow.train(model, images, train_seqs, steps, lr=lr, seed=seed, batch=batch,
               trainable=mask.names, pooled_seqs=pooled, log=log, on_step=on_step)
    return model


# -- parameter-change analysis ---------------------------------------------------------

def layer_key(name, group):
    """Layer label: one block split by group, so each layer has a single group."""
    parts = name.split(".")
    head = parts[0]
    if head.startswith("mm"):
        if group is ParamGroup.TXT_ATTN:
            return f"{head}.txt_attn"
        if group is ParamGroup.IMG_ATTN:
            return f"{head}.img_attn"
        return f"{head}.other"
    if head.startswith("single"):
        return head
    if head == "text":
        if parts[1] == "embed":
            return f"text.embed.{parts[2]}"
        if parts[1].startswith("layer"):
            return f"text.{parts[1]}"
        return f"text.{parts[1]}"
    return head


@dataclass
class ParamDeltaReport:
    layers: list = field(default_factory=list)   # (layer, group label, delta)
    group_sums: dict = field(default_factory=dict)
    total: float = 0.0

    def delta(self, layer):
        for name, _, d in self.layers:
            if name == layer:
                return d
        raise KeyError(layer)

    def category_means(self):
        """Mean Δ over the four analysis categories (MM-DiT, Single-DiT, TxtAttn, ImgAttn)."""
        cats = {"MM-DiT": [], "Single-DiT": [], "TxtAttn": [], "ImgAttn": []}
        for name, g, d in self.layers:
            if name.startswith("mm"):
                cats["MM-DiT"].append(d)
            if name.startswith("single"):
                cats["Single-DiT"].append(d)
            if g == "TxtAttn":
                cats["TxtAttn"].append(d)
            if g == "ImgAttn":
                cats["ImgAttn"].append(d)
        return {k: float(np.mean(v)) if v else 0.0 for k, v in cats.items()}

    def ranking(self):
        m = self.category_means()
        return sorted(m, key=lambda k: -m[k])

    def mm_single_ratio(self):
        m = self.category_means()
        return m["MM-DiT"] / m["Single-DiT"] if m["Single-DiT"] else float("inf")

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "group", "delta"])
            for name, g, d in self.layers:
                w.writerow([name, g, repr(d)])


def _relative_change(before, after):
    diff = np.linalg.norm((after.astype(np.float64) - before.astype(np.float64)).ravel())
    if diff == 0.0:
        return 0.0
    base = np.linalg.norm(before.astype(np.float64).ravel())
    # a zero-initialised matrix that moved counts as fully changed
    return float(diff / base) if base > 0 else 1.0


def param_delta(base, tuned, groups=None) -> ParamDeltaReport:
    """Δ_l = mean over the layer's matrices of ||θ' - θ|| / ||θ||.

    ``base`` and ``tuned`` map names to arrays (or are ModelParams); ``groups``
    maps names to ParamGroup and defaults to the tuned ModelParams' tags.
    Vectors (biases) are left out: only matrices enter the average.
    """
    if isinstance(base, ModelParams):
        groups = groups or base.groups
        base = {n: base[n].data for n in base}
    if isinstance(tuned, ModelParams):
        groups = groups or tuned.groups
        tuned = {n: tuned[n].data for n in tuned}
    if set(base) != set(tuned):
        raise KeyError(f"parameter names differ: {sorted(set(base) ^ set(tuned))[:4]}")
    if groups is None:
        raise ValueError("parameter groups are required")
    per_layer = {}
    for n in base:
        if base[n].shape != tuned[n].shape:
            raise ValueError(f"{n}: shape {base[n].shape} vs {tuned[n].shape}")
        if base[n].ndim < 2:
            continue
        g = ParamGroup(groups[n])
        key = layer_key(n, g)
        per_layer.setdefault(key, (g, []))[1].append(_relative_change(base[n], tuned[n]))
    rep = ParamDeltaReport()
    for key, (g, vals) in per_layer.items():
        d = float(np.mean(vals))
        rep.layers.append((key, g.label, d))
        rep.group_sums[g.label] = rep.group_sums.get(g.label, 0.0) + d
    rep.total = float(sum(d for _, _, d in rep.layers))
    return rep
