"""Command-line entry point: dataset synthesis, training stages, sampling, analysis, evaluation.

Every stage reads a flat ``key=value`` config (``--config``) plus repeated
``--set key=value`` overrides, writes the fully resolved config to
``<out>/config.txt`` and puts its artifacts beside it. Re-running a stage from
that stored config reproduces the artifacts bitwise.

Exit codes: 0 ok, 2 config error, 3 missing prerequisite, 4 numeric divergence,
5 stage threshold not met.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import eval as ev
from . import flow, sca, tcft
from . import numerics as nx
from .backbone import Model, ModelConfig, attention, param_report, read_config, write_config
from .glyphsynth import dataset as ds
from .numerics import Tensor
from .tokenizer import GrammarError, parse_prompt, with_prefix

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED, EXIT_THRESHOLD = 0, 2, 3, 4, 5

COMMANDS = ("dataset", "train-base", "train-tcft", "train-sca", "sample", "eval", "analyze-deltas", "bench")

DEFAULTS = {
    **{f"model.{f.name}": f.default for f in fields(ModelConfig)},
    "data.seed": 0,
    "data.n_excerpts": 625,
    "data.n_fonts": 5,
    "data.write_images": False,
    "data.bench_prompts": 1000,
    "data.crops": 64,
    "data.crop_fonts": "0",
    "data.crop_colors": "mono",
    "train.steps": 800,
    "train.lr": 1e-3,
    "train.batch": 8,
    "train.seed": 0,
    "train.target_ratio": 0.1,
    "train.pooled_prompt": tcft.POOLED_PROMPT,
    "tcft.base": "",
    "tcft.steps": 400,
    "tcft.lr": 1e-3,
    "tcft.batch": 8,
    "tcft.seed": 0,
    "tcft.groups": "TxtAttn,TokenEmbed",
    "tcft.prefix": tcft.PREFIX,
    "sca.base": "",
    "sca.phase": 1,
    "sca.init": "",
    "sca.steps": 300,
    "sca.lr": 1e-3,
    "sca.batch": 8,
    "sca.seed": 0,
    "sca.stride": 2,
    "sca.lam": 1.0,
    "sca.n_general": 2048,
    "sca.n_artext": 512,
    "sample.checkpoint": "",
    "sample.adapters": "",
    "sample.prompts": "crops",
    "sample.steps": 20,
    "sample.seed": 0,
    "sample.batch": 16,
    "sample.lam": 0.9,
    "sample.style": "",
    # TC-FT trains on prefixed prompts, so sampling uses the same trigger
    "sample.prefix": tcft.PREFIX,
    "eval.samples": "",
    "eval.adapters": "",
    "eval.min_ocr": 0.0,
    "eval.min_word": 0.0,
    "analyze.base": "",
    "analyze.tuned": "",
    "analyze.expect": "TxtAttn,TokenEmbed",
    "bench.batch": 4,
    "bench.repeats": 3,
    "bench.steps": 4,
}


class ConfigError(ValueError):
    pass


class MissingPrerequisite(FileNotFoundError):
    pass


class ThresholdFailure(RuntimeError):
    pass


# -- config -----------------------------------------------------------------------------

def _coerce(key, raw):
    default = DEFAULTS[key]
    if isinstance(raw, type(default)) and not isinstance(raw, str):
        return raw
    s = str(raw).strip()
    try:
        if isinstance(default, bool):
            if s.lower() in ("1", "true", "yes", "on"):
                return True
            if s.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(s)
        if isinstance(default, int):
            return int(s)
        if isinstance(default, float):
            return float(s)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {s!r} as {type(default).__name__}") from None
    return s


def resolve_config(path=None, overrides=()):
    """Defaults, then the config file, then ``key=value`` overrides; unknown keys are errors."""
    cfg = dict(DEFAULTS)
    items = []
    if path:
        try:
            items.extend(read_config(path).items())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        except ValueError as e:
            raise ConfigError(str(e)) from None
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not key=value")
        k, v = ov.split("=", 1)
        items.append((k.strip(), v))
    for k, v in items:
        if k not in DEFAULTS:
            raise ConfigError(f"unknown config key {k!r}")
        cfg[k] = _coerce(k, v)
    try:
        model_config(cfg)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"model config: {e}") from None
    return cfg


def model_config(cfg) -> ModelConfig:
    return ModelConfig.from_dict({k[6:]: v for k, v in cfg.items() if k.startswith("model.")})


def _ints(s):
    try:
        return tuple(int(x) for x in str(s).split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {s!r}") from None


def _need(path, what):
    if not path:
        raise MissingPrerequisite(f"{what} is not set")
    p = Path(path)
    if not p.exists():
        raise MissingPrerequisite(f"{what} {p} does not exist")
    return p


# -- shared pieces --------------------------------------------------------------------------

def crop_set(cfg):
    colors = None if cfg["data.crop_colors"] == "palette" else ((0, 0, 0), (255, 255, 255))
    return ds.build_crop_set(cfg["data.crops"], seed=cfg["data.seed"], font_ids=_ints(cfg["data.crop_fonts"]),
                             colors=colors, size=cfg["model.image_size"])


def load_model(cfg, path):
    m = Model(model_config(cfg), seed=0)
    try:
        m.load(path)
    except (KeyError, ValueError) as e:
        raise ConfigError(f"checkpoint {path} does not fit the model config: {e}") from None
    return m


def style_encoder(cfg):
    mc = model_config(cfg)
    return sca.StyleEncoder(d=mc.d, image_size=mc.image_size, channels=mc.channels, heads=mc.heads,
                            seed=cfg["sca.seed"])


def style_image(spec, cfg):
    """``artext:<i>`` (held-out artistic crop), ``general:<i>``, or a PPM path."""
    size = cfg["model.image_size"]
    if spec.startswith("artext:"):
        return ds.artext_style_sample(int(spec[7:]), seed=cfg["sca.seed"] + 1, size=size).image
    if spec.startswith("general:"):
        return ds.general_style_sample(int(spec[8:]), seed=cfg["sca.seed"] + 1, size=size).image
    return ds.read_ppm(_need(spec, "style image"))


def truth_of(prompt):
    seq = parse_prompt(prompt)
    words = seq.stripped_text.split()
    attrs = [None] * len(words)
    for sp in seq.spans:
        attrs[sp.word_index] = sp.attribute.value
    return {"words": words, "attributes": attrs, "font_id": seq.font_id or 0}


def _log(path):
    return flow.TrainLog(path)


def _pooled(cfg):
    return parse_prompt(cfg["train.pooled_prompt"])


# -- stages ---------------------------------------------------------------------------------

def cmd_dataset(cfg, out):
    seed = cfg["data.seed"]
    samples = ds.build_tc_dataset(cfg["data.n_excerpts"], cfg["data.n_fonts"], seed=seed)
    ds.write_dataset(samples, out, images=cfg["data.write_images"])
    want = cfg["data.n_excerpts"] * cfg["data.n_fonts"] * ds.N_VARIANTS
    bench = ds.build_btr_bench(cfg["data.bench_prompts"], seed=seed)
    ds.write_bench(bench, out / "btr_bench.jsonl")
    summary = {"samples": len(samples), "expected": want, "variants_per_excerpt_font": ds.N_VARIANTS,
               "btr_prompts": len(bench)}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    if len(samples) != want:
        raise ThresholdFailure(f"dataset has {len(samples)} samples, expected {want}")


def cmd_train_base(cfg, out):
    crops = crop_set(cfg)
    imgs = np.stack([s.image for s in crops])
    seqs = [parse_prompt(s.token_seq.stripped_text) for s in crops]
    pooled = _pooled(cfg)
    model = Model(model_config(cfg), seed=cfg["train.seed"])
    before = flow.eval_loss(model, imgs, seqs, pooled_seqs=pooled)
    flow.train(model, imgs, seqs, cfg["train.steps"], lr=cfg["train.lr"], seed=cfg["train.seed"],
               batch=cfg["train.batch"], pooled_seqs=pooled, log=_log(out / "train_log.csv"))
    after = flow.eval_loss(model, imgs, seqs, pooled_seqs=pooled)
    # the new control rows start from the trained base rows so fine-tuning begins at the base
    tcft.inject_control_rows(model.params, seed=cfg["train.seed"])
    model.save(out / "base.ckpt")
    ratio = after / before
    report = {"initial_loss": before, "final_loss": after, "ratio": ratio,
              "param_report": param_report(model.params)}
    (out / "train_report.json").write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
    if ratio >= cfg["train.target_ratio"]:
        raise ThresholdFailure(f"loss ratio {ratio:.4f} is not below {cfg['train.target_ratio']}")


def cmd_train_tcft(cfg, out):
    base = _need(cfg["tcft.base"], "tcft.base checkpoint")
    model = load_model(cfg, base)
    crops = crop_set(cfg)
    imgs = np.stack([s.image for s in crops])
    mask = tcft.build_freeze_mask(model.params, [g for g in cfg["tcft.groups"].split(",") if g])
    tcft.tcft_train(model, imgs, [s.token_seq for s in crops], mask, cfg["tcft.steps"], lr=cfg["tcft.lr"],
                    seed=cfg["tcft.seed"], batch=cfg["tcft.batch"], prefix=cfg["tcft.prefix"],
                    pooled_prompt=cfg["train.pooled_prompt"], log=_log(out / "train_log.csv"))
    model.save(out / "tcft.ckpt")
    base_params = load_model(cfg, base).params
    rep = tcft.param_delta(base_params, model.params)
    rep.write_csv(out / "deltas.csv")


def cmd_train_sca(cfg, out):
    phase = cfg["sca.phase"]
    model = load_model(cfg, _need(cfg["sca.base"], "sca.base checkpoint"))
    encoder = style_encoder(cfg)
    init = None
    if phase == 2:
        init = _need(cfg["sca.init"], "sca.init phase-1 adapter checkpoint")
    elif phase != 1:
        raise ConfigError("sca.phase must be 1 or 2")
    size = cfg["model.image_size"]
    if phase == 1:
        data = [ds.general_style_sample(i, cfg["sca.seed"], size) for i in range(cfg["sca.n_general"])]
    else:
        data = [ds.artext_style_sample(i, cfg["sca.seed"], size) for i in range(cfg["sca.n_artext"])]
    imgs = np.stack([s.image for s in data])
    seqs = [parse_prompt(s.prompt) for s in data]
    if phase == 1:
        sca.install_adapters(model, cfg["sca.stride"])
    sca.sca_train(model, encoder, phase, imgs, seqs, cfg["sca.steps"], lr=cfg["sca.lr"], seed=cfg["sca.seed"],
                  batch=cfg["sca.batch"], lam=cfg["sca.lam"], init_from=init,
                  log=_log(out / "train_log.csv"))
    sca.save_sca(out / f"sca_phase{phase}.ckpt", model.adapters, encoder)


def _sample_prompts(cfg):
    src = cfg["sample.prompts"]
    if src == "crops":
        return [(s.prompt, s.truth) for s in crop_set(cfg)]
    lines = _need(src, "sample.prompts file").read_text(encoding="utf-8").splitlines()
    out = []
    for line in lines:
        if line.strip():
            try:
                out.append((line.strip(), truth_of(line.strip())))
            except GrammarError as e:
                raise ConfigError(f"bad prompt {line!r}: {e}") from None
    return out


def cmd_sample(cfg, out):
    mc = model_config(cfg)
    model = load_model(cfg, cfg["sample.checkpoint"]) if cfg["sample.checkpoint"] else Model(mc, seed=0)
    prompts = _sample_prompts(cfg)
    try:
        seqs = [with_prefix(parse_prompt(p), cfg["sample.prefix"]) for p, _ in prompts]
    except ValueError as e:
        raise ConfigError(f"sample.prefix: {e}") from None
    style = None
    if cfg["sample.adapters"]:
        encoder = style_encoder(cfg)
        sca.load_sca(_need(cfg["sample.adapters"], "sample.adapters checkpoint"), model, encoder)
        if cfg["sample.style"]:
            img = style_image(cfg["sample.style"], cfg)
            with nx.no_grad():
                style = sca.StyleCondition(encoder.encode(img[None]), cfg["sample.lam"])
    images = flow.sample_images(model, seqs, steps=cfg["sample.steps"], seed=cfg["sample.seed"],
                                pooled_seqs=_pooled(cfg), style=style, batch=cfg["sample.batch"])
    (out / "images").mkdir(exist_ok=True)
    with open(out / "samples.jsonl", "w", encoding="utf-8") as fh:
        for k, ((prompt, truth), img) in enumerate(zip(prompts, images)):
            rel = f"images/{k:06d}.ppm"
            ds.write_ppm(out / rel, img)
            rec = {"prompt": prompt, "truth": truth, "image": rel, "style": cfg["sample.style"] or None}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def cmd_eval(cfg, out):
    src = _need(cfg["eval.samples"], "eval.samples directory")
    recs = ds.read_manifest(_need(src / "samples.jsonl", "samples.jsonl"))
    images = [ds.read_ppm(src / r["image"]) for r in recs]
    truths = [r["truth"] for r in recs]
    refs = encoder = None
    if cfg["eval.adapters"]:
        encoder = style_encoder(cfg)
        scratch = Model(model_config(cfg), seed=0)
        sca.load_sca(_need(cfg["eval.adapters"], "eval.adapters checkpoint"), scratch, encoder)
        refs = [style_image(r["style"], cfg) if r.get("style") else img for r, img in zip(recs, images)]
    report = ev.evaluate(images, truths, prompts=[r["prompt"] for r in recs], style_refs=refs, encoder=encoder)
    report.to_json(out / "eval_report.json")
    if report.ocr_acc < cfg["eval.min_ocr"] or report.word_acc < cfg["eval.min_word"]:
        raise ThresholdFailure(f"ocr_acc {report.ocr_acc:.3f}, word_acc {report.word_acc:.3f} below thresholds")


def cmd_analyze_deltas(cfg, out):
    base = load_model(cfg, _need(cfg["analyze.base"], "analyze.base checkpoint"))
    tuned = load_model(cfg, _need(cfg["analyze.tuned"], "analyze.tuned checkpoint"))
    rep = tcft.param_delta(base.params, tuned.params)
    rep.write_csv(out / "deltas.csv")
    summary = {"category_means": rep.category_means(), "ranking": rep.ranking(),
               "mm_single_ratio": rep.mm_single_ratio(), "group_sums": rep.group_sums, "total": rep.total}
    (out / "delta_summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    expect = cfg["analyze.expect"]
    if expect and expect != "all":
        allowed = set(expect.split(","))
        moved = sorted({g for _, g, d in rep.layers if d != 0.0} - allowed)
        if moved:
            raise ThresholdFailure(f"groups outside {sorted(allowed)} changed: {moved}")


def _digest(arr):
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=np.float32).tobytes()).hexdigest()


def cmd_bench(cfg, out):
    """Per-op timings for joint attention (with and without the style branch) and sampling."""
    mc = model_config(cfg)
    rng = np.random.default_rng(cfg["sample.seed"])
    B, reps = cfg["bench.batch"], cfg["bench.repeats"]
    L = mc.n_img + 16
    q, k, v = (Tensor(rng.standard_normal((B, L, mc.d)).astype(np.float32)) for _ in range(3))
    c_img = Tensor(rng.standard_normal((B, sca.N_STYLE_TOKENS, mc.d)).astype(np.float32))
    w = Tensor((0.1 * rng.standard_normal((mc.d, mc.d))).astype(np.float32))
    timings, digests = {}, {}

    def timed(name, fn):
        best = float("inf")
        with nx.no_grad():
            for _ in range(reps):
                t0 = time.perf_counter()
                res = fn()
                best = min(best, time.perf_counter() - t0)
        timings[name] = best
        digests[name] = _digest(res)

    timed("joint_attention", lambda: attention(q, k, v, mc.heads).data)
    timed("decoupled_attention", lambda: sca.decoupled_forward(q, k, v, mc.n_img, c_img, w, w, 0.9,
                                                               mc.heads).data)
    model = Model(mc, seed=0)
    seqs = [parse_prompt(p.prompt) for p in ds.build_btr_bench(B, seed=cfg["data.seed"])]
    timed("sample_no_adapters", lambda: flow.sample_images(model, seqs, steps=cfg["bench.steps"], seed=0))
    for stride in (1, 2):
        sca.install_adapters(model, stride)
        enc = style_encoder(cfg)
        with nx.no_grad():
            cond = sca.StyleCondition(enc.encode(np.full((1, mc.image_size, mc.image_size, mc.channels), 0.5)),
                                      0.9)
        timed(f"sample_adapters_stride{stride}",
              lambda: flow.sample_images(model, seqs, steps=cfg["bench.steps"], seed=0, style=cond))
        digests[f"adapter_params_stride{stride}"] = model.adapters.count()
    (out / "bench_outputs.json").write_text(json.dumps(digests, indent=1, sort_keys=True) + "\n")
    (out / "bench_timings.json").write_text(json.dumps(timings, indent=1, sort_keys=True) + "\n")
    for name, sec in timings.items():
        print(f"{name:32s} {sec * 1e3:10.2f} ms")


STAGES = {
    "dataset": cmd_dataset,
    "train-base": cmd_train_base,
    "train-tcft": cmd_train_tcft,
    "train-sca": cmd_train_sca,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "analyze-deltas": cmd_analyze_deltas,
    "bench": cmd_bench,
}


def build_parser():
    p = argparse.ArgumentParser(prog="typoflow", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("--out", required=True, help="run directory for artifacts")
    return p


def run(command, out, config=None, overrides=()):
    """Run one stage; returns the exit status."""
    try:
        cfg = resolve_config(config, overrides)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    write_config(out / "config.txt", cfg)
    try:
        STAGES[command](cfg, out)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingPrerequisite as e:
        print(f"missing prerequisite: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (flow.DivergenceError, FloatingPointError) as e:
        print(f"numeric divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except ThresholdFailure as e:
        print(f"threshold not met: {e}", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    return run(args.command, args.out, args.config, args.overrides)


if __name__ == "__main__":
    sys.exit(main())
