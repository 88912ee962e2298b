"""TC-Dataset, crop sets, BTR benchmark and style sets built on the rasterizer."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..tokenizer import Attribute, TokenSequence, markup, parse_prompt
from .font import BAND_H, FONTS, get_font
from .render import (
    PALETTE, RenderSpec, band_top, color_pairs, colorize, dilate, image_hash, render,
    render_mask, spans_for,
)

ATTRS = (Attribute.BOLD, Attribute.ITALIC, Attribute.UNDERLINE)
N_VARIANT_POSITIONS = 5
N_VARIANTS = 1 + len(ATTRS) * N_VARIANT_POSITIONS  # plain plus each attribute at each position
CROP = 64

COLOR_NAMES = {
    (0, 0, 0): "black", (255, 255, 255): "white", (200, 30, 30): "red",
    (20, 60, 170): "blue", (250, 220, 60): "yellow", (30, 130, 60): "green",
    (245, 240, 225): "cream", (110, 40, 130): "purple", (140, 210, 240): "sky",
    (250, 150, 40): "orange", (60, 60, 60): "charcoal", (230, 180, 200): "pink",
}

# short words so a five-word excerpt fits a 256 px line in the widest font
WORDS = (
    "a an and are as at be but by can come day did do down end eye far few for "
    "get go had has he her him his how i if in is it its let man may me men my "
    "new no not now of off old on one or our out own put ran red run sad saw say "
    "see she sir so sun ten the tea to too two up us was way we who why yes yet "
    "you air arm art ask bad bed big boy car cat cup cut dog dry ear eat egg fat "
    "fox fun god gun hat hot ice ink job key kid lad law lay leg lie lip low mad "
    "map mud nod oak odd oil owl pen pie pig pot raw row sea set shy sit sky son "
    "tin toe top toy van war wet win wit yard ago also away back bell bird blue "
    "boat body book calm cold dark door dust each even face fact fell fire fish "
    "foot gold gone good gray hand hard head hear heat high hill home hope hour "
    "idle into just keep kind king knew lady lake land last late lazy life line "
    "lips long lord lost loud love made mist moon more most much must name near "
    "next nice none once only open over pale past path rain read rest ring road "
    "rock room rose said salt sand seen ship shop side sign slow snow soft some "
    "soon star stay such sure tall tell than that them then they thin this time "
    "told town tree true turn upon very wait walk wall warm wave well went were "
    "west what when wide wild will wind wine wish with wood word work year"
).split()


@dataclass(frozen=True)
class Sample:
    spec: RenderSpec
    prompt: str
    token_seq: TokenSequence
    truth: dict
    image_hash: str = ""

    @property
    def image(self):
        return render(self.spec)

    @property
    def words(self):
        return self.spec.text.split()


def truth_record(words, attrs, font_id):
    return {
        "words": list(words),
        "attributes": [attrs[i].value if i in attrs else None for i in range(len(words))],
        "font_id": font_id,
    }


def make_sample(words, attrs, font_id, fg, bg, width=256, height=64, with_hash=True):
    spec = RenderSpec(" ".join(words), spans_for(attrs), font_id, tuple(fg), tuple(bg), width, height)
    prompt = markup(words, attrs, font_id)
    seq = parse_prompt(prompt)
    h = image_hash(render(spec)) if with_hash else ""
    return Sample(spec, prompt, seq, truth_record(words, attrs, font_id), h)


def _rng(*key):
    return np.random.default_rng([int(k) for k in key])


def excerpt(index, seed=0, n_words=5, max_chars=25):
    """Deterministic pseudo-prose excerpt of exactly ``n_words`` lowercase words."""
    rng = _rng(seed, 7919, index)
    while True:
        words = [WORDS[i] for i in rng.integers(0, len(WORDS), n_words)]
        if rng.random() < 0.3:
            words[-1] += rng.choice([".", ",", "."])
        if len(" ".join(words)) <= max_chars:
            return " ".join(words)


def build_variants(text, font_id, positions, seed=0, key=0, with_hash=True):
    """One plain sample plus each of three attributes at each of five positions."""
    words = text.split()
    if len(words) < N_VARIANT_POSITIONS:
        raise ValueError(f"excerpt needs at least {N_VARIANT_POSITIONS} words, got {len(words)}")
    positions = list(positions)
    if len(positions) != N_VARIANT_POSITIONS or len(set(positions)) != len(positions):
        raise ValueError("positions must be five distinct word indices")
    if any(not 0 <= p < len(words) for p in positions):
        raise ValueError("position outside the excerpt")
    pairs = color_pairs()
    out = []
    variants = [{}] + [{p: a} for p in positions for a in ATTRS]
    for v, attrs in enumerate(variants):
        fg, bg = pairs[_rng(seed, key, font_id, v).integers(len(pairs))]
        out.append(make_sample(words, attrs, font_id, fg, bg, with_hash=with_hash))
    return out


def iter_tc_dataset(n_excerpts=625, n_fonts=len(FONTS), seed=0, with_hash=True):
    for i in range(n_excerpts):
        text = excerpt(i, seed)
        n = len(text.split())
        pos = sorted(_rng(seed, 104729, i).choice(n, N_VARIANT_POSITIONS, replace=False).tolist())
        for f in range(n_fonts):
            yield from build_variants(text, f, pos, seed, key=i, with_hash=with_hash)


def build_tc_dataset(n_excerpts=625, n_fonts=len(FONTS), seed=0, with_hash=True):
    return list(iter_tc_dataset(n_excerpts, n_fonts, seed, with_hash))


def crop_sample(words, attrs, font_id, fg=(0, 0, 0), bg=(255, 255, 255), size=CROP):
    return make_sample(words, attrs, font_id, fg, bg, width=size, height=size)


def _fits(word, font_id, size=CROP):
    return len(word) * get_font(font_id).advance + 4 <= size


def build_crop_set(n, seed=0, font_ids=(0,), colors=None, size=CROP):
    """Paired single-word crops: each word appears plain and with one attribute.

    ``colors`` fixes (fg, bg) for every crop; otherwise pairs are drawn from
    the palette per word.
    """
    if n % 2:
        raise ValueError("crop sets are built in plain/attributed pairs; n must be even")
    rng = _rng(seed, 31337)
    pairs = color_pairs()
    pool = [w for w in WORDS if len(w) >= 2]
    order = rng.permutation(len(pool))
    out = []
    k = 0
    for j in order:
        if len(out) == n:
            break
        font_id = font_ids[k % len(font_ids)]
        w = pool[j]
        if not _fits(w, font_id, size):
            continue
        fg, bg = colors if colors else pairs[rng.integers(len(pairs))]
        attr = ATTRS[k % 3]
        out.append(crop_sample([w], {}, font_id, fg, bg, size))
        out.append(crop_sample([w], {0: attr}, font_id, fg, bg, size))
        k += 1
    if len(out) < n:
        raise ValueError(f"word pool too small for {n} crops")
    return out


def word_crops(sample: Sample, size=CROP):
    """Re-render each word of a line sample alone on a square crop."""
    attrs = {i: Attribute(a) for i, a in enumerate(sample.truth["attributes"]) if a}
    out = []
    for i, w in enumerate(sample.words):
        if _fits(w, sample.spec.font_id, size):
            a = {0: attrs[i]} if i in attrs else {}
            out.append(crop_sample([w], a, sample.spec.font_id, sample.spec.fg_color,
                                   sample.spec.bg_color, size))
    return out


@dataclass(frozen=True)
class BenchPrompt:
    prompt: str
    words: tuple
    attributes: dict  # word index -> Attribute
    font_id: int


def build_btr_bench(n, seed=0):
    """``n`` prompts, three attributed positions each, plus a whole-prompt font tag."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = _rng(seed, 271828)
    out = []
    for i in range(n):
        words = excerpt(i, seed + 1).split()
        pos = rng.choice(len(words), 3, replace=False)
        attrs = {int(p): ATTRS[int(rng.integers(3))] for p in pos}
        font_id = int(rng.integers(len(FONTS)))
        out.append(BenchPrompt(markup(words, attrs, font_id), tuple(words), attrs, font_id))
    return out


# -- style sets ---------------------------------------------------------------

def _texture(kind, c1, c2, rng, size):
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "stripes":
        period = int(rng.integers(4, 13))
        direction = int(rng.integers(3))
        coord = (yy, xx, xx + yy)[direction]
        sel = (coord // (period // 2)) % 2 == 0
    elif kind == "checker":
        cell = int(rng.integers(4, 17))
        sel = ((yy // cell) + (xx // cell)) % 2 == 0
    else:
        block = int(rng.integers(2, 9))
        coarse = rng.random((size // block + 1, size // block + 1)) < 0.5
        sel = coarse[yy // block, xx // block]
    a = np.asarray(c1, dtype=np.float32) / 255.0
    b = np.asarray(c2, dtype=np.float32) / 255.0
    return np.where(sel[..., None], a, b).astype(np.float32)


TEXTURES = ("stripes", "checker", "noise")
ART_STYLES = ("texture", "outline", "gradient")


@dataclass(frozen=True)
class StyleSample:
    image: np.ndarray = field(repr=False)
    prompt: str
    truth: dict


def _distinct_colors(rng, k):
    idx = rng.choice(len(PALETTE), k, replace=False)
    return [PALETTE[i] for i in idx]


def general_style_sample(i, seed=0, size=CROP):
    rng = _rng(seed, 577, i)
    kind = TEXTURES[int(rng.integers(len(TEXTURES)))]
    c1, c2 = _distinct_colors(rng, 2)
    img = _texture(kind, c1, c2, rng, size)
    prompt = f"{COLOR_NAMES[c1]} and {COLOR_NAMES[c2]} {kind} pattern"
    return StyleSample(img, prompt, {"kind": kind, "colors": [list(c1), list(c2)], "text": ""})


def _contrasting(rng, bg, k):
    ok = [c for c in PALETTE if c != bg and abs(_luma(c) - _luma(bg)) >= 64]
    idx = rng.choice(len(ok), k, replace=False)
    return [ok[i] for i in idx]


def _luma(c):
    return 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2]


def artext_style_sample(i, seed=0, size=CROP, word=None, style=None, colors=None):
    """A word crop whose ink is restyled; ``colors`` is (bg, c1, c2)."""
    rng = _rng(seed, 991, i)
    font_id = int(rng.integers(len(FONTS)))
    if word is None:
        pool = [w for w in WORDS if len(w) >= 2 and _fits(w, font_id, size)]
        word = pool[int(rng.integers(len(pool)))]
    style = style or ART_STYLES[int(rng.integers(len(ART_STYLES)))]
    if colors is None:
        # the style lives in the ink; the page stays white like the base data
        bg = (255, 255, 255)
        c1, c2 = _contrasting(rng, bg, 2)
    else:
        bg, c1, c2 = colors
    spec = RenderSpec(word, (), font_id, c1, bg, size, size)
    mask = render_mask(spec)
    bgv = np.asarray(bg, dtype=np.float32) / 255.0
    img = np.empty((size, size, 3), dtype=np.float32)
    img[...] = bgv
    if style == "texture":
        tex = _texture("stripes", c1, c2, rng, size)
        img[mask] = tex[mask]
    elif style == "outline":
        ring = dilate(mask) & ~mask
        img[ring] = np.asarray(c1, dtype=np.float32) / 255.0
        img[mask] = np.asarray(c2, dtype=np.float32) / 255.0
    else:
        a = np.asarray(c1, dtype=np.float32) / 255.0
        b = np.asarray(c2, dtype=np.float32) / 255.0
        t = (np.arange(size, dtype=np.float32) / (size - 1))[None, :, None]
        grad = (1 - t) * a + t * b
        img[mask] = np.broadcast_to(grad, (size, size, 3))[mask]
    prompt = f'the word "{word}" in {COLOR_NAMES[c1]} and {COLOR_NAMES[c2]} {style} letters'
    truth = {"text": word, "style": style, "font_id": font_id,
             "colors": [list(bg), list(c1), list(c2)]}
    return StyleSample(img, prompt, truth)


def build_style_sets(seed=0, n_general=2048, n_artext=512, size=CROP):
    general = [general_style_sample(i, seed, size) for i in range(n_general)]
    artext = [artext_style_sample(i, seed, size) for i in range(n_artext)]
    return general, artext


# -- files ----------------------------------------------------------------------

def to_uint8(img):
    return np.clip(np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def write_ppm(path, img):
    arr = to_uint8(img)
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path):
    """Binary P6 reader; returns float32 H x W x 3 in [0, 1]."""
    raw = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h, maxval = (int(f) for f in fields[1:])
    pos += 1
    arr = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3)
    return (arr.astype(np.float32) / np.float32(maxval)).astype(np.float32)


def sample_record(sample: Sample, image_path):
    s = sample.spec
    return {
        "prompt": sample.prompt,
        "truth": sample.truth,
        "font_id": s.font_id,
        "colors": {"fg": list(s.fg_color), "bg": list(s.bg_color)},
        "canvas": [s.width, s.height],
        "image": None if image_path is None else str(image_path),
        "hash": sample.image_hash,
    }


def sample_from_record(rec) -> Sample:
    t = rec["truth"]
    attrs = {i: Attribute(a) for i, a in enumerate(t["attributes"]) if a}
    w, h = rec["canvas"]
    return make_sample(t["words"], attrs, rec["font_id"], tuple(rec["colors"]["fg"]),
                       tuple(rec["colors"]["bg"]), w, h)


def write_dataset(samples, out_dir, images=True):
    """``manifest.jsonl`` plus ``images/NNNNNN.ppm``; returns the manifest path."""
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    out_dir.mkdir(parents=True, exist_ok=True)
    if images:
        img_dir.mkdir(exist_ok=True)
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as fh:
        for k, s in enumerate(samples):
            rel = Path("images") / f"{k:06d}.ppm"
            if images:
                write_ppm(out_dir / rel, s.image)
            fh.write(json.dumps(sample_record(s, rel if images else None), sort_keys=True) + "\n")
    return manifest


def read_manifest(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def write_bench(prompts, path):
    with open(path, "w", encoding="utf-8") as fh:
        for p in prompts:
            fh.write(json.dumps({
                "prompt": p.prompt, "words": list(p.words), "font_id": p.font_id,
                "attributes": {str(k): v.value for k, v in sorted(p.attributes.items())},
            }, sort_keys=True) + "\n")
