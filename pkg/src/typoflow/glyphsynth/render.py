"""Deterministic text-line rasterizer with per-word typographic attributes."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from ..tokenizer import Attribute, ControlSpan
from .font import BAND_H, BASELINE, SHEAR, UNDERLINE_ROWS, get_font

CANVAS_W, CANVAS_H = 256, 64
MIN_LUMA_GAP = 64

# fixed augmentation palette (8-bit RGB)
PALETTE = (
    (0, 0, 0), (255, 255, 255), (200, 30, 30), (20, 60, 170),
    (250, 220, 60), (30, 130, 60), (245, 240, 225), (110, 40, 130),
    (140, 210, 240), (250, 150, 40), (60, 60, 60), (230, 180, 200),
)


class LayoutError(ValueError):
    def __init__(self, required, available):
        super().__init__(f"text needs {required} px but the canvas offers {available}")
        self.required = required
        self.available = available


def luma(rgb):
    r, g, b = rgb
    return 0.299 * r + 0.587 * g + 0.114 * b


def contrast_ok(fg, bg):
    return abs(luma(fg) - luma(bg)) >= MIN_LUMA_GAP


def color_pairs():
    """All ordered (fg, bg) palette pairs passing the contrast floor."""
    return [(f, b) for f in PALETTE for b in PALETTE if f != b and contrast_ok(f, b)]


@dataclass(frozen=True)
class RenderSpec:
    text: str
    spans: tuple = ()
    font_id: int = 0
    fg_color: tuple = (0, 0, 0)
    bg_color: tuple = (255, 255, 255)
    width: int = CANVAS_W
    height: int = CANVAS_H

    def validate(self):
        if not contrast_ok(self.fg_color, self.bg_color):
            raise ValueError(f"fg/bg luma gap below {MIN_LUMA_GAP}: {self.fg_color} on {self.bg_color}")
        if self.height < BAND_H + 4:
            raise ValueError("canvas too short for the text band")
        layout(self)


@dataclass(frozen=True)
class WordBox:
    index: int
    text: str
    x: int          # left edge of the first cell
    n_chars: int
    advance: int
    ink_left: int   # skeleton x=0 of the first glyph
    ink_right: int  # skeleton x=4 of the last glyph (inclusive)


@dataclass(frozen=True)
class Layout:
    x0: int
    band_top: int
    font_id: int
    words: tuple = field(default_factory=tuple)

    @property
    def baseline(self):
        return self.band_top + BASELINE


def band_top(height):
    return (height - BAND_H) // 2


def layout(spec: RenderSpec) -> Layout:
    font = get_font(spec.font_id)
    n = len(spec.text)
    need = n * font.advance + 4
    if need > spec.width:
        raise LayoutError(need, spec.width)
    x0 = (spec.width - n * font.advance) // 2
    words = []
    pos = 0
    for wi, w in enumerate(spec.text.split()):
        start = spec.text.index(w, pos)
        pos = start + len(w)
        x = x0 + start * font.advance
        words.append(WordBox(wi, w, x, len(w), font.advance, x + font.offset,
                             x + (len(w) - 1) * font.advance + font.offset + 4))
    return Layout(x0, band_top(spec.height), spec.font_id, tuple(words))


def dilate(mask):
    """8-neighbourhood binary dilation (1 pixel)."""
    p = np.pad(mask, 1)
    out = np.zeros_like(mask)
    h, w = mask.shape
    for dr in (0, 1, 2):
        for dc in (0, 1, 2):
            out |= p[dr:dr + h, dc:dc + w]
    return out


def shear_shift(row):
    """Rightward shift of band row ``row`` under italic shear."""
    return math.floor(SHEAR * (BASELINE - row) + 0.5)


def shear(mask):
    """Shear a band-aligned mask (row 0 = band top); rows above the baseline move right."""
    out = np.zeros_like(mask)
    w = mask.shape[1]
    for r in range(mask.shape[0]):
        dx = shear_shift(r)
        if dx >= 0:
            out[r, dx:] = mask[r, :w - dx]
        else:
            out[r, :w + dx] = mask[r, -dx:]
    return out


PAD = 3  # margin around a word strip so dilation and shear stay inside it


def word_strip(word, font_id, attr=None):
    """Word ink as a (BAND_H + 2, width + 2*PAD) mask; column PAD is the first cell's left edge.

    Row ``r`` of the strip is band row ``r``; the two extra rows hold the underline.
    """
    font = get_font(font_id)
    strip = np.zeros((BAND_H + 2, len(word) * font.advance + 2 * PAD), dtype=bool)
    for i, ch in enumerate(word):
        c = PAD + i * font.advance
        strip[:BAND_H, c:c + font.advance] |= font.glyph(ch)
    if attr is Attribute.BOLD:
        strip = dilate(strip)
    elif attr is Attribute.ITALIC:
        strip = shear(strip)
    elif attr is Attribute.UNDERLINE:
        left = PAD + font.offset
        right = PAD + (len(word) - 1) * font.advance + font.offset + 4
        for r in UNDERLINE_ROWS:
            strip[r, left:right + 1] = True
    return strip


def render_mask(spec: RenderSpec) -> np.ndarray:
    spec.validate()
    lay = layout(spec)
    attrs = {s.word_index: s.attribute for s in spec.spans}
    mask = np.zeros((spec.height, spec.width), dtype=bool)
    top = lay.band_top
    for wb in lay.words:
        strip = word_strip(wb.text, spec.font_id, attrs.get(wb.index))
        x = wb.x - PAD
        lo, hi = max(x, 0), min(x + strip.shape[1], spec.width)
        mask[top:top + strip.shape[0], lo:hi] |= strip[:, lo - x:hi - x]
    return mask


def colorize(mask, fg, bg):
    fg = np.asarray(fg, dtype=np.float32) / 255.0
    bg = np.asarray(bg, dtype=np.float32) / 255.0
    img = np.empty(mask.shape + (3,), dtype=np.float32)
    img[...] = bg
    img[mask] = fg
    return img


def render(spec: RenderSpec) -> np.ndarray:
    """H x W x 3 float32 image in [0, 1]."""
    return colorize(render_mask(spec), spec.fg_color, spec.bg_color)


def image_hash(img) -> str:
    return hashlib.sha256(np.ascontiguousarray(img, dtype=np.float32).tobytes()).hexdigest()


def spans_for(attrs):
    """ControlSpans from a {word_index: Attribute} map (token ranges left empty)."""
    return tuple(ControlSpan(a, i, (0, 0)) for i, a in sorted(attrs.items()))
