"""Deterministic evaluation: template OCR, attribute detectors, Word-Acc, style score.

The oracle shares the synthetic font with the renderer, so ground truth is
computable: every clean render decodes exactly, and thresholds only need to
absorb generation noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from functools import lru_cache

import numpy as np

from .glyphsynth.font import BAND_H, BASELINE, CHARSET, FONTS, get_font
from .glyphsynth.render import PAD, band_top, word_strip
from .tokenizer import Attribute

INK_DIST = 0.3          # RGB L2 distance from background that counts as ink
CELL_ROWS = BASELINE + 2  # band rows 0..8 hold every glyph pixel except low descenders
REJECT_FRAC = 0.4
REJECT_SLACK = 1
OFF_BAND_FRAC = 0.02    # ink share outside the text band that marks an image as non-text
X_JITTER = (0, -1, 1)
BOLD_RATIO = 1.15
ITALIC_SLOPE = 0.12
UNDERLINE_COVER = 0.8
ATTR_VARIANTS = (None, Attribute.BOLD, Attribute.ITALIC)


@dataclass
class FontTemplates:
    font_id: int
    chars: list            # char label per template row
    attrs: list            # attribute (or None) per template row
    bits: np.ndarray       # (T, CELL_ROWS * advance) float32 0/1
    ink: np.ndarray        # (T,)


class GlyphAtlas:
    """Reference cells for every (font, char, attribute) straight from the renderer."""

    def __init__(self):
        self._fonts = {}

    def cell(self, font_id, ch, attr=None):
        """Full band cell (BAND_H + 2 rows) for one character."""
        adv = get_font(font_id).advance
        return word_strip(ch, font_id, attr)[:, PAD:PAD + adv]

    def templates(self, font_id) -> FontTemplates:
        if font_id not in self._fonts:
            chars, attrs, rows = [" "], [None], [np.zeros(CELL_ROWS * get_font(font_id).advance)]
            for attr in ATTR_VARIANTS:
                for ch in CHARSET[1:]:
                    chars.append(ch)
                    attrs.append(attr)
                    rows.append(self.cell(font_id, ch, attr)[:CELL_ROWS].ravel())
            bits = np.asarray(rows, dtype=np.float32)
            self._fonts[font_id] = FontTemplates(font_id, chars, attrs, bits, bits.sum(1))
        return self._fonts[font_id]

    def plain_ink(self, font_id, ch):
        return int(self.cell(font_id, ch)[:CELL_ROWS].sum())

    def word_strip(self, word, font_id, attr=None):
        return word_strip(word, font_id, attr)


@lru_cache(maxsize=1)
def default_atlas():
    return GlyphAtlas()


def binarize(image):
    """Ink mask: pixels farther than INK_DIST (RGB L2) from the median border colour."""
    img = np.asarray(image, dtype=np.float32)
    border = np.concatenate([img[0], img[-1], img[:, 0], img[:, -1]])
    bg = np.median(border, axis=0)
    return np.sqrt(((img - bg) ** 2).sum(-1)) > INK_DIST


@dataclass(frozen=True)
class WordSlot:
    index: int
    text: str
    x: int          # left edge of the first cell
    n_chars: int
    advance: int
    ink_left: int
    ink_right: int


@dataclass
class DecodedLayout:
    text: str
    font_id: int | None = None
    x0: int = 0
    band_top: int = 0
    cells: list = field(default_factory=list)
    words: list = field(default_factory=list)
    cost: float = 0.0


def _word_slots(text, font_id, x0):
    font = get_font(font_id)
    slots, pos = [], 0
    for wi, w in enumerate(text.split()):
        start = text.index(w, pos)
        pos = start + len(w)
        x = x0 + start * font.advance
        slots.append(WordSlot(wi, w, x, len(w), font.advance, x + font.offset,
                              x + (len(w) - 1) * font.advance + font.offset + 4))
    return slots


def layout_for(text, font_id, width, height):
    """Expected layout of ``text`` rendered centred in ``font_id`` (known geometry)."""
    adv = get_font(font_id).advance
    x0 = (width - len(text) * adv) // 2
    return DecodedLayout(text, font_id, x0, band_top(height), [], _word_slots(text, font_id, x0))


def _cells(band, x0, n, adv):
    """(n, CELL_ROWS * adv) cell windows of a zero-padded band mask (pad = band width)."""
    w = band.shape[1] // 3
    block = band[:, w + x0:w + x0 + n * adv]
    return block.reshape(CELL_ROWS, n, adv).transpose(1, 0, 2).reshape(n, -1)


def _classify(cells, tpl: FontTemplates):
    """Best template per cell; returns (labels, distances, rejected flags)."""
    ink_c = cells.sum(1)
    d = ink_c[:, None] + tpl.ink[None, :] - 2.0 * cells @ tpl.bits.T
    best = np.argmin(d, axis=1)
    dist = d[np.arange(len(best)), best]
    limit = REJECT_FRAC * np.maximum(ink_c, tpl.ink[best]) + REJECT_SLACK
    return best, dist, dist > limit


def decode_layout(image, atlas: GlyphAtlas | None = None, fonts=None, mask=None) -> DecodedLayout:
    atlas = atlas or default_atlas()
    mask = binarize(image) if mask is None else mask
    h, w = mask.shape
    top = band_top(h)
    if not mask.any():
        return DecodedLayout("", band_top=top)
    band = np.zeros_like(mask)
    band[max(top - 2, 0):top + BAND_H + 2] = True
    if mask[~band].sum() > OFF_BAND_FRAC * (~band).sum():
        return DecodedLayout("", band_top=top)
    cols = np.flatnonzero(mask[top:top + CELL_ROWS].any(0))
    if cols.size == 0:
        return DecodedLayout("", band_top=top)
    left, right = cols[0], cols[-1]
    band_ink = np.zeros((CELL_ROWS, 3 * w), dtype=np.float32)
    part = mask[top:top + CELL_ROWS]
    band_ink[:part.shape[0], w:2 * w] = part
    total_ink = band_ink.sum()
    best = None
    for f in (fonts if fonts is not None else range(len(FONTS))):
        adv = get_font(f).advance
        tpl = atlas.templates(f)
        for n in range(1, (w - 4) // adv + 1):
            base = (w - n * adv) // 2
            for dx in X_JITTER:
                x0 = base + dx
                # the first and last cells must both touch ink
                if not (left - adv < x0 <= left and right - adv < x0 + (n - 1) * adv <= right):
                    continue
                cells = _cells(band_ink, x0, n, adv)
                lab, dist, rej = _classify(cells, tpl)
                # ink left outside the cells counts fully against the candidate
                outside = total_ink - cells.sum()
                cost = float(dist.sum() + outside)
                key = (cost, abs(dx), n, f)
                if best is None or key < best[0]:
                    best = (key, f, x0, n, lab, rej)
    if best is None:
        return DecodedLayout("", band_top=top)
    (cost, _, _, _), f, x0, n, lab, rej = best
    tpl = atlas.templates(f)
    chars = ["?" if r else tpl.chars[i] for i, r in zip(lab, rej)]
    if all(r or tpl.chars[i] == " " for i, r in zip(lab, rej)):
        return DecodedLayout("", band_top=top)
    raw = "".join(chars)
    lead = len(raw) - len(raw.lstrip(" "))
    text = raw.strip(" ")
    adv = get_font(f).advance
    x_text = x0 + lead * adv
    return DecodedLayout(text, f, x_text, top, chars[lead:lead + len(text)],
                         _word_slots(text, f, x_text), cost)


def ocr_decode(image, atlas: GlyphAtlas | None = None) -> str:
    return decode_layout(image, atlas).text


# -- attribute detectors ------------------------------------------------------------

def _centroids(region):
    cnt = region.sum(1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return (region @ np.arange(region.shape[1], dtype=np.float64)) / cnt


def _lean(region, ref):
    """Least-squares slope of the per-row centroid offset against ``ref``.

    Columns per row, positive when upper rows sit further right than in the
    upright reference rendering of the same word.
    """
    d = _centroids(region) - _centroids(ref)
    rows = -np.arange(len(d), dtype=np.float64)
    ok = ~np.isnan(d)
    if ok.sum() < 2:
        return 0.0
    rc = rows[ok] - rows[ok].mean()
    return float((rc * (d[ok] - d[ok].mean())).sum() / (rc ** 2).sum())


def _word_region(mask, top, slot: WordSlot, rows):
    w = mask.shape[1]
    a, b = slot.x, slot.x + slot.n_chars * slot.advance
    out = np.zeros((rows, b - a), dtype=bool)
    lo, hi = max(a, 0), min(b, w)
    part = mask[top:top + rows, lo:hi]
    out[:part.shape[0], lo - a:hi - a] = part
    return out


def word_measures(mask, top, slot: WordSlot, font_id, atlas: GlyphAtlas | None = None):
    """Raw quantities behind the three detectors for one word slot."""
    atlas = atlas or default_atlas()
    region = _word_region(mask, top, slot, CELL_ROWS)
    known = [i for i, c in enumerate(slot.text) if c != "?"]
    adv = slot.advance
    ink = sum(int(region[:, i * adv:(i + 1) * adv].sum()) for i in known)
    ref_ink = sum(atlas.plain_ink(font_id, slot.text[i]) for i in known)
    word = slot.text.replace("?", " ")
    bold = bool(ref_ink) and ink >= BOLD_RATIO * ref_ink
    # attributes never combine, so a bold word is compared with the bold reference
    ref = atlas.word_strip(word, font_id, Attribute.BOLD if bold else None)[:CELL_ROWS, PAD:-PAD]
    slope = _lean(region, ref)
    # bold fills the row just under the baseline, so the scan starts one row lower
    low = _word_region(mask, top, slot, BAND_H + 2)[BASELINE + 2:BASELINE + 5]
    a, b = slot.ink_left - slot.x, slot.ink_right - slot.x + 1
    cover = float(low[:, a:b].mean(1).max()) if b > a else 0.0
    return {"ink": ink, "ref_ink": ref_ink, "bold": bold, "slope": slope, "underline_cover": cover}


def detect_attributes(image, layout: DecodedLayout, atlas: GlyphAtlas | None = None, mask=None):
    """Per-word attribute sets, keyed by word index of ``layout``."""
    mask = binarize(image) if mask is None else mask
    out = {}
    for slot in layout.words:
        m = word_measures(mask, layout.band_top, slot, layout.font_id, atlas)
        found = set()
        if m["bold"]:
            found.add(Attribute.BOLD)
        if m["slope"] > ITALIC_SLOPE:
            found.add(Attribute.ITALIC)
        if m["underline_cover"] >= UNDERLINE_COVER:
            found.add(Attribute.UNDERLINE)
        out[slot.index] = found
    return out


# -- metrics ----------------------------------------------------------------------------

def truth_attrs(truth):
    return {i: Attribute(a) for i, a in enumerate(truth["attributes"]) if a}


def score_sample(image, truth, atlas: GlyphAtlas | None = None):
    """OCR and attribute record for one image against its truth annotation.

    Attribute detection reads word slots from the truth geometry, so a
    misspelt word can still be judged on its typography.
    """
    atlas = atlas or default_atlas()
    img = np.asarray(image)
    words = truth["words"]
    mask = binarize(img)
    decoded = decode_layout(img, atlas, mask=mask)
    lay = layout_for(" ".join(words), truth["font_id"], img.shape[1], img.shape[0])
    found = detect_attributes(img, lay, atlas, mask=mask)
    want = truth_attrs(truth)
    ocr_ok = decoded.text.split() == list(words)
    correct = {}
    for i, a in want.items():
        elsewhere = any(a in found[j] and want.get(j) is not a for j in found if j != i)
        correct[i] = found[i] == {a} and not elsewhere
    spurious = sum(1 for j, s in found.items() if j not in want and s)
    return {
        "decoded": decoded.text,
        "detected": {str(k): sorted(a.value for a in v) for k, v in found.items()},
        "ocr_ok": ocr_ok,
        "word_ok": {str(k): v for k, v in correct.items()},
        "clean": not any(found.values()),
        "spurious": spurious,
    }


def word_acc(images, truths, atlas: GlyphAtlas | None = None):
    """Fraction of annotated words whose attribute is found there and nowhere else."""
    hits = total = 0
    for img, t in zip(images, truths):
        rec = score_sample(img, t, atlas)
        hits += sum(rec["word_ok"].values())
        total += len(rec["word_ok"])
    return hits / total if total else 0.0


def ocr_acc(images, truths, atlas: GlyphAtlas | None = None):
    """Word-level OCR accuracy: fraction of images whose decoded words all match."""
    ok = [ocr_decode(img, atlas).split() == list(t["words"]) for img, t in zip(images, truths)]
    return float(np.mean(ok)) if ok else 0.0


def style_score(generated, reference, encoder):
    """Cosine distance between pooled style features; lower means closer style."""
    a = encoder.pooled(generated).astype(np.float64)
    b = encoder.pooled(reference).astype(np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0
    return float(max(0.0, 1.0 - a @ b / (na * nb)))


@dataclass
class EvalReport:
    ocr_acc: float
    word_acc: float
    style_score: float | None
    records: list

    def to_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)


def evaluate(images, truths, prompts=None, atlas: GlyphAtlas | None = None,
             style_refs=None, encoder=None) -> EvalReport:
    atlas = atlas or default_atlas()
    records, hits, total = [], 0, 0
    styles = []
    for k, (img, t) in enumerate(zip(images, truths)):
        rec = score_sample(img, t, atlas)
        rec["truth"] = t
        rec["prompt"] = prompts[k] if prompts else None
        if style_refs is not None and encoder is not None:
            rec["style_score"] = style_score(img, style_refs[k], encoder)
            styles.append(rec["style_score"])
        hits += sum(rec["word_ok"].values())
        total += len(rec["word_ok"])
        records.append(rec)
    ocr = float(np.mean([r["ocr_ok"] for r in records])) if records else 0.0
    return EvalReport(ocr, hits / total if total else 0.0,
                      float(np.mean(styles)) if styles else None, records)


def glyph_collisions(font_id, atlas: GlyphAtlas | None = None):
    """Character pairs that OCR cannot tell apart in ``font_id``.

    A pair ``(ch, other, attr)`` means the cell of ``ch`` with ``attr`` in this font is
    pixel-identical to the cell of a different character in some font with the same
    advance (any attribute), so a lone glyph may legitimately decode as ``other``.
    """
    atlas = atlas or default_atlas()
    adv = get_font(font_id).advance
    seen = {}
    for f in FONTS:
        if f.advance != adv:
            continue
        tpl = atlas.templates(f.font_id)
        for ch, row in zip(tpl.chars, tpl.bits):
            seen.setdefault(row.tobytes(), set()).add(ch)
    tpl = atlas.templates(font_id)
    pairs = []
    for ch, attr, row in zip(tpl.chars, tpl.attrs, tpl.bits):
        for other in sorted(seen[row.tobytes()] - {ch}):
            pairs.append((ch, other, attr))
    return pairs


__all__ = [
    "GlyphAtlas", "DecodedLayout", "EvalReport", "binarize", "decode_layout", "detect_attributes",
    "evaluate", "glyph_collisions", "layout_for", "ocr_acc", "ocr_decode", "score_sample",
    "style_score", "word_acc",
]
