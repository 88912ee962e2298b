"""Stroke glyphs and the five synthetic font variants.

Glyph skeletons are polylines on a 5-wide grid: x in 0..4, y measured up
from the baseline (cap height 6, x-height 4, descenders to -2). A font maps
the skeleton into a 10-row text band and applies its own stroke weight,
x-height, serif stubs, advance and corner rounding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

BAND_H = 10
BASELINE = int(0.75 * BAND_H)  # row 7 of the band
UNDERLINE_ROWS = (BASELINE + 2, BASELINE + 3)
SHEAR = 0.25

# "x,y x,y ...; x,y ..." -- polylines separated by ';'
_SKELETONS = {
    "A": "0,0 0,4 2,6 4,4 4,0; 0,3 4,3",
    "B": "0,0 0,6 3,6 4,5 4,4 3,3 0,3; 3,3 4,2 4,1 3,0 0,0",
    "C": "4,5 3,6 1,6 0,5 0,1 1,0 3,0 4,1",
    "D": "0,0 0,6 3,6 4,5 4,1 3,0 0,0",
    "E": "4,6 0,6 0,0 4,0; 0,3 3,3",
    "F": "4,6 0,6 0,0; 0,3 3,3",
    "G": "4,5 3,6 1,6 0,5 0,1 1,0 4,0 4,3 2,3",
    "H": "0,0 0,6; 4,0 4,6; 0,3 4,3",
    "I": "1,6 3,6; 2,6 2,0; 1,0 3,0",
    "J": "2,6 4,6; 3,6 3,1 2,0 1,0 0,1",
    "K": "0,0 0,6; 4,6 1,3 0,3; 1,3 4,0",
    "L": "0,6 0,0 4,0",
    "M": "0,0 0,6 2,4 4,6 4,0",
    "N": "0,0 0,6 4,0 4,6",
    "O": "1,0 0,1 0,5 1,6 3,6 4,5 4,1 3,0 1,0",
    "P": "0,0 0,6 3,6 4,5 4,4 3,3 0,3",
    "Q": "1,0 0,1 0,5 1,6 3,6 4,5 4,1 3,0 1,0; 2,2 4,0",
    "R": "0,0 0,6 3,6 4,5 4,4 3,3 0,3; 2,3 4,0",
    "S": "4,5 3,6 1,6 0,5 0,4 1,3 3,3 4,2 4,1 3,0 1,0 0,1",
    "T": "0,6 4,6; 2,6 2,0",
    "U": "0,6 0,1 1,0 3,0 4,1 4,6",
    "V": "0,6 0,2 2,0 4,2 4,6",
    "W": "0,6 0,0 2,2 4,0 4,6",
    "X": "0,6 0,5 4,1 4,0; 4,6 4,5 0,1 0,0",
    "Y": "0,6 0,5 2,3 4,5 4,6; 2,3 2,0",
    "Z": "0,6 4,6 4,5 0,1 0,0 4,0",
    "a": "1,4 3,4 4,3 4,0; 4,2 1,2 0,1 1,0 4,0",
    "b": "0,6 0,0 3,0 4,1 4,3 3,4 0,4",
    "c": "4,4 1,4 0,3 0,1 1,0 4,0",
    "d": "4,6 4,0 1,0 0,1 0,3 1,4 4,4",
    "e": "0,2 4,2 4,3 3,4 1,4 0,3 0,1 1,0 4,0",
    "f": "4,6 2,6 1,5 1,0; 0,4 3,4",
    "g": "4,4 4,0 3,-1 1,-1; 4,4 1,4 0,3 0,2 1,1 4,1",
    "h": "0,6 0,0; 0,4 3,4 4,3 4,0",
    "i": "2,6 2,6; 1,4 2,4 2,0; 1,0 3,0",
    "j": "3,6 3,6; 2,4 3,4 3,0 2,-1 0,-1",
    "k": "0,6 0,0; 0,2 2,2; 2,2 4,4; 2,2 4,0",
    "l": "1,6 2,6 2,1 3,0",
    "m": "0,0 0,4 4,4 4,0; 2,4 2,0",
    "n": "0,0 0,4 3,4 4,3 4,0",
    "o": "1,0 0,1 0,3 1,4 3,4 4,3 4,1 3,0 1,0",
    "p": "0,-2 0,4 3,4 4,3 4,2 3,1 0,1",
    "q": "4,-2 4,4 1,4 0,3 0,2 1,1 4,1",
    "r": "0,0 0,4; 0,3 1,4 4,4",
    "s": "4,4 1,4 0,3 1,2 3,2 4,1 3,0 0,0",
    "t": "1,6 1,1 2,0 4,0; 0,4 3,4",
    "u": "0,4 0,1 1,0 3,0 4,1; 4,4 4,0",
    "v": "0,4 2,0 4,4",
    "w": "0,4 1,0 2,3 3,0 4,4",
    "x": "0,4 4,0; 0,0 4,4",
    "y": "0,4 0,2 1,1 4,1; 4,4 4,0 3,-1 1,-1",
    "z": "0,4 4,4 0,0 4,0",
    "0": "1,0 0,1 0,5 1,6 3,6 4,5 4,1 3,0 1,0; 1,1 3,5",
    "1": "1,5 2,6 2,0; 1,0 3,0",
    "2": "0,5 1,6 3,6 4,5 4,4 0,0 4,0",
    "3": "0,6 4,6 2,4 3,4 4,3 4,1 3,0 1,0 0,1",
    "4": "3,0 3,6 0,2 4,2",
    "5": "4,6 0,6 0,3 3,3 4,2 4,1 3,0 0,0",
    "6": "3,6 1,6 0,5 0,1 1,0 3,0 4,1 4,2 3,3 0,3",
    "7": "0,6 4,6 4,5 2,2 2,0",
    "8": "1,3 0,4 0,5 1,6 3,6 4,5 4,4 3,3 1,3 0,2 0,1 1,0 3,0 4,1 4,2 3,3",
    "9": "4,3 1,3 0,4 0,5 1,6 3,6 4,5 4,1 3,0 1,0",
    "!": "2,6 2,3; 2,0 2,0",
    '"': "1,6 1,5; 3,6 3,5",
    "#": "1,5 1,1; 3,5 3,1; 0,4 4,4; 0,2 4,2",
    "$": "4,5 1,5 0,4 1,3 3,3 4,2 3,1 0,1; 2,6 2,0",
    "%": "0,6 1,6 1,5 0,5 0,6; 4,6 0,0; 3,1 4,1 4,0 3,0 3,1",
    "&": "4,0 1,4 1,5 2,6 3,5 0,2 0,1 1,0 2,0 4,2",
    "'": "2,6 2,5",
    "(": "3,6 1,4 1,2 3,0",
    ")": "1,6 3,4 3,2 1,0",
    "*": "2,5 2,1; 0,4 4,2; 0,2 4,4",
    "+": "2,5 2,1; 0,3 4,3",
    ",": "2,1 2,0 1,-1",
    "-": "0,3 4,3",
    ".": "2,0 2,0",
    "/": "4,6 0,0",
    ":": "2,4 2,4; 2,1 2,1",
    ";": "2,4 2,4; 2,1 2,0 1,-1",
    "<": "4,5 1,3 4,1",
    "=": "0,4 4,4; 0,2 4,2",
    ">": "0,5 3,3 0,1",
    "?": "0,5 1,6 3,6 4,5 4,4 2,3 2,2; 2,0 2,0",
    "@": "3,2 3,4 1,4 1,2 4,2 4,5 3,6 1,6 0,5 0,1 1,0 4,0",
    "[": "3,6 1,6 1,0 3,0",
    "\\": "0,6 4,0",
    "]": "1,6 3,6 3,0 1,0",
    "^": "0,4 2,6 4,4",
    "_": "0,-1 4,-1",
    "`": "1,6 2,5",
    "{": "3,6 2,5 2,4 1,3 2,2 2,1 3,0",
    "|": "2,6 2,-1",
    "}": "1,6 2,5 2,4 3,3 2,2 2,1 1,0",
    "~": "0,3 1,4 3,2 4,3",
    " ": "",
}

CHARSET = "".join(chr(c) for c in range(32, 127))


def _parse(spec):
    lines = []
    for part in spec.split(";"):
        pts = [tuple(int(v) for v in p.split(",")) for p in part.split()]
        if pts:
            lines.append(pts)
    return lines


SKELETONS = {ch: _parse(s) for ch, s in _SKELETONS.items()}


@dataclass(frozen=True)
class SyntheticFont:
    font_id: int
    weight: int       # 2 adds a second ink row above every stroke pixel
    x_height: int     # skeleton x-height 4 maps to this many rows
    serif: bool
    advance: int      # cell pitch in pixels
    rounded: bool

    @property
    def offset(self):
        """Column of skeleton x=0 inside a cell."""
        return 2 if self.serif else 1

    def _row(self, y):
        if 0 < y <= 4:
            y = y * self.x_height / 4
        elif y > 4:
            y = self.x_height + (y - 4) * (6 - self.x_height) / 2
        return BASELINE - math.floor(y + 0.5)

    def _polyline_pixels(self, pts):
        if len(set(pts)) == 1 and pts[0][1] == 6:
            # a dot above the x-height keeps one clear row above the stem
            r = min(self._row(6), BASELINE - self.x_height - 2)
            return {(r, pts[0][0])}
        if self.rounded and len(pts) > 2:
            pts = _cut_corners(pts)
        pix = set()
        for (x0, y0), (x1, y1) in zip(pts, pts[1:] or pts):
            c0, r0 = x0, self._row(y0)
            c1, r1 = x1, self._row(y1)
            n = 2 * max(abs(c1 - c0), abs(r1 - r0)) + 1
            for k in range(n + 1):
                f = k / n
                pix.add((math.floor(r0 + (r1 - r0) * f + 0.5), math.floor(c0 + (c1 - c0) * f + 0.5)))
        return pix

    def _serifs(self, pts):
        stubs = set()
        tops = {6, 4, 0, -2}
        for end, nb in ((pts[0], pts[1] if len(pts) > 1 else None), (pts[-1], pts[-2] if len(pts) > 1 else None)):
            if nb is None or nb == end or nb[0] != end[0] or end[1] not in tops:
                continue
            r = self._row(end[1])
            stubs.update({(r, end[0] - 1), (r, end[0] + 1)})
        return stubs

    def glyph(self, ch):
        """Plain glyph as a (BAND_H, advance) boolean cell."""
        return _glyph_cell(self, ch).copy()


def _cut_corners(pts):
    out = [pts[0]]
    for prev, v, nxt in zip(pts, pts[1:], pts[2:]):
        d1 = (prev[0] - v[0], prev[1] - v[1])
        d2 = (nxt[0] - v[0], nxt[1] - v[1])
        axis_turn = (d1[0] == 0) != (d2[0] == 0) and (d1[1] == 0) != (d2[1] == 0)
        if axis_turn and max(map(abs, d1)) >= 2 and max(map(abs, d2)) >= 2:
            s1 = (int(math.copysign(1, d1[0])) if d1[0] else 0, int(math.copysign(1, d1[1])) if d1[1] else 0)
            s2 = (int(math.copysign(1, d2[0])) if d2[0] else 0, int(math.copysign(1, d2[1])) if d2[1] else 0)
            out.append((v[0] + s1[0], v[1] + s1[1]))
            out.append((v[0] + s2[0], v[1] + s2[1]))
        else:
            out.append(v)
    out.append(pts[-1])
    return out


@lru_cache(maxsize=None)
def _glyph_cell(font, ch):
    if ch not in SKELETONS:
        raise KeyError(f"character {ch!r} not in the synthetic charset")
    cell = np.zeros((BAND_H + 1, font.advance), dtype=bool)
    pix = set()
    for pts in SKELETONS[ch]:
        pix |= font._polyline_pixels(pts)
        if font.serif:
            pix |= font._serifs(pts)
    if font.weight == 2:
        pix |= {(r - 1, c) for r, c in pix}
    for r, c in pix:
        cc = c + font.offset
        if 0 <= r < BAND_H and 0 <= cc < font.advance:
            cell[r, cc] = True
    out = cell[:BAND_H]
    out.flags.writeable = False
    return out


FONTS = (
    SyntheticFont(0, weight=1, x_height=4, serif=False, advance=8, rounded=False),
    SyntheticFont(1, weight=1, x_height=4, serif=True, advance=10, rounded=False),
    SyntheticFont(2, weight=2, x_height=4, serif=False, advance=9, rounded=True),
    SyntheticFont(3, weight=1, x_height=5, serif=False, advance=8, rounded=True),
    SyntheticFont(4, weight=1, x_height=3, serif=True, advance=10, rounded=False),
)


def get_font(font_id):
    if not 0 <= font_id < len(FONTS):
        raise ValueError(f"font id {font_id} outside 0..{len(FONTS) - 1}")
    return FONTS[font_id]
