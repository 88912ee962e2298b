"""Character vocabulary with enclosing typography-control tokens.

A prompt such as ``"he <u*>came<\\u*> home <font:2>"`` becomes BOS, one id
per character or tag, EOS. Tags wrap exactly one whitespace-delimited word
and never nest; a font tag applies to the whole prompt.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, replace
from pathlib import Path

PAD, UNK, BOS, EOS = "<PAD>", "<UNK>", "<BOS>", "<EOS>"
SPECIALS = (PAD, UNK, BOS, EOS)
PRINTABLE = tuple(chr(c) for c in range(32, 127))
N_FONTS = 5


class Attribute(enum.Enum):
    BOLD = "b"
    ITALIC = "i"
    UNDERLINE = "u"

    @property
    def opener(self):
        return f"<{self.value}*>"

    @property
    def closer(self):
        return f"<\\{self.value}*>"


CONTROL_SYMBOLS = tuple(s for a in Attribute for s in (a.opener, a.closer))
FONT_SYMBOLS = tuple(f"<font:{k}>" for k in range(N_FONTS))
UNKNOWN_CHAR = "�"

_TAG_RE = re.compile(r"<(\\?)([a-z])\*>|<font:([^>]*)>")


class GrammarError(ValueError):
    """Malformed typography markup; ``offset`` is a UTF-8 byte offset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class ControlSpan:
    attribute: Attribute
    word_index: int
    char_range: tuple  # (start, stop) token positions of the enclosed word


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple
    spans: tuple = ()
    font_id: int | None = None
    stripped_text: str = ""

    def __len__(self):
        return len(self.ids)

    def attribute_of(self, word_index):
        for s in self.spans:
            if s.word_index == word_index:
                return s.attribute
        return None


class Vocabulary:
    """Immutable symbol table; control and font symbols take the top ids."""

    def __init__(self):
        self.symbols = SPECIALS + PRINTABLE + CONTROL_SYMBOLS + FONT_SYMBOLS
        self._ids = {s: i for i, s in enumerate(self.symbols)}
        if len(self._ids) != len(self.symbols):
            raise AssertionError("vocabulary symbols must be unique")
        self.pad, self.unk, self.bos, self.eos = (self._ids[s] for s in SPECIALS)
        self.n_base = len(SPECIALS) + len(PRINTABLE)
        self.control_ids = tuple(range(self.n_base, len(self.symbols)))

    def __len__(self):
        return len(self.symbols)

    def id_of(self, symbol):
        return self._ids.get(symbol, self.unk)

    def symbol(self, i):
        if not 0 <= i < len(self.symbols):
            raise KeyError(f"unknown token id {i}")
        return self.symbols[i]

    def is_control(self, i):
        return i >= self.n_base

    def opener_id(self, attr):
        return self._ids[attr.opener]

    def closer_id(self, attr):
        return self._ids[attr.closer]

    def font_token(self, k):
        return self._ids[FONT_SYMBOLS[k]]

    def write_manifest(self, path):
        """One symbol per line; the 0-based line index is the token id.

        Space is written as ``<SP>`` so every line is visible.
        """
        lines = ["<SP>" if s == " " else s for s in self.symbols]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @staticmethod
    def read_manifest(path):
        lines = Path(path).read_text(encoding="utf-8").split("\n")[:-1]
        return [" " if s == "<SP>" else s for s in lines]


VOCAB = Vocabulary()


def _byte_offset(text, char_pos):
    return len(text[:char_pos].encode("utf-8"))


def parse_prompt(text: str, vocab: Vocabulary = VOCAB) -> TokenSequence:
    ids = [vocab.bos]
    stripped = []
    spans = []
    font_id = None
    open_tag = None  # (attr, char offset, token position, stripped length)
    pos = 0

    def word_index_at(n_chars):
        before = "".join(stripped)[:n_chars]
        return len(before.split())

    while pos < len(text):
        m = _TAG_RE.match(text, pos)
        if m is None:
            ch = text[pos]
            ids.append(vocab.id_of(ch))
            stripped.append(ch if ch in vocab._ids else UNKNOWN_CHAR)
            pos += 1
            continue
        here = _byte_offset(text, pos)
        if m.group(3) is not None:
            k = m.group(3)
            if len(k) != 1 or k not in "01234":
                raise GrammarError(f"font tag {m.group(0)!r} outside 0..{N_FONTS - 1}", here)
            font_id = int(k)
            ids.append(vocab.font_token(font_id))
            pos = m.end()
            continue
        closing, letter = m.group(1) == "\\", m.group(2)
        try:
            attr = Attribute(letter)
        except ValueError:
            raise GrammarError(f"unknown tag {m.group(0)!r}", here) from None
        if not closing:
            if open_tag is not None:
                raise GrammarError(f"nested tag {m.group(0)!r} inside {open_tag[0].opener!r}", here)
            so_far = "".join(stripped)
            if so_far and not so_far[-1].isspace():
                raise GrammarError(f"{m.group(0)!r} opens in the middle of a word", here)
            open_tag = (attr, pos, len(ids), len(stripped))
            ids.append(vocab.opener_id(attr))
        else:
            if open_tag is None:
                raise GrammarError(f"closer {m.group(0)!r} without opener", here)
            o_attr, o_pos, o_tok, o_len = open_tag
            if o_attr is not attr:
                raise GrammarError(f"{m.group(0)!r} closes {o_attr.opener!r}", here)
            word = "".join(stripped[o_len:])
            if not word or any(c.isspace() for c in word):
                n = len(word.split())
                raise GrammarError(f"tag must enclose exactly one word, found {n}",
                                   _byte_offset(text, o_pos))
            nxt = _TAG_RE.sub("", text[m.end():])[:1]
            if nxt and not nxt.isspace():
                raise GrammarError(f"{m.group(0)!r} closes in the middle of a word", here)
            spans.append(ControlSpan(attr, word_index_at(o_len), (o_tok + 1, len(ids))))
            ids.append(vocab.closer_id(attr))
            open_tag = None
        pos = m.end()
    if open_tag is not None:
        raise GrammarError(f"unclosed {open_tag[0].opener!r}", _byte_offset(text, open_tag[1]))
    ids.append(vocab.eos)
    return TokenSequence(tuple(ids), tuple(spans), font_id, "".join(stripped))


def decode(ids, vocab: Vocabulary = VOCAB) -> str:
    out = []
    for i in ids:
        s = vocab.symbol(int(i))
        if s in (PAD, BOS, EOS):
            continue
        out.append(UNKNOWN_CHAR if s == UNK else s)
    return "".join(out)


def with_prefix(seq: TokenSequence, prefix: str, vocab: Vocabulary = VOCAB) -> TokenSequence:
    """Insert ``prefix`` plus a separating space right after BOS."""
    if not prefix:
        return seq
    if _TAG_RE.search(prefix):
        raise ValueError("prefix must not contain markup")
    head = tuple(vocab.id_of(c) for c in prefix + " ")
    shift_tok = len(head)
    shift_words = len(prefix.split())
    spans = tuple(
        replace(s, word_index=s.word_index + shift_words,
                char_range=(s.char_range[0] + shift_tok, s.char_range[1] + shift_tok))
        for s in seq.spans
    )
    ids = seq.ids[:1] + head + seq.ids[1:]
    return TokenSequence(ids, spans, seq.font_id, prefix + " " + seq.stripped_text)


def strip_controls(seq: TokenSequence, vocab: Vocabulary = VOCAB) -> tuple:
    return tuple(i for i in seq.ids if not vocab.is_control(i))


def markup(words, attrs=None, font_id=None) -> str:
    """Build a prompt from words, an optional {word_index: Attribute} map and font."""
    attrs = attrs or {}
    parts = []
    for i, w in enumerate(words):
        a = attrs.get(i)
        parts.append(f"{a.opener}{w}{a.closer}" if a else w)
    text = " ".join(parts)
    if font_id is not None:
        text = FONT_SYMBOLS[font_id] + text
    return text
