import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from typoflow.eval import ocr_decode
from typoflow.glyphsynth import dataset as ds
from typoflow.glyphsynth.font import BASELINE, CHARSET, FONTS, get_font
from typoflow.glyphsynth.render import (
    LayoutError, RenderSpec, band_top, image_hash, layout, render, render_mask, spans_for,
)
from typoflow.tokenizer import Attribute, parse_prompt

TEXT = "the quick brown fox"


def spec(text=TEXT, attrs=None, font_id=0, **kw):
    return RenderSpec(text, spans_for(attrs or {}), font_id, **kw)


def word_columns(s, index):
    wb = layout(s).words[index]
    return wb.x, wb.x + wb.n_chars * wb.advance


def test_render_is_deterministic():
    a = render(spec(attrs={1: Attribute.BOLD}, font_id=3))
    b = render(spec(attrs={1: Attribute.BOLD}, font_id=3))
    assert a.dtype == np.float32 and a.shape == (64, 256, 3)
    assert a.tobytes() == b.tobytes()
    assert 0.0 <= a.min() and a.max() <= 1.0


def test_every_font_renders_every_glyph():
    for f in FONTS:
        for ch in CHARSET[1:]:
            assert f.glyph(ch).any(), (f.font_id, ch)
        assert not f.glyph(" ").any()


def test_fonts_differ_on_pangram():
    masks = [render_mask(spec(font_id=f.font_id)) for f in FONTS]
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            a, b = masks[i], masks[j]
            assert (a ^ b).sum() / (a | b).sum() >= 0.3, (i, j)


@pytest.mark.parametrize("font_id", range(5))
@pytest.mark.parametrize("attr", list(Attribute))
def test_attribute_locality_and_ink(font_id, attr):
    s_plain = spec(font_id=font_id)
    plain = render_mask(s_plain)
    for w in range(4):
        styled = render_mask(spec(attrs={w: attr}, font_id=font_id))
        lo, hi = word_columns(s_plain, w)
        cols = np.flatnonzero((plain ^ styled).any(0))
        assert cols.size
        assert cols.min() >= lo - 3 and cols.max() < hi + 3
        region = slice(max(lo - 3, 0), hi + 3)
        before, after = plain[:, region].sum(), styled[:, region].sum()
        wb = layout(s_plain).words[w]
        width = wb.ink_right - wb.ink_left + 1
        if attr is Attribute.BOLD:
            assert after > before
        elif attr is Attribute.ITALIC:
            assert abs(after - before) <= 0.1 * before
        else:
            assert 1.5 * width <= after - before <= 2.5 * width


def _underline_rows(mask, s, w):
    wb = layout(s).words[w]
    base = band_top(s.height) + BASELINE
    rows = mask[base + 1:base + 5, wb.ink_left:wb.ink_right + 1]
    return rows.mean(1).max() >= 0.8


@pytest.mark.parametrize("font_id", range(5))
def test_underline_row_oracle(font_id):
    s_plain = spec("jumpy gray quay", font_id=font_id)
    for w in range(3):
        assert not _underline_rows(render_mask(s_plain), s_plain, w)
        u = render_mask(spec("jumpy gray quay", {w: Attribute.UNDERLINE}, font_id))
        assert _underline_rows(u, s_plain, w)


def test_bold_keeps_other_words_identical():
    plain = render_mask(spec())
    bold = render_mask(spec(attrs={2: Attribute.BOLD}))
    lo, hi = word_columns(spec(), 2)
    keep = np.ones(plain.shape[1], dtype=bool)
    keep[lo - 3:hi + 3] = False
    assert np.array_equal(plain[:, keep], bold[:, keep])


def test_layout_error_reports_width():
    with pytest.raises(LayoutError) as err:
        render(spec("x" * 40, font_id=1))
    assert err.value.required == 40 * 10 + 4 and err.value.available == 256


def test_low_contrast_rejected():
    with pytest.raises(ValueError):
        render(spec(fg_color=(255, 255, 255), bg_color=(245, 240, 225)))


def test_palette_pairs_all_pass_contrast():
    pairs = ds.color_pairs()
    assert pairs and all(abs(ds._luma(f) - ds._luma(b)) >= 64 for f, b in pairs)


def test_build_variants_recipe():
    out = ds.build_variants("the cat sat on a mat", 2, [0, 1, 3, 4, 5])
    assert len(out) == 16
    assert sum(len(s.token_seq.spans) == 1 for s in out) == 15
    assert len(out[0].token_seq.spans) == 0
    assert len({s.token_seq.stripped_text for s in out}) == 1
    for s in out:
        assert s.truth["font_id"] == 2 and s.token_seq.font_id == 2
        got = {sp.word_index: sp.attribute.value for sp in s.token_seq.spans}
        want = {i: a for i, a in enumerate(s.truth["attributes"]) if a}
        assert got == want


def test_build_variants_errors():
    with pytest.raises(ValueError):
        ds.build_variants("too few words here", 0, [0, 1, 2, 3, 0])
    with pytest.raises(ValueError):
        ds.build_variants("a b c d e f", 0, [0, 1, 2, 3, 3])


def test_dataset_counts_scale():
    samples = ds.build_tc_dataset(n_excerpts=3, with_hash=False)
    assert len(samples) == 3 * 5 * 16
    # splitting the excerpt counter never changes earlier samples
    again = ds.build_tc_dataset(n_excerpts=2, with_hash=False)
    assert [s.prompt for s in again] == [s.prompt for s in samples[:len(again)]]


def test_excerpts_fit_widest_font():
    for i in range(200):
        text = ds.excerpt(i)
        assert len(text.split()) == 5
        assert len(text) * 10 + 4 <= 256


def test_btr_bench_shape_and_determinism():
    a = ds.build_btr_bench(100, seed=3)
    b = ds.build_btr_bench(100, seed=3)
    assert len(a) == 100 and a == b
    for p in a:
        seq = parse_prompt(p.prompt)
        assert len(seq.spans) == 3
        assert len({s.word_index for s in seq.spans}) == 3
        assert seq.font_id == p.font_id
    with pytest.raises(ValueError):
        ds.build_btr_bench(0)


def test_btr_bench_histogram_uniform():
    bench = ds.build_btr_bench(10_000, seed=0)
    counts = np.zeros((3, 5))
    attrs = list(Attribute)
    for p in bench:
        for pos, a in p.attributes.items():
            counts[attrs.index(a), pos] += 1
    n = counts.sum()
    expect = n / counts.size
    sigma = math.sqrt(n * (1 / counts.size) * (1 - 1 / counts.size))
    assert np.all(np.abs(counts - expect) <= 3 * sigma)
    chi2 = ((counts - expect) ** 2 / expect).sum()
    # 14 degrees of freedom: mean 14, sd ~5.3
    assert chi2 < 14 + 3 * math.sqrt(28)


def test_style_sets():
    general, artext = ds.build_style_sets(seed=0, n_general=64, n_artext=32)
    for s in general:
        assert s.image.shape == (64, 64, 3) and s.truth["text"] == ""
        assert ocr_decode(s.image) == ""
    readable = 0
    for s in artext:
        quoted = s.prompt.split('"')[1]
        assert s.truth["text"] == quoted
        readable += ocr_decode(s.image) == quoted
    # gradients can pass close to the background colour mid-word
    assert readable >= 0.9 * len(artext)
    styles = {s.truth["style"] for s in artext}
    assert styles == set(ds.ART_STYLES)


def test_style_set_default_sizes():
    general, artext = ds.build_style_sets(seed=1)
    assert (len(general), len(artext)) == (2048, 512)


def test_ppm_round_trip(tmp_path):
    img = render(spec(attrs={0: Attribute.ITALIC}, fg_color=(200, 30, 30), bg_color=(245, 240, 225)))
    path = tmp_path / "x.ppm"
    ds.write_ppm(path, img)
    assert path.read_bytes().startswith(b"P6\n256 64\n255\n")
    back = ds.read_ppm(path)
    assert back.tobytes() == img.tobytes()


def test_manifest_rerender_matches_hash(tmp_path):
    samples = ds.build_variants(ds.excerpt(4), 1, [0, 1, 2, 3, 4])
    manifest = ds.write_dataset(samples, tmp_path)
    recs = ds.read_manifest(manifest)
    assert len(recs) == 16
    for rec in recs:
        s = ds.sample_from_record(rec)
        assert s.image_hash == rec["hash"]
        stored = ds.read_ppm(tmp_path / rec["image"])
        assert image_hash(stored) == rec["hash"]
    assert json.loads(manifest.read_text().splitlines()[0])["font_id"] == 1


def test_crop_set_pairs():
    crops = ds.build_crop_set(64)
    assert len(crops) == 64
    for plain, styled in zip(crops[::2], crops[1::2]):
        assert plain.token_seq.stripped_text == styled.token_seq.stripped_text
        assert not plain.token_seq.spans and len(styled.token_seq.spans) == 1
        assert plain.image.shape == (64, 64, 3)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 4), st.lists(st.sampled_from(ds.WORDS[:60]), min_size=1, max_size=4),
       st.sampled_from(list(Attribute)))
def test_random_specs_attribute_bounded(font_id, words, attr):
    text = " ".join(words)
    if len(text) * get_font(font_id).advance + 4 > 256:
        return
    s = spec(text, font_id=font_id)
    plain = render_mask(s)
    styled = render_mask(spec(text, {0: attr}, font_id))
    lo, hi = word_columns(s, 0)
    cols = np.flatnonzero((plain ^ styled).any(0))
    assert cols.min() >= lo - 3 and cols.max() < hi + 3
