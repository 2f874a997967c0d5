import pytest
from hypothesis import given, strategies as st

from clustertab.docmodel import Box, Page, Word
from clustertab.tokenizer import (
    Vocabulary,
    build_vocab,
    encode_page,
    load_vocab,
    normalize_word,
    quantize_coord,
    reading_order,
    save_vocab,
    sort_page,
)


class TestNormalize:
    def test_mixed_case_word(self):
        assert normalize_word("Table") == "Aaaaa"

    def test_number_with_punctuation(self):
        assert normalize_word("3.14") == "1,11"

    def test_empty(self):
        assert normalize_word("") == ""

    def test_accents_decompose_to_base_letters(self):
        assert normalize_word("Größe") == "Aaa,a"
        assert normalize_word("café") == "aaaa"

    def test_whitespace_removed(self):
        assert normalize_word("a b\tc") == "aaa"

    def test_non_ascii_becomes_comma(self):
        assert normalize_word("€100") == ",111"

    @given(st.text(max_size=30))
    def test_idempotent_and_closed_alphabet(self, s):
        once = normalize_word(s)
        assert set(once) <= {"a", "A", "1", ","}
        assert normalize_word(once) == once


class TestVocab:
    def test_most_common_win(self):
        corpus = ["Aaaaa"] * 3 + ["1,11"] * 2 + ["Aa"]
        v = build_vocab(corpus, max_size=2)
        assert v.token_to_id == {"Aaaaa": 0, "1,11": 1}
        assert v.unk_id == 2
        assert len(v) == 3

    def test_empty_corpus_unk_only(self):
        v = build_vocab([], max_size=10)
        assert v.token_to_id == {}
        assert v.unk_id == 0
        assert len(v) == 1

    def test_frequency_tie_breaks_lexicographically(self):
        v = build_vocab(["Aa", "A1", "A1", "Aa"], max_size=1)
        assert v.token_to_id == {"A1": 0}
        assert v.unk_id == 1

    def test_unk_fallback(self):
        v = build_vocab(["Aa"], max_size=5)
        assert v.lookup("zzz") == v.unk_id
        assert v.id_for_word("Hi") == v.lookup("Aa") == 0

    def test_file_roundtrip(self, tmp_path):
        v = build_vocab(["Aa", "Aa", "1,11"], max_size=10)
        path = tmp_path / "vocab.txt"
        save_vocab(path, v)
        lines = path.read_text().splitlines()
        assert lines[-1] == "<UNK>"
        v2 = load_vocab(path)
        assert v2 == v

    def test_load_rejects_missing_unk(self, tmp_path):
        path = tmp_path / "vocab.txt"
        path.write_text("Aa\n")
        with pytest.raises(ValueError):
            load_vocab(path)


class TestQuantize:
    def test_midpoint(self):
        assert quantize_coord(500, 1000) == 512

    def test_boundary_clamps(self):
        assert quantize_coord(1000, 1000) == 1023
        assert quantize_coord(-3, 1000) == 0

    def test_box_example(self):
        assert [
            quantize_coord(100, 1000),
            quantize_coord(200, 800),
            quantize_coord(300, 1000),
            quantize_coord(250, 800),
        ] == [102, 256, 307, 320]

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            quantize_coord(float("nan"), 100)
        with pytest.raises(ValueError):
            quantize_coord(1.0, 0.0)
        with pytest.raises(ValueError):
            quantize_coord(1.0, -5.0)

    @given(st.floats(0, 1000), st.floats(0, 1000))
    def test_monotone(self, a, b):
        lo, hi = sorted((a, b))
        assert quantize_coord(lo, 1000.0) <= quantize_coord(hi, 1000.0)

    @given(st.integers(0, 1000), st.integers(-3, 8))
    def test_scale_invariant(self, v, p):
        s = 2.0**p
        assert quantize_coord(v, 1000.0) == quantize_coord(v * s, 1000.0 * s)


class TestEncodePage:
    def test_single_word(self, tiny_vocab):
        page = Page(width=100.0, height=100.0, words=(Word("Hi", Box(0, 0, 10, 10)),))
        feats = encode_page(page, tiny_vocab)
        assert len(feats) == 1
        assert feats[0].as_tuple() == (tiny_vocab.lookup("Aa"), 0, 0, 102, 102)

    def test_empty_page(self, tiny_vocab):
        page = Page(width=100.0, height=100.0, words=())
        assert encode_page(page, tiny_vocab) == []

    def test_oov_maps_to_unk(self, tiny_vocab):
        page = Page(width=100.0, height=100.0, words=(Word("xyzzyx!", Box(0, 0, 9, 9)),))
        feats = encode_page(page, tiny_vocab)
        assert feats[0].word_id == tiny_vocab.unk_id

    def test_reading_order_y_buckets_then_x(self, tiny_vocab):
        words = (
            Word("a", Box(50, 40, 60, 48)),   # second line, right
            Word("a", Box(5, 41, 15, 49)),    # second line, left
            Word("a", Box(30, 0, 40, 8)),     # first line
        )
        page = Page(width=100.0, height=100.0, words=words)
        assert reading_order(page) == [2, 1, 0]
        assert [w.box.x0 for w in sort_page(page).words] == [30, 5, 50]

    def test_output_length_and_id_bounds(self, tiny_vocab):
        words = tuple(Word("Aaaa", Box(i, i, i + 5, i + 5)) for i in range(0, 80, 10))
        page = Page(width=100.0, height=100.0, words=words)
        feats = encode_page(page, tiny_vocab)
        assert len(feats) == page.n_words
        for f in feats:
            assert 0 <= f.word_id < len(tiny_vocab)
            assert 0 <= f.qx0 <= f.qx1 <= 1023
            assert 0 <= f.qy0 <= f.qy1 <= 1023
