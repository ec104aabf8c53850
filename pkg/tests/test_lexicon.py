import numpy as np
import pytest

from vadfusion.lexicon import (
    LexiconParseError,
    load_lexicon,
    load_toy_lexicon,
    priors_for_tokens,
    strip_subword_marker,
)


def write_lex(tmp_path, text, name="lex.tsv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


class TestLoadLexicon:
    def test_range_header_rescaling(self, tmp_path):
        path = write_lex(tmp_path, "#range -1 1\nhappy\t0.8\t0.4\t0.2\n")
        lex = load_lexicon(path)
        assert lex.lookup("happy") == pytest.approx((0.9, 0.7, 0.6))
        assert lex.declared_range == (-1.0, 1.0)

    def test_default_range(self, tmp_path):
        path = write_lex(tmp_path, "calm\t0.7\t0.2\t0.5\n")
        assert load_lexicon(path).lookup("calm") == pytest.approx((0.7, 0.2, 0.5))

    def test_case_folding(self, tmp_path):
        path = write_lex(tmp_path, "Happy\t0.9\t0.7\t0.6\n")
        lex = load_lexicon(path)
        assert "HAPPY" in lex
        assert lex.lookup("hApPy") is not None

    def test_non_numeric_field_names_line(self, tmp_path):
        path = write_lex(tmp_path, "good\t0.8\t0.5\t0.5\nbad\tx\t0.5\t0.5\n")
        with pytest.raises(LexiconParseError, match=r":2:"):
            load_lexicon(path)

    def test_wrong_field_count_names_line(self, tmp_path):
        path = write_lex(tmp_path, "good\t0.8\t0.5\n")
        with pytest.raises(LexiconParseError, match=r":1:"):
            load_lexicon(path)

    def test_duplicate_last_wins(self, tmp_path):
        path = write_lex(tmp_path, "calm\t0.1\t0.1\t0.1\ncalm\t0.8\t0.2\t0.5\n")
        with pytest.warns(UserWarning, match="duplicate"):
            lex = load_lexicon(path)
        assert lex.lookup("calm") == pytest.approx((0.8, 0.2, 0.5))
        assert lex.n_duplicates == 1

    def test_empty_file_rejected(self, tmp_path):
        path = write_lex(tmp_path, "")
        with pytest.raises(LexiconParseError, match="no lexicon entries"):
            load_lexicon(path)

    def test_value_outside_declared_range(self, tmp_path):
        path = write_lex(tmp_path, "#range 0 1\nodd\t1.5\t0.5\t0.5\n")
        with pytest.raises(LexiconParseError, match="outside declared range"):
            load_lexicon(path)


class TestPriorsForTokens:
    @pytest.fixture()
    def lex(self, tmp_path):
        return load_lexicon(
            write_lex(tmp_path, "#range -1 1\nhappy\t0.8\t0.4\t0.2\nsad\t-0.8\t-0.4\t-0.5\n")
        )

    def test_empty_tokens(self, lex):
        seq = priors_for_tokens([], lex)
        assert len(seq) == 0
        assert seq.coverage == 0.0

    def test_all_oov_neutral(self, lex):
        seq = priors_for_tokens(["qqq", "zzz"], lex)
        assert np.allclose(seq.priors, 0.5)
        assert seq.coverage == 0.0

    def test_direct_lookup(self, lex):
        seq = priors_for_tokens(["happy"], lex)
        assert seq.priors[0] == pytest.approx((0.9, 0.7, 0.6))
        assert seq.coverage == 1.0

    def test_length_matches_tokens(self, lex):
        seq = priors_for_tokens(["happy", "x", "sad", "y"], lex)
        assert len(seq) == 4
        assert seq.coverage == 0.5

    def test_subword_marker_stripped(self, lex):
        seq = priors_for_tokens(["##happy", "▁sad"], lex)
        assert seq.priors[0] == pytest.approx((0.9, 0.7, 0.6))
        assert seq.priors[1] == pytest.approx((0.1, 0.3, 0.25))
        assert seq.coverage == 1.0

    def test_word_alignment_inheritance(self, lex):
        seq = priors_for_tokens(["hap", "py"], lex, words=["happy", "happy"])
        assert np.allclose(seq.priors[0], seq.priors[1])
        assert seq.priors[0] == pytest.approx((0.9, 0.7, 0.6))

    def test_word_alignment_length_mismatch(self, lex):
        with pytest.raises(ValueError, match="alignment length"):
            priors_for_tokens(["a", "b"], lex, words=["a"])

    def test_permutation_equivariance(self, lex):
        tokens = ["happy", "zzz", "sad"]
        seq = priors_for_tokens(tokens, lex)
        perm = [2, 0, 1]
        seq_p = priors_for_tokens([tokens[i] for i in perm], lex)
        assert np.allclose(seq_p.priors, seq.priors[perm])

    def test_components_in_unit_cube(self, lex):
        seq = priors_for_tokens(["happy", "sad", "qqq"], lex)
        assert np.all(seq.priors >= 0.0) and np.all(seq.priors <= 1.0)


class TestToyLexicon:
    def test_loads_and_is_big_enough(self):
        lex = load_toy_lexicon()
        assert len(lex) >= 200
        arr = np.array(list(lex.entries.values()))
        assert np.all(arr >= 0.0) and np.all(arr <= 1.0)
        # triples must spread over the cube, not collapse to the midpoint
        assert np.all(arr.std(axis=0) > 0.1)

    def test_known_word_present(self):
        lex = load_toy_lexicon()
        assert "happy" in lex and "sad" in lex and "table" in lex


def test_strip_subword_marker_passthrough():
    assert strip_subword_marker("plain") == "plain"
    assert strip_subword_marker("##") == "##"  # bare marker is left alone
