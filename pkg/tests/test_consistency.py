from __future__ import annotations

import json
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from idec.consistency import (
    SupportSpec,
    assemble_report,
    factuality_score,
    normalize_text,
    score_member,
    split_statements,
    support,
)
from idec.core import UsageError

EXACT = SupportSpec("exact_norm")
F1 = SupportSpec("token_f1", 1.0)


class TestSplitter:
    def test_two_sentences(self):
        got = [s.text for s in split_statements("A is X. B is Y.")]
        assert got == ["A is X.", "B is Y."]

    def test_bullets(self):
        got = [s.text for s in split_statements("- p1\n- p2")]
        assert got == ["p1", "p2"]

    def test_golden_fixture(self, data_dir):
        text = (data_dir / "splitter_fixture.txt").read_text()
        want = json.loads((data_dir / "splitter_golden.json").read_text())
        assert [s.text for s in split_statements(text)] == want

    def test_spans_slice_back_to_text(self, data_dir):
        text = (data_dir / "splitter_fixture.txt").read_text()
        statements = split_statements(text)
        last_end = -1
        for s in statements:
            assert text[s.start : s.end] == s.text
            assert s.start > last_end  # ordered, non-overlapping
            last_end = s.end

    def test_empty_input(self):
        assert split_statements("") == []
        assert split_statements("  \n .. \n") == []


class TestSupport:
    def test_exact_substring(self):
        assert support("B is Y.", "a is x. b is y. c too", EXACT) == 1.0

    def test_exact_miss(self):
        assert support("B is Z.", "a is x. b is y.", EXACT) == 0.0

    def test_disjoint_vocab_f1_zero(self):
        assert support("alpha beta", "gamma delta. epsilon!", F1) == 0.0

    def test_worked_f1(self):
        # s = "a b c" vs best candidate "a b d": F1 = 2/3 at tau = 1
        got = support("a b c", "a b d", F1)
        assert got == pytest.approx(2 / 3, abs=1e-12)

    def test_tau_thresholding(self):
        spec = SupportSpec("token_f1", 0.5)
        assert support("a b c", "a b d", spec) == 1.0  # 2/3 >= tau

    def test_normalization_invariance(self):
        a = support("The Cat sat.", "the cat sat", EXACT)
        b = support("  the   CAT sat", "THE CAT SAT!", EXACT)
        assert a == b == 1.0

    def test_parse(self):
        assert SupportSpec.parse("exact").kind == "exact_norm"
        assert SupportSpec.parse("f1:0.4").tau == 0.4
        with pytest.raises(UsageError):
            SupportSpec.parse("cosine")


class TestFactualityScore:
    def test_self_support_is_one(self):
        text = "Paris is in France. Rome is in Italy."
        report = factuality_score(text, [text, text, text], EXACT)
        assert report.overall == 1.0

    def test_worked_2x2(self):
        # supports {1,0;0,0} -> F = 0.25, f(s1) = 0.5, f(s2) = 0
        response = "A is X. B is Y."
        r1 = "A is X. C is W."
        r2 = "D is V. E is U."
        report = factuality_score(response, [r1, r2], EXACT)
        assert report.matrix == ((1.0, 0.0), (0.0, 0.0))
        assert report.overall == 0.25
        assert report.statement_scores == (0.5, 0.0)
        assert report.response_support == (0.5, 0.0)

    def test_single_cell_degeneracy(self):
        report = factuality_score("A is X.", ["A is X."], EXACT)
        assert report.overall == report.matrix[0][0] == 1.0

    def test_zero_statements_rejected(self):
        with pytest.raises(UsageError):
            factuality_score("   ", ["whatever"], EXACT)

    def test_empty_responses_rejected(self):
        with pytest.raises(UsageError):
            factuality_score("A is X.", [], EXACT)

    def test_report_json_round_trip(self):
        report = factuality_score("A is X. B is Y.", ["A is X."], EXACT)
        obj = json.loads(report.to_json())
        assert obj["overall"] == report.overall
        assert obj["matrix"] == [[1.0], [0.0]]


class TestMarginalizationIdentity:
    @settings(max_examples=200)
    @given(st.integers(min_value=0, max_value=2**32))
    def test_exact_identity_on_fuzzed_matrices(self, seed):
        from idec.consistency import Statement
        from idec.core import make_rng

        rng = make_rng(seed, "matrix-fuzz")
        n, k = 1 + rng.randbelow(6), 1 + rng.randbelow(6)
        matrix = [[rng.uniform() for _ in range(k)] for _ in range(n)]
        stmts = [Statement(f"s{i}", 0, 1) for i in range(n)]
        report = assemble_report(stmts, matrix, "fuzz")
        # float matrix entries are exact rationals; both averaging orders
        # must land on the same rational, and the report's floats must be
        # projections of exactly that rational
        fracs = [[Fraction(x) for x in row] for row in report.matrix]
        row_means = [sum(r) / k for r in fracs]
        col_means = [sum(fracs[i][j] for i in range(n)) / n for j in range(k)]
        grand = sum(sum(r) for r in fracs) / (n * k)
        assert sum(row_means) / n == grand == sum(col_means) / k
        assert report.overall == float(grand)
        assert report.statement_scores == tuple(float(m) for m in row_means)
        assert report.response_support == tuple(float(m) for m in col_means)

    def test_monotone_in_matrix_entries(self):
        from idec.consistency import Statement

        stmts = [Statement("s", 0, 1)] * 2
        low = assemble_report(stmts, [[0.0, 1.0], [0.0, 0.0]], "x")
        high = assemble_report(stmts, [[1.0, 1.0], [0.0, 0.0]], "x")
        assert high.overall > low.overall

    def test_out_of_range_rejected(self):
        from idec.consistency import Statement

        with pytest.raises(UsageError):
            assemble_report([Statement("s", 0, 1)], [[1.5]], "x")


def test_score_member_excludes_self():
    texts = ["A is X.", "A is X.", "B is Y."]
    report = score_member(0, texts, EXACT)
    # scored against responses 1 and 2 only
    assert len(report.response_support) == 2
    assert report.matrix == ((1.0, 0.0),)


def test_normalize_text():
    assert normalize_text("  The   CAT  sat!! ") == "the cat sat"
