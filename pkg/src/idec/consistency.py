"""Self-consistency factuality scoring with a rule-based statement splitter.

A response is split into statements (sentences and bullet points); each
statement is scored against every sampled response with a lexical
support function; the full support matrix and both of its marginal means
make up the report. Marginals are computed in exact rational arithmetic
so the two averaging orders agree bit-for-bit.

The lexical support functions are a deliberate proxy for judge-based
consistency checks and every report says so.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from fractions import Fraction
from typing import Sequence

from .core import UsageError
from .sampler import SampledResponse

__all__ = [
    "Statement",
    "SupportSpec",
    "ConsistencyReport",
    "normalize_text",
    "split_statements",
    "support",
    "factuality_score",
    "assemble_report",
    "score_member",
]

SUPPORT_PROXY_NOTE = "lexical proxy for judged statement support"

_BULLET_RE = re.compile(r"^\s*(?:[-*•]|\d+[.)])\s+")
_SENTENCE_END_RE = re.compile(r"(?<=[.!?])\s+")


@dataclass(frozen=True)
class Statement:
    """One statement with its source span in the original response text."""

    text: str
    start: int
    end: int


def normalize_text(text: str) -> str:
    """Lowercase, collapse whitespace, drop terminal punctuation."""
    collapsed = " ".join(text.lower().split())
    return re.sub(r"[.!?]+$", "", collapsed)


def split_statements(text: str) -> list[Statement]:
    """Split on bullet markers and sentence terminators, line by line.

    A newline always ends a statement; bullet markers are stripped from
    the statement text but excluded from its span only on the left.
    Segments that normalize to nothing are dropped. Spans are
    non-overlapping and ordered.
    """
    statements: list[Statement] = []
    offset = 0
    for line in text.split("\n"):
        content_start = offset
        bullet = _BULLET_RE.match(line)
        body = line
        if bullet:
            content_start += bullet.end()
            body = line[bullet.end() :]
        pos = 0
        for piece in _SENTENCE_END_RE.split(body):
            raw_start = body.index(piece, pos) if piece else pos
            pos = raw_start + len(piece)
            stripped = piece.strip()
            if not stripped or not normalize_text(stripped):
                continue
            lead = len(piece) - len(piece.lstrip())
            start = content_start + raw_start + lead
            statements.append(Statement(stripped, start, start + len(stripped)))
        offset += len(line) + 1
    return statements


@dataclass(frozen=True)
class SupportSpec:
    """Pairwise support function: exact_norm or token_f1 with threshold tau."""

    kind: str = "token_f1"
    tau: float = 0.6

    def __post_init__(self) -> None:
        if self.kind not in ("exact_norm", "token_f1"):
            raise UsageError(f"unknown support function {self.kind!r}")
        if self.kind == "token_f1" and not 0 < self.tau <= 1:
            raise UsageError("token_f1 tau must be in (0, 1]")

    @classmethod
    def parse(cls, text: str) -> "SupportSpec":
        s = text.strip().lower()
        if s in ("exact", "exact_norm"):
            return cls("exact_norm")
        name, _, arg = s.partition(":")
        if name in ("f1", "token_f1"):
            return cls("token_f1", float(arg) if arg else 0.6)
        raise UsageError(f"cannot parse support spec {text!r}")

    def describe(self) -> str:
        if self.kind == "exact_norm":
            return "exact_norm"
        return f"token_f1(tau={self.tau:g})"


def _token_f1(a_tokens: list[str], b_tokens: list[str]) -> float:
    if not a_tokens or not b_tokens:
        return 0.0
    counts: dict[str, int] = {}
    for t in a_tokens:
        counts[t] = counts.get(t, 0) + 1
    overlap = 0
    for t in b_tokens:
        if counts.get(t, 0) > 0:
            counts[t] -= 1
            overlap += 1
    if overlap == 0:
        return 0.0
    precision = overlap / len(b_tokens)
    recall = overlap / len(a_tokens)
    return 2 * precision * recall / (precision + recall)


def support(statement: str, response: str, fn: SupportSpec) -> float:
    """P(consistent | statement, response) under the configured proxy."""
    stmt_norm = normalize_text(statement)
    if fn.kind == "exact_norm":
        return 1.0 if stmt_norm and stmt_norm in normalize_text(response) else 0.0
    stmt_tokens = stmt_norm.split()
    best = 0.0
    for cand in split_statements(response):
        best = max(best, _token_f1(stmt_tokens, normalize_text(cand.text).split()))
    return min(best / fn.tau, 1.0)


@dataclass(frozen=True)
class ConsistencyReport:
    """Support matrix plus its marginal means.

    ``overall`` is the grand mean; ``statement_scores[i]`` averages row i
    over responses; ``response_support[j]`` averages column j over
    statements. The three agree exactly by construction.
    """

    statements: tuple[Statement, ...]
    matrix: tuple[tuple[float, ...], ...]
    statement_scores: tuple[float, ...]
    response_support: tuple[float, ...]
    overall: float
    support_fn: str
    note: str = SUPPORT_PROXY_NOTE

    def to_json(self) -> str:
        return json.dumps(
            {
                "overall": self.overall,
                "statement_scores": list(self.statement_scores),
                "response_support": list(self.response_support),
                "matrix": [list(row) for row in self.matrix],
                "statements": [
                    {"text": s.text, "start": s.start, "end": s.end}
                    for s in self.statements
                ],
                "support_fn": self.support_fn,
                "note": self.note,
            },
            sort_keys=True,
        )


def assemble_report(
    statements: Sequence[Statement],
    matrix: Sequence[Sequence[float]],
    support_fn: str,
) -> ConsistencyReport:
    """Build a report from a precomputed support matrix.

    Marginals are exact: each mean is a Fraction over the float entries,
    converted to float once, so row-of-row means equal the grand mean.
    """
    n = len(matrix)
    if n == 0 or len(matrix[0]) == 0:
        raise UsageError("support matrix must be non-empty")
    k = len(matrix[0])
    for row in matrix:
        if len(row) != k:
            raise UsageError("support matrix rows must have equal length")
        for x in row:
            if not 0.0 <= x <= 1.0:
                raise UsageError(f"support value {x} outside [0, 1]")
    frac = [[Fraction(x) for x in row] for row in matrix]
    row_means = [sum(row) / k for row in frac]
    col_means = [sum(frac[i][j] for i in range(n)) / n for j in range(k)]
    grand = sum(sum(row) for row in frac) / (n * k)
    return ConsistencyReport(
        statements=tuple(statements),
        matrix=tuple(tuple(float(x) for x in row) for row in matrix),
        statement_scores=tuple(float(m) for m in row_means),
        response_support=tuple(float(m) for m in col_means),
        overall=float(grand),
        support_fn=support_fn,
    )


def factuality_score(
    response_text: str,
    responses: Sequence[SampledResponse | str],
    fn: SupportSpec | None = None,
) -> ConsistencyReport:
    """Score a response against the sample collection."""
    if not responses:
        raise UsageError("need at least one response to score against")
    fn = fn or SupportSpec()
    statements = split_statements(response_text)
    if not statements:
        raise UsageError("response splits into zero statements")
    texts = [r.text if isinstance(r, SampledResponse) else r for r in responses]
    matrix = [[support(s.text, t, fn) for t in texts] for s in statements]
    return assemble_report(statements, matrix, fn.describe())


def score_member(
    index: int,
    responses: Sequence[SampledResponse | str],
    fn: SupportSpec | None = None,
) -> ConsistencyReport:
    """Score one sampled response against the others (self excluded)."""
    if not 0 <= index < len(responses):
        raise UsageError(f"index {index} outside response list")
    if len(responses) < 2:
        raise UsageError("need at least two responses to exclude self")
    target = responses[index]
    rest = [r for i, r in enumerate(responses) if i != index]
    text = target.text if isinstance(target, SampledResponse) else target
    return factuality_score(text, rest, fn)
