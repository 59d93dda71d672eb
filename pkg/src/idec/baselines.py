"""Comparison methods: greedy decoding, exact-match vote, USC, and SR."""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Sequence

from .backend import LmBackend
from .core import DecodeResult, ParseFailure, SamplingSpec, UsageError
from .id_decoder import decode_lockstep
from .sampler import SampledResponse
from .templating import TemplateSet, build_base, build_sr_input, build_usc_input

__all__ = [
    "METHODS",
    "MethodSpec",
    "UscSelection",
    "greedy_decode",
    "sc_vote",
    "parse_usc_selection",
    "usc_select",
    "sr_refine",
    "strip_sr_prefix",
]

METHODS = ("greedy", "sc_vote", "usc", "sr", "id")


@dataclass(frozen=True)
class MethodSpec:
    """One point on the method axis of an experiment."""

    method: str
    k: int = 1
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    template_id: str = "toy"

    def __post_init__(self) -> None:
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.method == "greedy":
            object.__setattr__(self, "k", 1)
        if self.k < 1:
            raise UsageError("k must be >= 1")


def greedy_decode(
    backend: LmBackend,
    question: str,
    template: TemplateSet,
    max_new_tokens: int,
) -> DecodeResult:
    """Argmax decoding of the plain task prompt."""
    return decode_lockstep(
        backend,
        [build_base(template, question, backend)],
        max_new_tokens=max_new_tokens,
    )


def sc_vote(
    responses: Sequence[SampledResponse | str],
    answer_parser: Callable[[str], str | None],
) -> str:
    """Plurality winner over parsed short answers.

    Unparseable responses are dropped; count ties resolve to the
    lexicographically smallest answer. Raises if nothing parses.
    """
    if not responses:
        raise UsageError("need at least one response")
    answers = []
    for r in responses:
        text = r.text if isinstance(r, SampledResponse) else r
        parsed = answer_parser(text)
        if parsed is not None:
            answers.append(parsed)
    if not answers:
        raise ParseFailure("no response yielded a parseable answer")
    counts = Counter(answers)
    best = max(counts.values())
    return min(a for a, c in counts.items() if c == best)


_INDEX_RE = re.compile(r"Response\s*(\d+)")


def parse_usc_selection(template: TemplateSet, text: str, k: int) -> tuple[int, bool]:
    """Extract the 1-based selected index from a selection generation.

    Looks right after the template's answer prefix first, then for a
    ``Response <n>`` mention anywhere. Anything missing or out of range
    falls back to response 1 with the fallback flag set.
    """
    match = None
    if template.answer_prefix:
        at = text.find(template.answer_prefix)
        if at >= 0:
            match = _INDEX_RE.match("Response " + text[at + len(template.answer_prefix) :].lstrip())
    if match is None:
        match = _INDEX_RE.search(text)
    if match is not None:
        index = int(match.group(1))
        if 1 <= index <= k:
            return index, False
    return 1, True


@dataclass(frozen=True)
class UscSelection:
    index: int  # 1-based, always in [1, k]
    text: str
    generation: str
    fallback: bool


def usc_select(
    backend: LmBackend,
    question: str,
    responses: Sequence[SampledResponse],
    template: TemplateSet,
    max_new_tokens: int,
) -> UscSelection:
    """Ask the model to pick the most consistent candidate; never aborts."""
    if not responses:
        raise UsageError("need at least one response")
    prompt = build_usc_input(template, question, responses, backend)
    result = decode_lockstep(backend, [prompt], max_new_tokens=max_new_tokens)
    index, fallback = parse_usc_selection(template, result.text, len(responses))
    return UscSelection(
        index=index,
        text=responses[index - 1].text,
        generation=result.text,
        fallback=fallback,
    )


def sr_refine(
    backend: LmBackend,
    question: str,
    responses: Sequence[SampledResponse],
    template: TemplateSet,
    max_new_tokens: int,
) -> DecodeResult:
    """Greedy regeneration from the reflect-and-extract composite prompt."""
    if not responses:
        raise UsageError("need at least one response")
    prompt = build_sr_input(template, question, responses, backend)
    return decode_lockstep(backend, [prompt], max_new_tokens=max_new_tokens)


def strip_sr_prefix(text: str, template: TemplateSet) -> str:
    prefix = template.sr_answer_prefix
    if prefix and text.startswith(prefix):
        return text[len(prefix) :]
    return text
