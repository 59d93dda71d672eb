"""Prompt construction for base, wrapped, and composite inputs.

A :class:`TemplateSet` is one JSON document holding five text templates:
``base`` (plain task prompt), ``id_wrap`` (the question-response-question
wrapping with its clarifying instruction), and ``usc_wrap``/``sr_wrap``
(composite prompts listing all candidates). Builders fill slots as text,
then tokenize through the target backend, so the same template drives
toy and remote vocabularies alike.

Toy sets bracket every segment with a reserved separator word, which
lets toy models locate the embedded response purely by counting
separator tokens and lets tests parse inputs back into segments.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

from .backend import LmBackend
from .core import TemplateError, TokenSeq
from .sampler import SampledResponse

__all__ = [
    "TemplateSet",
    "load_template",
    "list_templates",
    "build_base",
    "build_id_input",
    "build_usc_input",
    "build_sr_input",
    "fill_base_text",
    "fill_id_text",
    "fill_usc_text",
    "fill_sr_text",
    "number_responses",
    "parse_toy_id_input",
]

_SLOT_RE = re.compile(r"\{(question|response|responses)\}")


def _slots(text: str) -> list[str]:
    return _SLOT_RE.findall(text)


def _fill(text: str, mapping: dict[str, str]) -> str:
    # Single pass: inserted content is never rescanned for slots.
    def sub(match: re.Match) -> str:
        name = match.group(1)
        if name not in mapping:
            raise TemplateError(f"template has unexpected slot {{{name}}}")
        return mapping[name]

    return _SLOT_RE.sub(sub, text)


@dataclass(frozen=True)
class TemplateSet:
    """One named set of prompt templates plus its parse/format metadata.

    ``id_wrap`` must contain ``{question}`` twice around one
    ``{response}`` (the question-response-question layout). The single
    sanctioned exception is identity wrapping, where ``id_wrap`` equals
    ``base`` exactly; it exists so a one-branch decode can be checked
    against plain greedy decoding.
    """

    id: str
    base: str
    id_wrap: str
    usc_wrap: str
    sr_wrap: str
    answer_prefix: str = ""
    sr_answer_prefix: str = ""
    response_label: str = "numbered"  # "numbered" | "plain"
    separator_text: str | None = None

    def __post_init__(self) -> None:
        if _slots(self.base) != ["question"]:
            raise TemplateError(f"{self.id}: base must contain exactly one {{question}}")
        if not self.is_identity_wrap:
            if _slots(self.id_wrap) != ["question", "response", "question"]:
                raise TemplateError(
                    f"{self.id}: id_wrap must be question, response, question in order"
                )
        for name, text in (("usc_wrap", self.usc_wrap), ("sr_wrap", self.sr_wrap)):
            if sorted(_slots(text)) != ["question", "responses"]:
                raise TemplateError(
                    f"{self.id}: {name} must contain {{question}} and {{responses}} once each"
                )
        if self.response_label not in ("numbered", "plain"):
            raise TemplateError(f"{self.id}: unknown response_label {self.response_label!r}")

    @property
    def is_identity_wrap(self) -> bool:
        return self.id_wrap == self.base

    def separator_ids(self, backend: LmBackend) -> TokenSeq:
        if self.separator_text is None:
            return ()
        return backend.tokenize(self.separator_text)


def _template_dir():
    return resources.files("idec") / "templates"


def list_templates() -> list[str]:
    names = []
    for entry in _template_dir().iterdir():
        if entry.name.endswith(".json"):
            names.append(entry.name[: -len(".json")])
    return sorted(names)


def _from_json(doc: dict) -> TemplateSet:
    try:
        return TemplateSet(
            id=doc["id"],
            base=doc["base"],
            id_wrap=doc["id_wrap"],
            usc_wrap=doc["usc_wrap"],
            sr_wrap=doc["sr_wrap"],
            answer_prefix=doc.get("answer_prefix", ""),
            sr_answer_prefix=doc.get("sr_answer_prefix", ""),
            response_label=doc.get("response_label", "numbered"),
            separator_text=doc.get("separator_text"),
        )
    except KeyError as exc:
        raise TemplateError(f"template document missing field {exc}") from None


def load_template(name_or_path: str) -> TemplateSet:
    """Load a shipped template by id, or any JSON file by path."""
    candidate = _template_dir() / f"{name_or_path}.json"
    if candidate.is_file():
        return _from_json(json.loads(candidate.read_text()))
    path = Path(name_or_path)
    if path.is_file():
        return _from_json(json.loads(path.read_text()))
    raise TemplateError(
        f"unknown template {name_or_path!r}; shipped ids: {', '.join(list_templates())}"
    )


# ---------------------------------------------------------------------------
# Builders
# ---------------------------------------------------------------------------


def _require_question(question: str) -> str:
    if not question.strip():
        raise TemplateError("question slot is empty")
    return question


def _response_text(response: SampledResponse | str) -> str:
    text = response.text if isinstance(response, SampledResponse) else response
    if not text.strip():
        raise TemplateError("response slot is empty")
    return text


def number_responses(
    template: TemplateSet, responses: Sequence[SampledResponse | str]
) -> str:
    """Render the candidate list for {responses}, numbered in branch order."""
    if not responses:
        raise TemplateError("need at least one response")
    texts = [_response_text(r) for r in responses]
    if template.response_label == "plain":
        return " ".join(texts)
    return "\n".join(f"Response {i}: {t}" for i, t in enumerate(texts, start=1))


def fill_base_text(template: TemplateSet, question: str) -> str:
    return _fill(template.base, {"question": _require_question(question)})


def fill_id_text(
    template: TemplateSet, question: str, response: SampledResponse | str
) -> str:
    mapping = {"question": _require_question(question)}
    if not template.is_identity_wrap:
        mapping["response"] = _response_text(response)
    return _fill(template.id_wrap, mapping)


def fill_usc_text(
    template: TemplateSet, question: str, responses: Sequence[SampledResponse | str]
) -> str:
    return _fill(
        template.usc_wrap,
        {
            "question": _require_question(question),
            "responses": number_responses(template, responses),
        },
    )


def fill_sr_text(
    template: TemplateSet, question: str, responses: Sequence[SampledResponse | str]
) -> str:
    return _fill(
        template.sr_wrap,
        {
            "question": _require_question(question),
            "responses": number_responses(template, responses),
        },
    )


def build_base(template: TemplateSet, question: str, backend: LmBackend) -> TokenSeq:
    return backend.tokenize(fill_base_text(template, question))


def build_id_input(
    template: TemplateSet,
    question: str,
    response: SampledResponse | str,
    backend: LmBackend,
) -> TokenSeq:
    return backend.tokenize(fill_id_text(template, question, response))


def build_usc_input(
    template: TemplateSet,
    question: str,
    responses: Sequence[SampledResponse | str],
    backend: LmBackend,
) -> TokenSeq:
    return backend.tokenize(fill_usc_text(template, question, responses))


def build_sr_input(
    template: TemplateSet,
    question: str,
    responses: Sequence[SampledResponse | str],
    backend: LmBackend,
) -> TokenSeq:
    return backend.tokenize(fill_sr_text(template, question, responses))


def parse_toy_id_input(
    tokens: TokenSeq, sep_id: int
) -> tuple[TokenSeq, TokenSeq, TokenSeq]:
    """Recover (x, r, x) from a toy-layout input by separator count."""
    positions = [i for i, t in enumerate(tokens) if t == sep_id]
    if len(positions) != 4 or positions[0] != 0 or positions[-1] != len(tokens) - 1:
        raise TemplateError("token sequence is not a toy [SEP x SEP r SEP x SEP] layout")
    a, b, c, d = positions
    return tokens[a + 1 : b], tokens[b + 1 : c], tokens[c + 1 : d]
