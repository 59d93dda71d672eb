"""The integrative decoding loop.

k wrapped inputs advance in lockstep: at every step each branch scores
its own prefix, the per-token log-probs are summed across branches in
ascending branch order, and the argmax token (lowest id on ties) is
forced into every branch. The loop stops when the aggregated argmax is
eos or at the length cap. A one-branch run over the plain prompt is
exactly greedy decoding, which the baselines reuse.

Every step is recorded in the trace with the chosen token's per-branch
log-probs and the top aggregated candidates, so an independent replay
can re-derive and verify the whole run from the branch inputs alone.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backend import LmBackend
from .core import (
    BackendError,
    DecodeConfig,
    DecodeResult,
    DecodeRunError,
    LogProbDist,
    StepRecord,
    TokenSeq,
    UsageError,
)
from .sampler import SampledResponse
from .templating import TemplateSet, build_id_input

__all__ = [
    "TOP_N_CANDIDATES",
    "Branch",
    "ReplayReport",
    "aggregate",
    "decode_lockstep",
    "id_decode",
    "replay_trace",
    "trace_objective",
    "trace_to_jsonl",
    "write_trace",
    "load_trace",
]

TOP_N_CANDIDATES = 8
REPLAY_TOL = 1e-9


@dataclass(frozen=True)
class Branch:
    """One voting input plus the shared forced suffix."""

    index: int
    input: TokenSeq
    suffix: TokenSeq = ()

    @property
    def prefix(self) -> TokenSeq:
        return self.input + self.suffix


def aggregate(
    dists: Sequence[LogProbDist] | Sequence[np.ndarray],
) -> tuple[np.ndarray, int]:
    """Sum log-prob arrays in ascending branch order; argmax ties -> lowest id."""
    if not dists:
        raise UsageError("aggregate needs at least one distribution")
    arrays = [d.values if isinstance(d, LogProbDist) else np.asarray(d) for d in dists]
    size = arrays[0].size
    for arr in arrays[1:]:
        if arr.size != size:
            raise UsageError(f"vocab size mismatch: {arr.size} != {size}")
    values = arrays[0].astype(np.float64).copy()
    for arr in arrays[1:]:
        values += arr
    return values, int(np.argmax(values))


def _top_candidates(values: np.ndarray, n: int) -> tuple[tuple[int, float], ...]:
    order = np.lexsort((np.arange(values.size), -values))[:n]
    return tuple((int(t), float(values[t])) for t in order)


def decode_lockstep(
    backend: LmBackend,
    branch_inputs: Sequence[TokenSeq],
    *,
    max_new_tokens: int,
    flags: Sequence[str] = (),
) -> DecodeResult:
    """Run the shared-suffix loop over already-built branch inputs."""
    if not branch_inputs:
        raise UsageError("need at least one branch input")
    if max_new_tokens < 1:
        raise UsageError("max_new_tokens must be >= 1")
    vocab = backend.info()
    inputs = tuple(tuple(q) for q in branch_inputs)
    suffix: list[int] = []
    trace: list[StepRecord] = []
    stop_reason = "max_len"
    for step in range(max_new_tokens):
        try:
            dists = [backend.next_logprobs(q + tuple(suffix)) for q in inputs]
        except BackendError as exc:
            raise DecodeRunError(f"backend failed at step {step}: {exc}", trace) from exc
        values, chosen = aggregate(dists)
        trace.append(
            StepRecord(
                step=step,
                branch_chosen_logprobs=tuple(float(d[chosen]) for d in dists),
                top_candidates=_top_candidates(values, TOP_N_CANDIDATES),
                chosen=chosen,
            )
        )
        suffix.append(chosen)
        if chosen == vocab.eos_id:
            stop_reason = "eos"
            break
    visible = suffix[:-1] if stop_reason == "eos" else suffix
    return DecodeResult(
        output=tuple(suffix),
        text=backend.detokenize(tuple(visible)),
        trace=tuple(trace),
        stop_reason=stop_reason,
        branch_inputs=inputs,
        flags=tuple(flags),
    )


def id_decode(
    backend: LmBackend,
    question: str,
    responses: Sequence[SampledResponse],
    template: TemplateSet,
    config: DecodeConfig,
) -> DecodeResult:
    """Integrative decode of one question against its sampled responses."""
    if len(responses) != config.k:
        raise UsageError(f"got {len(responses)} responses for k={config.k}")
    flags = []
    if any(not r.ended_with_eos for r in responses):
        # Length-truncated samples stay eligible but the run is marked.
        flags.append("response_without_eos")
    inputs = [build_id_input(template, question, r, backend) for r in responses]
    return decode_lockstep(
        backend, inputs, max_new_tokens=config.max_new_tokens, flags=flags
    )


# ---------------------------------------------------------------------------
# Replay and trace utilities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReplayReport:
    verified: bool
    first_divergence: int | None = None
    message: str = "verified"


def _close(a: float, b: float) -> bool:
    # Exact match first so -inf (masked tokens) compares cleanly.
    return a == b or abs(a - b) <= REPLAY_TOL


def replay_trace(result: DecodeResult, backend: LmBackend) -> ReplayReport:
    """Recompute every step from the branch inputs and compare to the trace.

    Divergence means a differing chosen token, a branch suffix that would
    not be shared, or any recorded value off by more than 1e-9.
    """
    suffix: tuple[int, ...] = ()
    for rec in result.trace:
        branches = [Branch(j, q, suffix) for j, q in enumerate(result.branch_inputs)]
        dists = [backend.next_logprobs(b.prefix) for b in branches]
        values, chosen = aggregate(dists)
        if chosen != rec.chosen:
            return ReplayReport(
                False, rec.step, f"step {rec.step}: chose {chosen}, trace has {rec.chosen}"
            )
        for j, d in enumerate(dists):
            if not _close(d[rec.chosen], rec.branch_chosen_logprobs[j]):
                return ReplayReport(
                    False, rec.step, f"step {rec.step}: branch {j} log-prob drifted"
                )
        for tid, val in rec.top_candidates:
            if not _close(float(values[tid]), val):
                return ReplayReport(
                    False, rec.step, f"step {rec.step}: aggregated value drifted at token {tid}"
                )
        suffix = suffix + (rec.chosen,)
    if suffix != result.output:
        return ReplayReport(False, len(result.trace), "trace does not reproduce output")
    return ReplayReport(True)


def trace_objective(result: DecodeResult) -> float:
    """Summed-over-branches objective of the decoded output.

    Grouped as fsum-per-branch then fsum-across-branches, matching
    ``backend.objective_value``, so a faithful trace reproduces the
    oracle value bit-for-bit.
    """
    per_branch = [
        math.fsum(rec.branch_chosen_logprobs[j] for rec in result.trace)
        for j in range(result.k)
    ]
    return math.fsum(per_branch)


def _wire_float(v: float) -> float | None:
    # Masked tokens carry -inf, which strict JSON cannot express.
    return None if v == -math.inf else v


def _unwire_float(v: float | None) -> float:
    return -math.inf if v is None else float(v)


def trace_to_jsonl(result: DecodeResult) -> str:
    lines = []
    for rec in result.trace:
        lines.append(
            json.dumps(
                {
                    "step": rec.step,
                    "chosen": rec.chosen,
                    "branch_chosen_logprobs": [
                        _wire_float(v) for v in rec.branch_chosen_logprobs
                    ],
                    "top": [[tid, _wire_float(val)] for tid, val in rec.top_candidates],
                },
                sort_keys=True,
            )
        )
    return "\n".join(lines) + "\n" if lines else ""


def write_trace(result: DecodeResult, path: str | Path) -> None:
    Path(path).write_text(trace_to_jsonl(result))


def load_trace(path: str | Path) -> list[StepRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        records.append(
            StepRecord(
                step=int(obj["step"]),
                branch_chosen_logprobs=tuple(
                    _unwire_float(x) for x in obj["branch_chosen_logprobs"]
                ),
                top_candidates=tuple((int(t), _unwire_float(v)) for t, v in obj["top"]),
                chosen=int(obj["chosen"]),
            )
        )
    return records
