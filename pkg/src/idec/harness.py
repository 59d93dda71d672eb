"""Synthetic fact-QA tasks, method evaluation, and k-sweep experiments.

A synthetic task is a bank of single-token-answer questions served by a
copy-biased toy model: the base answer-slot row puts 1-eps on the
correct token and eps/(m-1) on each wrong token, so single-sample
accuracy, greedy behavior, and the k-way voting curve all have exact
closed forms a test can enumerate.
"""

from __future__ import annotations

import json
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .backend import BackendError, LmBackend, ToyCopyLm, ToyTableLm
from .baselines import MethodSpec, greedy_decode, sc_vote, sr_refine, usc_select
from .consistency import SupportSpec, factuality_score
from .core import (
    DecodeConfig,
    ParseFailure,
    SamplingSpec,
    UsageError,
    Vocab,
    make_rng,
    stable_seed,
)
from .id_decoder import id_decode
from .sampler import sample_k
from .templating import TemplateSet, build_base, load_template

__all__ = [
    "SyntheticTaskSpec",
    "SyntheticTask",
    "QuestionOutcome",
    "MethodRun",
    "SweepCell",
    "SweepReport",
    "generate_task",
    "run_method",
    "k_sweep",
    "cells_to_jsonl",
    "render_table",
    "write_csv",
    "DEFAULT_K_GRID",
]

DEFAULT_K_GRID = (1, 4, 8, 12, 16)
ANSWER_BUDGET = 4  # answer token + eos, with headroom


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Parameters of one synthetic task instance."""

    n_questions: int = 100
    m: int = 4
    epsilon: float = 0.4
    beta: float = 0.95
    seed: int = 0

    def __post_init__(self) -> None:
        if self.m < 2:
            raise UsageError("answer vocab size m must be >= 2")
        if self.n_questions < 1:
            raise UsageError("need at least one question")
        if not 0 <= self.epsilon < 1:
            raise UsageError("epsilon must be in [0, 1)")
        if not 0 <= self.beta < 1:
            raise UsageError("beta must be in [0, 1)")

    @classmethod
    def from_json(cls, path: str | Path) -> "SyntheticTaskSpec":
        obj = json.loads(Path(path).read_text())
        return cls(
            n_questions=int(obj.get("n_questions", 100)),
            m=int(obj.get("m", 4)),
            epsilon=float(obj.get("epsilon", 0.4)),
            beta=float(obj.get("beta", 0.95)),
            seed=int(obj.get("seed", 0)),
        )


@dataclass(frozen=True)
class SyntheticTask:
    """Materialized question bank with per-question ground truth.

    ``majority_voting_helps`` records whether eps < 1 - 1/m, the regime
    where the correct token is also the base-row argmax; it is recorded,
    not enforced, because the complementary regime (argmax wrong, greedy
    systematically wrong) is exactly the confident-hallucination setting.
    """

    spec: SyntheticTaskSpec
    vocab: Vocab
    correct: tuple[int, ...]
    majority_voting_helps: bool

    def question_text(self, index: int) -> str:
        return f"q{index}"

    def answer_row(self, index: int) -> np.ndarray:
        row = np.zeros(self.vocab.size)
        wrong = self.spec.epsilon / (self.spec.m - 1)
        row[: self.spec.m] = wrong
        row[self.correct[index]] = 1.0 - self.spec.epsilon
        return row


def generate_task(spec: SyntheticTaskSpec) -> tuple[SyntheticTask, ToyCopyLm]:
    """Build the task and its copy-biased backend, deterministic from seed."""
    m, n = spec.m, spec.n_questions
    token_text = {i: f"a{i}" for i in range(m)}
    token_text.update({m + i: f"q{i}" for i in range(n)})
    eos_id, sep_id = m + n, m + n + 1
    token_text[eos_id] = "</s>"
    token_text[sep_id] = "<s>"
    vocab = Vocab(
        size=m + n + 2,
        eos_id=eos_id,
        token_text=token_text,
        sep_ids=(sep_id,),
    )
    rng = make_rng(spec.seed, "task-truth")
    correct = tuple(rng.randbelow(m) for _ in range(n))
    task = SyntheticTask(
        spec=spec,
        vocab=vocab,
        correct=correct,
        majority_voting_helps=spec.epsilon < 1.0 - 1.0 / m,
    )
    table: dict[tuple[int, ...], np.ndarray] = {}
    for i in range(n):
        table[(m + i, sep_id)] = task.answer_row(i)
    eos_row = np.zeros(vocab.size)
    eos_row[eos_id] = 1.0
    for a in range(m):
        table[(sep_id, a)] = eos_row
    base = ToyTableLm(vocab, order=3, table=table)
    return task, ToyCopyLm(base, spec.beta)


# ---------------------------------------------------------------------------
# Method evaluation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class QuestionOutcome:
    index: int
    answer_token: int | None
    correct: bool
    fscore: float | None = None
    flags: tuple[str, ...] = ()


@dataclass(frozen=True)
class MethodRun:
    spec: MethodSpec
    outcomes: tuple[QuestionOutcome, ...]
    accuracy: float
    fscore_mean: float | None
    partial: bool = False


def _first_answer_token(output: Sequence[int], m: int) -> int | None:
    if output and output[0] < m:
        return int(output[0])
    return None


def _eval_question(
    task: SyntheticTask,
    backend: LmBackend,
    spec: MethodSpec,
    template: TemplateSet,
    base_seed: int,
    index: int,
) -> QuestionOutcome:
    m = task.spec.m
    question = task.question_text(index)
    prompt = build_base(template, question, backend)
    # Method is deliberately not hashed in: methods at the same k see the
    # same draws, which keeps cross-method comparisons paired.
    q_seed = stable_seed(base_seed, spec.k, index)
    flags: list[str] = []
    final_text: str | None = None
    responses = None
    if spec.method != "greedy":
        responses = sample_k(backend, prompt, spec.k, spec.sampling, seed=q_seed)

    if spec.method == "greedy":
        result = greedy_decode(backend, question, template, ANSWER_BUDGET)
        answer = _first_answer_token(result.output, m)
        final_text = result.text
    elif spec.method == "id":
        config = DecodeConfig(
            k=spec.k,
            max_new_tokens=ANSWER_BUDGET,
            sampling=spec.sampling,
            seed=q_seed,
            template_id=spec.template_id,
        )
        result = id_decode(backend, question, responses, template, config)
        answer = _first_answer_token(result.output, m)
        final_text = result.text
        flags.extend(result.flags)
    elif spec.method == "sc_vote":
        try:
            winner = sc_vote(responses, lambda t: t.split()[-1] if t.split() else None)
            tid = task.vocab.try_id_of(winner)
            answer = tid if tid is not None and tid < m else None
            final_text = winner
        except ParseFailure:
            answer = None
            flags.append("vote_unparseable")
    elif spec.method == "usc":
        selection = usc_select(backend, question, responses, template, ANSWER_BUDGET)
        answer = _first_answer_token(responses[selection.index - 1].tokens, m)
        final_text = selection.text
        if selection.fallback:
            flags.append("usc_fallback")
    elif spec.method == "sr":
        result = sr_refine(backend, question, responses, template, ANSWER_BUDGET)
        answer = _first_answer_token(result.output, m)
        final_text = result.text
    else:  # pragma: no cover - MethodSpec already validated
        raise UsageError(f"unknown method {spec.method!r}")

    fscore = None
    if responses is not None and final_text:
        report = factuality_score(final_text, [r.text for r in responses], SupportSpec())
        fscore = report.overall
    return QuestionOutcome(
        index=index,
        answer_token=answer,
        correct=answer == task.correct[index],
        fscore=fscore,
        flags=tuple(flags),
    )


def run_method(
    task: SyntheticTask,
    backend: LmBackend,
    spec: MethodSpec,
    *,
    base_seed: int,
    jobs: int = 1,
) -> MethodRun:
    """Evaluate one method over the whole question bank.

    Per-question sampling seeds derive from (base_seed, k, question), so
    any cell can be reproduced in isolation. Questions may evaluate in
    parallel; outcomes are ordered by question index either way.
    """
    template = load_template(spec.template_id)
    indices = range(task.spec.n_questions)
    outcomes: list[QuestionOutcome] = []
    partial = False
    try:
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                outcomes = list(
                    pool.map(
                        lambda i: _eval_question(task, backend, spec, template, base_seed, i),
                        indices,
                    )
                )
        else:
            for i in indices:
                outcomes.append(_eval_question(task, backend, spec, template, base_seed, i))
    except BackendError:
        partial = True
    n = len(outcomes)
    accuracy = sum(o.correct for o in outcomes) / n if n else 0.0
    fscores = [o.fscore for o in outcomes if o.fscore is not None]
    return MethodRun(
        spec=spec,
        outcomes=tuple(outcomes),
        accuracy=accuracy,
        fscore_mean=sum(fscores) / len(fscores) if fscores else None,
        partial=partial,
    )


# ---------------------------------------------------------------------------
# k-sweep
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SweepCell:
    method: str
    k: int
    seed: int
    accuracy: float
    fscore_mean: float | None
    runtime_s: float
    n_questions: int
    partial: bool


@dataclass(frozen=True)
class SweepAggregate:
    method: str
    k: int
    seeds: tuple[int, ...]
    median_accuracy: float
    iqr_accuracy: float


@dataclass(frozen=True)
class SweepReport:
    task_spec: SyntheticTaskSpec
    sampling: str
    k_grid: tuple[int, ...]
    cells: tuple[SweepCell, ...]
    aggregates: tuple[SweepAggregate, ...]


def k_sweep(
    task: SyntheticTask,
    backend: LmBackend,
    methods: Sequence[str],
    k_grid: Sequence[int],
    seeds: Sequence[int],
    sampling: SamplingSpec,
    *,
    template_id: str = "toy",
    jobs: int = 1,
) -> SweepReport:
    """Evaluate the full (method, k, seed) cross-product."""
    if not k_grid:
        raise UsageError("k_grid must be non-empty")
    if len(seeds) < 3:
        raise UsageError("need at least 3 seeds")
    if not methods:
        raise UsageError("need at least one method")
    cells: list[SweepCell] = []
    for method in methods:
        ks = (1,) if method == "greedy" else tuple(k_grid)
        for k in ks:
            for seed in seeds:
                spec = MethodSpec(
                    method=method, k=k, sampling=sampling, template_id=template_id
                )
                started = time.perf_counter()
                run = run_method(task, backend, spec, base_seed=seed, jobs=jobs)
                cells.append(
                    SweepCell(
                        method=method,
                        k=spec.k,
                        seed=seed,
                        accuracy=run.accuracy,
                        fscore_mean=run.fscore_mean,
                        runtime_s=time.perf_counter() - started,
                        n_questions=task.spec.n_questions,
                        partial=run.partial,
                    )
                )
    aggregates = []
    for method in methods:
        ks = (1,) if method == "greedy" else tuple(k_grid)
        for k in ks:
            accs = sorted(c.accuracy for c in cells if c.method == method and c.k == k)
            q1, med, q3 = statistics.quantiles(accs, n=4, method="inclusive")
            aggregates.append(
                SweepAggregate(
                    method=method,
                    k=k,
                    seeds=tuple(seeds),
                    median_accuracy=med,
                    iqr_accuracy=q3 - q1,
                )
            )
    return SweepReport(
        task_spec=task.spec,
        sampling=sampling.describe(),
        k_grid=tuple(k_grid),
        cells=tuple(cells),
        aggregates=tuple(aggregates),
    )


def cells_to_jsonl(report: SweepReport) -> str:
    """Canonical one-cell-per-line artifact.

    Wall-clock runtime is shown in the rendered table only; keeping it
    out of this form makes the bytes a pure function of (task, methods,
    seeds).
    """
    lines = []
    for c in report.cells:
        lines.append(
            json.dumps(
                {
                    "method": c.method,
                    "k": c.k,
                    "seed": c.seed,
                    "accuracy": c.accuracy,
                    "fscore_mean": c.fscore_mean,
                    "n_questions": c.n_questions,
                    "partial": c.partial,
                    "sampling": report.sampling,
                },
                sort_keys=True,
            )
        )
    return "\n".join(lines) + "\n"


def render_table(report: SweepReport) -> str:
    header = f"{'method':<8} {'k':>3} {'median_acc':>10} {'iqr':>7}   seeds={list(report.aggregates[0].seeds)}"
    lines = [header, "-" * len(header)]
    for agg in report.aggregates:
        runtimes = [
            c.runtime_s for c in report.cells if c.method == agg.method and c.k == agg.k
        ]
        lines.append(
            f"{agg.method:<8} {agg.k:>3} {agg.median_accuracy:>10.4f} {agg.iqr_accuracy:>7.4f}"
            f"   ~{sum(runtimes):.2f}s"
        )
    return "\n".join(lines)


def write_csv(report: SweepReport, path: str | Path) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "k", "seed", "accuracy", "fscore_mean", "n_questions"])
        for c in report.cells:
            writer.writerow(
                [c.method, c.k, c.seed, f"{c.accuracy:.6f}",
                 "" if c.fscore_mean is None else f"{c.fscore_mean:.6f}", c.n_questions]
            )
