"""Response sampling: greedy, temperature, and nucleus draws from a backend.

Each branch draws from its own deterministic RNG stream labeled
``branch-<j>``, so a k-way sample is reproducible from ``(seed, spec)``
alone and is independent of execution order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    LogProbDist,
    Rng,
    SamplingSpec,
    TokenSeq,
    UsageError,
    logsumexp,
    make_rng,
)
from .backend import LmBackend

__all__ = [
    "SamplingSpec",
    "SampledResponse",
    "draw_probs",
    "nucleus_support",
    "sample_one",
    "sample_k",
]


@dataclass(frozen=True)
class SampledResponse:
    """One sampled response r_j; tokens end with eos or at max_new_tokens."""

    tokens: TokenSeq
    text: str
    index: int
    spec: SamplingSpec
    rng_label: str
    ended_with_eos: bool


def nucleus_support(probs: np.ndarray, top_p: float) -> list[int]:
    """Smallest probability-sorted token set with cumulative mass >= p.

    Sorting is by descending probability with ties broken by ascending
    token id; the cutoff is inclusive, so the support is non-empty for
    any p > 0.
    """
    if not 0 < top_p <= 1:
        raise UsageError("nucleus p must be in (0, 1]")
    order = np.lexsort((np.arange(probs.size), -probs))
    cum = 0.0
    kept: list[int] = []
    for tid in order:
        kept.append(int(tid))
        cum += float(probs[tid])
        if cum >= top_p:
            break
    return kept


def draw_probs(dist: LogProbDist, spec: SamplingSpec) -> np.ndarray:
    """Per-draw probabilities implied by the strategy, over the full vocab."""
    values = dist.values
    if spec.strategy == "greedy":
        out = np.zeros(values.size)
        out[dist.argmax()] = 1.0
        return out
    if spec.strategy == "temperature":
        scaled = values / spec.temperature
        return np.exp(scaled - logsumexp(scaled))
    probs = np.exp(values)
    kept = nucleus_support(probs, spec.top_p)
    out = np.zeros(values.size)
    out[kept] = probs[kept]
    return out / out.sum()


def _draw(probs: np.ndarray, rng: Rng) -> int:
    u = rng.uniform()
    cum = np.cumsum(probs)
    idx = int(np.searchsorted(cum, u, side="right"))
    if idx >= probs.size or probs[idx] == 0.0:
        # Residual float mass at the tail; fall back to the last live token.
        idx = int(np.max(np.nonzero(probs)[0]))
    return idx


def sample_one(
    backend: LmBackend,
    prompt: TokenSeq,
    spec: SamplingSpec,
    rng: Rng,
    *,
    index: int = 0,
) -> SampledResponse:
    """Draw one response; greedy consumes no RNG draws."""
    vocab = backend.info()
    tokens: list[int] = []
    ended_with_eos = False
    for _ in range(spec.max_new_tokens):
        dist = backend.next_logprobs(prompt + tuple(tokens))
        if spec.strategy == "greedy":
            tok = dist.argmax()
        else:
            tok = _draw(draw_probs(dist, spec), rng)
        tokens.append(tok)
        if tok == vocab.eos_id:
            ended_with_eos = True
            break
    visible = tokens[:-1] if ended_with_eos else tokens
    return SampledResponse(
        tokens=tuple(tokens),
        text=backend.detokenize(tuple(visible)),
        index=index,
        spec=spec,
        rng_label=rng.label,
        ended_with_eos=ended_with_eos,
    )


def sample_k(
    backend: LmBackend,
    prompt: TokenSeq,
    k: int,
    spec: SamplingSpec,
    seed: int | None = None,
) -> list[SampledResponse]:
    """k independent responses on streams ``branch-0`` .. ``branch-(k-1)``."""
    if k < 1:
        raise UsageError("k must be >= 1")
    if seed is None:
        seed = spec.seed
    if seed is None:
        raise UsageError("sample_k needs a seed (argument or spec.seed)")
    return [
        sample_one(backend, prompt, spec, make_rng(seed, f"branch-{j}"), index=j)
        for j in range(k)
    ]
