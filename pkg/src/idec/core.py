"""Shared domain types, deterministic RNG, and numeric support.

Everything downstream trades in three currencies defined here: token
sequences under a fixed :class:`Vocab`, next-token distributions in log
space (:class:`LogProbDist`), and decode artifacts (:class:`DecodeResult`
with its per-step trace). All values are immutable once constructed and
safe to share across threads.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "TokenSeq",
    "as_tokens",
    "Vocab",
    "LogProbDist",
    "SamplingSpec",
    "DecodeConfig",
    "StepRecord",
    "DecodeResult",
    "Rng",
    "make_rng",
    "logsumexp",
    "stable_seed",
    "IdecError",
    "UsageError",
    "TemplateError",
    "CapacityError",
    "DistributionError",
    "BackendError",
    "BackendUnavailableError",
    "DecodeRunError",
    "ParseFailure",
]

NORMALIZATION_TOL = 1e-6

# A token sequence is a plain immutable tuple of ids; may be empty.
TokenSeq = tuple[int, ...]


def as_tokens(ids: Iterable[int]) -> TokenSeq:
    return tuple(int(i) for i in ids)


class IdecError(Exception):
    """Base class for all engine errors."""


class UsageError(IdecError):
    """Invalid flags, config, or inputs (CLI exit code 2)."""


class TemplateError(UsageError):
    """Template failed validation or slot filling."""


class CapacityError(UsageError):
    """An exact-enumeration guard was exceeded."""


class DistributionError(IdecError):
    """A log-probability array violated the normalization contract."""


class BackendError(IdecError):
    """Backend-side failure (CLI exit code 3)."""


class BackendUnavailableError(BackendError):
    """Remote backend unreachable after the retry budget."""


class DecodeRunError(BackendError):
    """Backend failure mid-decode; carries the partial trace."""

    def __init__(self, message: str, partial_trace: list["StepRecord"]):
        super().__init__(message)
        self.partial_trace = partial_trace


class ParseFailure(IdecError):
    """No usable answer could be parsed from any response."""


@dataclass(frozen=True)
class Vocab:
    """A fixed token inventory.

    ``token_text`` maps every id in ``[0, size)`` to a display string for
    toy backends; remote backends may omit it. ``sep_ids`` are reserved
    separator ids that templates use to make toy inputs machine-parseable.
    """

    size: int
    eos_id: int
    bos_id: int | None = None
    token_text: Mapping[int, str] | None = None
    sep_ids: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if self.size <= 0:
            raise UsageError(f"vocab size must be positive, got {self.size}")
        if not 0 <= self.eos_id < self.size:
            raise UsageError(f"eos_id {self.eos_id} outside [0, {self.size})")
        if self.bos_id is not None and not 0 <= self.bos_id < self.size:
            raise UsageError(f"bos_id {self.bos_id} outside [0, {self.size})")
        for s in self.sep_ids:
            if not 0 <= s < self.size:
                raise UsageError(f"separator id {s} outside [0, {self.size})")
        if self.token_text is not None:
            if set(self.token_text.keys()) != set(range(self.size)):
                raise UsageError("token_text keys must be exactly [0, size)")
            reverse = {v: k for k, v in self.token_text.items()}
            if len(reverse) != self.size:
                raise UsageError("token texts must be unique")
            object.__setattr__(self, "_reverse_text", reverse)

    def check_ids(self, tokens: Sequence[int]) -> None:
        for t in tokens:
            if not 0 <= t < self.size:
                raise UsageError(f"token id {t} outside vocab of size {self.size}")

    def text_of(self, token_id: int) -> str:
        if self.token_text is None:
            raise UsageError("vocab has no token_text mapping")
        return self.token_text[token_id]

    def id_of(self, text: str) -> int:
        tid = self.try_id_of(text)
        if tid is None:
            raise UsageError(f"unknown token text {text!r}")
        return tid

    def try_id_of(self, text: str) -> int | None:
        if self.token_text is None:
            raise UsageError("vocab has no token_text mapping")
        return self._reverse_text.get(text)  # type: ignore[attr-defined]


def logsumexp(values: Sequence[float] | np.ndarray) -> float:
    """Stable log(sum(exp(values))); returns -inf for an all--inf input."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise UsageError("logsumexp of an empty array")
    m = float(np.max(arr))
    if m == -math.inf:
        return -math.inf
    return m + math.log(float(np.sum(np.exp(arr - m))))


class LogProbDist:
    """One next-token distribution in natural-log space.

    Accepted arrays must normalize: ``|logsumexp(values)| <= 1e-6``.
    ``-inf`` entries (masked tokens) are permitted; NaN is rejected.
    """

    __slots__ = ("_values",)

    def __init__(self, values: np.ndarray, *, _validated: bool = False):
        arr = np.asarray(values, dtype=np.float64)
        if not _validated:
            if arr.ndim != 1 or arr.size == 0:
                raise DistributionError("log-prob array must be 1-D and non-empty")
            if np.isnan(arr).any() or np.isposinf(arr).any():
                raise DistributionError("log-prob array contains NaN or +inf")
            lse = logsumexp(arr)
            if not abs(lse) <= NORMALIZATION_TOL:
                raise DistributionError(
                    f"log-prob array not normalized: logsumexp={lse:.3e}"
                )
        arr = arr.copy()
        arr.setflags(write=False)
        self._values = arr

    @classmethod
    def from_logits(cls, logits: Sequence[float] | np.ndarray) -> "LogProbDist":
        """Log-softmax of raw scores; the only sanctioned logit entry point."""
        arr = np.asarray(logits, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise DistributionError("logits must be 1-D and non-empty")
        if np.isnan(arr).any():
            raise DistributionError("logits contain NaN")
        shifted = arr - logsumexp(arr)
        return cls(shifted, _validated=True)

    @classmethod
    def from_probs(cls, probs: Sequence[float] | np.ndarray) -> "LogProbDist":
        arr = np.asarray(probs, dtype=np.float64)
        if (arr < 0).any() or np.isnan(arr).any():
            raise DistributionError("probabilities must be non-negative")
        total = float(arr.sum())
        if total <= 0:
            raise DistributionError("probabilities sum to zero")
        with np.errstate(divide="ignore"):
            vals = np.log(arr / total)
        return cls(vals, _validated=True)

    @property
    def values(self) -> np.ndarray:
        return self._values

    def __len__(self) -> int:
        return int(self._values.size)

    def __getitem__(self, token_id: int) -> float:
        return float(self._values[token_id])

    def argmax(self) -> int:
        """Highest log-prob token; ties go to the lowest token id."""
        return int(np.argmax(self._values))

    def __repr__(self) -> str:
        return f"LogProbDist(size={len(self)}, argmax={self.argmax()})"


# ---------------------------------------------------------------------------
# Deterministic RNG
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z &= _MASK64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & _MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & _MASK64
    z ^= z >> 31
    return z


def stable_seed(*parts: object) -> int:
    """64-bit seed derived from the SHA-256 of the printed parts.

    Platform- and process-independent, unlike builtin ``hash``.
    """
    text = "\x1f".join(str(p) for p in parts)
    digest = hashlib.sha256(text.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


class Rng:
    """Counter-based deterministic generator (SplitMix64 core).

    The stream key is the first 8 bytes of ``SHA-256(seed_le8 || 0x1f ||
    label_utf8)``. Draw ``i`` is the SplitMix64 mix of ``key + (i+1)*gamma``
    mod 2^64 with the golden-ratio gamma ``0x9E3779B97F4A7C15``. This uses
    integer arithmetic only, so identical (seed, label) pairs replay the
    same stream on every platform; distinct labels give independent
    streams.
    """

    __slots__ = ("seed", "label", "_key", "_counter")

    def __init__(self, seed: int, label: str):
        self.seed = int(seed) & _MASK64
        self.label = label
        payload = self.seed.to_bytes(8, "little") + b"\x1f" + label.encode("utf-8")
        digest = hashlib.sha256(payload).digest()
        self._key = int.from_bytes(digest[:8], "little")
        self._counter = 0

    def next_u64(self) -> int:
        self._counter += 1
        return _mix64(self._key + self._counter * _GAMMA)

    def uniform(self) -> float:
        """One double in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * 2.0**-53

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise UsageError("randbelow requires n >= 1")
        limit = (_MASK64 + 1) - ((_MASK64 + 1) % n)
        while True:
            u = self.next_u64()
            if u < limit:
                return u % n

    def shuffle(self, items: list) -> None:
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]


def make_rng(seed: int, stream_label: str) -> Rng:
    return Rng(seed, stream_label)


# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------

SAMPLING_STRATEGIES = ("greedy", "temperature", "nucleus")


@dataclass(frozen=True)
class SamplingSpec:
    """How responses are drawn: greedy, temperature(T), or nucleus(p)."""

    strategy: str = "temperature"
    temperature: float | None = 0.7
    top_p: float | None = None
    max_new_tokens: int = 64
    seed: int | None = None

    def __post_init__(self) -> None:
        if self.strategy not in SAMPLING_STRATEGIES:
            raise UsageError(f"unknown sampling strategy {self.strategy!r}")
        if self.strategy == "temperature":
            if self.temperature is None or self.temperature <= 0:
                raise UsageError("temperature must be > 0")
        if self.strategy == "nucleus":
            if self.top_p is None or not 0 < self.top_p <= 1:
                raise UsageError("nucleus p must be in (0, 1]")
        if self.max_new_tokens < 1:
            raise UsageError("max_new_tokens must be >= 1")

    @classmethod
    def parse(
        cls,
        text: str,
        *,
        max_new_tokens: int = 64,
        seed: int | None = None,
    ) -> "SamplingSpec":
        """Parse a CLI strategy string: greedy | temp:T | nucleus:P."""
        s = text.strip().lower()
        if s == "greedy":
            return cls("greedy", None, None, max_new_tokens, seed)
        name, _, arg = s.partition(":")
        if name in ("temp", "temperature") and arg:
            return cls("temperature", float(arg), None, max_new_tokens, seed)
        if name in ("nucleus", "top_p", "top-p") and arg:
            return cls("nucleus", None, float(arg), max_new_tokens, seed)
        raise UsageError(f"cannot parse sampling strategy {text!r}")

    def describe(self) -> str:
        if self.strategy == "greedy":
            return "greedy"
        if self.strategy == "temperature":
            return f"temp:{self.temperature:g}"
        return f"nucleus:{self.top_p:g}"


@dataclass(frozen=True)
class DecodeConfig:
    """Knobs for one decode run. Ties in any argmax go to the lowest id."""

    k: int = 1
    max_new_tokens: int = 64
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    seed: int = 0
    template_id: str = "toy"
    tie_break: str = "lowest-token-id"

    def __post_init__(self) -> None:
        if self.k < 1:
            raise UsageError("k must be >= 1")
        if self.max_new_tokens < 1:
            raise UsageError("max_new_tokens must be >= 1")
        if self.tie_break != "lowest-token-id":
            raise UsageError("only the lowest-token-id tie policy is supported")


@dataclass(frozen=True)
class StepRecord:
    """One decode step: what each branch said and what was chosen.

    ``branch_chosen_logprobs[j]`` is branch j's log-prob of the chosen
    token; ``top_candidates`` holds the N best (token, summed log-prob)
    pairs in descending value order (ties by ascending id).
    """

    step: int
    branch_chosen_logprobs: tuple[float, ...]
    top_candidates: tuple[tuple[int, float], ...]
    chosen: int


@dataclass(frozen=True)
class DecodeResult:
    """Final tokens plus a complete per-step trace for oracle replay."""

    output: TokenSeq
    text: str
    trace: tuple[StepRecord, ...]
    stop_reason: str  # "eos" | "max_len"
    branch_inputs: tuple[TokenSeq, ...]
    flags: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if len(self.trace) != len(self.output):
            raise IdecError("trace length must equal emitted token count")
        for rec, tok in zip(self.trace, self.output):
            if rec.chosen != tok:
                raise IdecError(f"trace/output mismatch at step {rec.step}")

    @property
    def k(self) -> int:
        return len(self.branch_inputs)
