"""Language-model backends: toy table/copy models and a remote client.

A backend maps a token prefix to one normalized next-token distribution.
``ToyTableLm`` is a plain backoff n-gram table; ``ToyCopyLm`` wraps it and
blends in a copy channel that replays the response embedded between the
second and third template separators, which makes decoding over wrapped
inputs analytically predictable. ``RemoteLm`` speaks the HTTP wire
protocol of the logits server.

This module also hosts the exact-objective oracle: ``score_sequence``
sums forced-path log-probs for one input, and ``enumerate_objective``
evaluates the summed objective for every candidate sequence at tiny
scale.
"""

from __future__ import annotations

import base64
import itertools
import json
import math
import threading
import time
from pathlib import Path
from typing import Iterable, Protocol

import numpy as np

from .core import (
    BackendError,
    BackendUnavailableError,
    CapacityError,
    LogProbDist,
    TokenSeq,
    UsageError,
    Vocab,
    as_tokens,
)

__all__ = [
    "LmBackend",
    "ToyTableLm",
    "ToyCopyLm",
    "RemoteLm",
    "score_sequence",
    "objective_value",
    "enumerate_objective",
    "load_toy_backend",
    "save_toy_backend",
    "load_backend",
]

ENUMERATION_GUARD = 10**6


class LmBackend(Protocol):
    """Behavior contract: a pure prefix -> distribution scorer."""

    def info(self) -> Vocab: ...

    def next_logprobs(self, prefix: TokenSeq) -> LogProbDist: ...

    def tokenize(self, text: str) -> TokenSeq: ...

    def detokenize(self, tokens: TokenSeq) -> str: ...


# ---------------------------------------------------------------------------
# Toy backends
# ---------------------------------------------------------------------------


class ToyTableLm:
    """Backoff n-gram table over a word-per-token vocabulary.

    ``table`` maps context suffixes (length <= order-1, oldest first) to
    probability rows. Lookup tries the longest stored suffix first, then
    shorter ones, then the uniform backoff row. Rows are validated to sum
    to 1 within 1e-9 and re-normalized exactly on construction. Read-only
    after load; distributions are cached, so repeated queries are
    bit-identical.
    """

    def __init__(
        self,
        vocab: Vocab,
        order: int,
        table: dict[tuple[int, ...], np.ndarray | list[float]],
    ):
        if order < 1:
            raise UsageError(f"n-gram order must be >= 1, got {order}")
        if vocab.token_text is None:
            raise UsageError("toy backends require a token_text mapping")
        self.vocab = vocab
        self.order = order
        self._rows: dict[tuple[int, ...], np.ndarray] = {}
        for ctx, row in table.items():
            if len(ctx) > order - 1:
                raise UsageError(f"context {ctx} longer than order-1={order - 1}")
            vocab.check_ids(ctx)
            arr = np.asarray(row, dtype=np.float64)
            if arr.shape != (vocab.size,):
                raise UsageError(f"row for {ctx} has wrong length {arr.shape}")
            total = float(arr.sum())
            if abs(total - 1.0) > 1e-9 or (arr < 0).any():
                raise UsageError(f"row for {ctx} does not normalize: sum={total!r}")
            self._rows[tuple(ctx)] = arr / total
        self._uniform = np.full(vocab.size, 1.0 / vocab.size)
        self._dist_cache: dict[tuple[int, ...] | None, LogProbDist] = {}

    def info(self) -> Vocab:
        return self.vocab

    def _resolve_row(self, prefix: TokenSeq) -> tuple[tuple[int, ...] | None, np.ndarray]:
        """Longest stored suffix of the prefix, or the uniform backoff."""
        context = tuple(prefix[-(self.order - 1) :]) if self.order > 1 else ()
        for start in range(len(context) + 1):
            suffix = context[start:]
            row = self._rows.get(suffix)
            if row is not None:
                return suffix, row
        return None, self._uniform

    def _dist_for(self, key: tuple[int, ...] | None, probs: np.ndarray) -> LogProbDist:
        dist = self._dist_cache.get(key)
        if dist is None:
            dist = LogProbDist.from_probs(probs)
            self._dist_cache[key] = dist
        return dist

    def next_logprobs(self, prefix: TokenSeq) -> LogProbDist:
        self.vocab.check_ids(prefix)
        key, probs = self._resolve_row(prefix)
        return self._dist_for(key, probs)

    def tokenize(self, text: str) -> TokenSeq:
        return as_tokens(self.vocab.id_of(word) for word in text.split())

    def detokenize(self, tokens: TokenSeq) -> str:
        return " ".join(self.vocab.text_of(t) for t in tokens)


class ToyCopyLm:
    """Copy-biased wrapper realizing in-context imitation of the embedded response.

    Inputs shaped ``[SEP x SEP r SEP x SEP]`` expose ``r`` as the reference
    window (the span between the second and third separators, located by
    counting separator ids, never by content). While the generated suffix
    is shorter than the window, the emitted distribution is
    ``normalize((1-beta) * base_row + beta * onehot(window[t]))`` where t
    is the suffix position; past the window, or when the prefix has fewer
    than four separators, the base row is used unmixed.
    """

    def __init__(self, base: ToyTableLm, copy_weight: float):
        if not 0 <= copy_weight < 1:
            raise UsageError(f"copy_weight must be in [0, 1), got {copy_weight}")
        if not base.vocab.sep_ids:
            raise UsageError("ToyCopyLm requires a vocab with a reserved separator id")
        self.base = base
        self.copy_weight = copy_weight
        self.sep_id = base.vocab.sep_ids[0]
        self._dist_cache: dict[tuple, LogProbDist] = {}

    @property
    def vocab(self) -> Vocab:
        return self.base.vocab

    def info(self) -> Vocab:
        return self.base.vocab

    def _copy_token(self, prefix: TokenSeq) -> int | None:
        sep_positions = [i for i, t in enumerate(prefix) if t == self.sep_id]
        if len(sep_positions) < 4:
            return None
        window = prefix[sep_positions[1] + 1 : sep_positions[2]]
        suffix_len = len(prefix) - (sep_positions[-1] + 1)
        if suffix_len < len(window):
            return window[suffix_len]
        return None

    def next_logprobs(self, prefix: TokenSeq) -> LogProbDist:
        self.vocab.check_ids(prefix)
        row_key, base_probs = self.base._resolve_row(prefix)
        copy_tok = self._copy_token(prefix)
        if copy_tok is None:
            return self.base._dist_for(row_key, base_probs)
        cache_key = (row_key, copy_tok)
        dist = self._dist_cache.get(cache_key)
        if dist is None:
            mixed = (1.0 - self.copy_weight) * base_probs
            mixed = mixed.copy()
            mixed[copy_tok] += self.copy_weight
            dist = LogProbDist.from_probs(mixed)
            self._dist_cache[cache_key] = dist
        return dist

    def tokenize(self, text: str) -> TokenSeq:
        return self.base.tokenize(text)

    def detokenize(self, tokens: TokenSeq) -> str:
        return self.base.detokenize(tokens)


# ---------------------------------------------------------------------------
# Toy model file format
# ---------------------------------------------------------------------------


def _vocab_to_json(vocab: Vocab) -> dict:
    return {
        "size": vocab.size,
        "eos_id": vocab.eos_id,
        "bos_id": vocab.bos_id,
        "sep_ids": list(vocab.sep_ids),
        "token_text": {str(k): v for k, v in (vocab.token_text or {}).items()},
    }


def _vocab_from_json(obj: dict) -> Vocab:
    return Vocab(
        size=int(obj["size"]),
        eos_id=int(obj["eos_id"]),
        bos_id=None if obj.get("bos_id") is None else int(obj["bos_id"]),
        token_text={int(k): str(v) for k, v in obj["token_text"].items()},
        sep_ids=tuple(int(s) for s in obj.get("sep_ids", [])),
    )


def save_toy_backend(backend: ToyTableLm | ToyCopyLm, path: str | Path) -> None:
    """Write the single-document JSON form (probabilities as decimal strings)."""
    table = backend.base if isinstance(backend, ToyCopyLm) else backend
    doc: dict = {
        "vocab": _vocab_to_json(table.vocab),
        "order": table.order,
        "rows": {
            " ".join(str(t) for t in ctx): {
                str(i): repr(float(p)) for i, p in enumerate(row) if p > 0
            }
            for ctx, row in table._rows.items()
        },
        "backoff": "uniform",
    }
    if isinstance(backend, ToyCopyLm):
        doc["copy"] = {"beta": backend.copy_weight}
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True))


def load_toy_backend(path: str | Path) -> ToyTableLm | ToyCopyLm:
    doc = json.loads(Path(path).read_text())
    vocab = _vocab_from_json(doc["vocab"])
    if doc.get("backoff", "uniform") != "uniform":
        raise UsageError("only the uniform backoff row is supported")
    table: dict[tuple[int, ...], np.ndarray] = {}
    for key, sparse in doc["rows"].items():
        ctx = tuple(int(t) for t in key.split()) if key else ()
        row = np.zeros(vocab.size)
        for tok, prob in sparse.items():
            row[int(tok)] = float(prob)
        table[ctx] = row
    base = ToyTableLm(vocab, int(doc["order"]), table)
    if "copy" in doc:
        return ToyCopyLm(base, float(doc["copy"]["beta"]))
    return base


# ---------------------------------------------------------------------------
# Remote backend
# ---------------------------------------------------------------------------

RETRY_DELAYS_S = (0.1, 0.3, 0.9)


class RemoteLm:
    """Client for the logits-server wire protocol.

    Identical prefixes yield identical responses from a conforming
    server. Transport failures are retried with 100/300/900 ms backoff;
    exhausting the budget raises ``BackendUnavailableError``. Wire
    log-probs arrive as little-endian f32 and are re-normalized in f64 so
    downstream code sees distributions meeting the 1e-6 contract.
    """

    def __init__(
        self,
        endpoint: str,
        *,
        timeout: float = 30.0,
        use_sessions: bool = False,
    ):
        import httpx

        self.endpoint = endpoint.rstrip("/")
        self._client = httpx.Client(base_url=self.endpoint, timeout=timeout)
        self._vocab: Vocab | None = None
        self.server_info: dict = {}
        self.use_sessions = use_sessions
        self._sessions: dict[TokenSeq, str] = {}
        self._lock = threading.Lock()

    def close(self) -> None:
        self._client.close()

    def _request(self, method: str, url: str, payload: dict | None = None) -> dict:
        import httpx

        last_exc: Exception | None = None
        for delay in (*RETRY_DELAYS_S, None):
            try:
                resp = self._client.request(method, url, json=payload)
            except httpx.TransportError as exc:
                last_exc = exc
                if delay is None:
                    break
                time.sleep(delay)
                continue
            if resp.status_code == 503 and delay is not None:
                time.sleep(delay)
                continue
            if resp.status_code >= 400:
                try:
                    err = resp.json().get("error", {})
                    detail = f"{err.get('code')}: {err.get('message')}"
                except Exception:
                    detail = resp.text[:200]
                raise BackendError(f"{url} -> HTTP {resp.status_code} ({detail})")
            return resp.json()
        raise BackendUnavailableError(f"{self.endpoint}{url} unreachable: {last_exc}")

    def info(self) -> Vocab:
        if self._vocab is None:
            obj = self._request("GET", "/v1/info")
            self.server_info = obj
            self._vocab = Vocab(
                size=int(obj["vocab_size"]),
                eos_id=int(obj["eos_id"]),
                bos_id=None if obj.get("bos_id") is None else int(obj["bos_id"]),
            )
        return self._vocab

    def _decode_wire(self, obj: dict) -> LogProbDist:
        vocab = self.info()
        raw = base64.b64decode(obj["logprobs_b64"])
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        if arr.size != vocab.size:
            raise BackendError(
                f"server returned {arr.size} log-probs for vocab {vocab.size}"
            )
        # f32 on the wire drifts up to ~1e-4; re-normalize to the core contract.
        return LogProbDist.from_logits(arr)

    def next_logprobs(self, prefix: TokenSeq) -> LogProbDist:
        self.info().check_ids(prefix)
        if self.use_sessions and len(prefix) >= 1:
            obj = self._session_step(prefix)
            if obj is not None:
                return self._decode_wire(obj)
        obj = self._request("POST", "/v1/next_logprobs", {"tokens": list(prefix)})
        return self._decode_wire(obj)

    def _session_step(self, prefix: TokenSeq) -> dict | None:
        head, last = prefix[:-1], prefix[-1]
        with self._lock:
            sid = self._sessions.pop(head, None)
        try:
            if sid is None:
                sid = self._request("POST", "/v1/session", {"tokens": list(head)})[
                    "session_id"
                ]
            obj = self._request(
                "POST", "/v1/extend", {"session_id": sid, "token": int(last)}
            )
        except BackendUnavailableError:
            raise
        except BackendError:
            return None  # e.g. evicted session; caller falls back to stateless
        with self._lock:
            self._sessions[prefix] = sid
        return obj

    def tokenize(self, text: str) -> TokenSeq:
        obj = self._request("POST", "/v1/tokenize", {"text": text})
        return as_tokens(obj["tokens"])

    def detokenize(self, tokens: TokenSeq) -> str:
        obj = self._request("POST", "/v1/detokenize", {"tokens": list(tokens)})
        return str(obj["text"])


def load_backend(spec: str) -> LmBackend:
    """Resolve a backend spec string: ``toy:<path>`` or ``http(s)://<url>``."""
    if spec.startswith("toy:"):
        return load_toy_backend(spec[len("toy:") :])
    if spec.startswith(("http://", "https://")):
        return RemoteLm(spec)
    if spec.startswith(("http:", "https:")):
        scheme, _, rest = spec.partition(":")
        return RemoteLm(f"{scheme}://{rest}")
    raise UsageError(f"cannot parse backend spec {spec!r} (want toy:<path> or http:<url>)")


# ---------------------------------------------------------------------------
# Sequence scoring and the brute-force objective oracle
# ---------------------------------------------------------------------------


def score_sequence(backend: LmBackend, prefix: TokenSeq, continuation: TokenSeq) -> float:
    """Summed log-prob of a forced continuation after the prefix.

    Computed with ``math.fsum`` over the per-step values, so the result
    does not depend on accumulation order.
    """
    if not continuation:
        raise UsageError("continuation must be non-empty")
    terms = []
    running = tuple(prefix)
    for tok in continuation:
        terms.append(backend.next_logprobs(running)[tok])
        running = running + (tok,)
    return math.fsum(terms)


def objective_value(backend: LmBackend, branch_inputs: Iterable[TokenSeq], y: TokenSeq) -> float:
    """Summed-over-branches sequence objective: fsum_j score_sequence(q_j, y)."""
    return math.fsum(score_sequence(backend, q, y) for q in branch_inputs)


def _candidate_sequences(vocab: Vocab, max_len: int) -> Iterable[TokenSeq]:
    """Sequences of length <= max_len where eos may appear only at the end."""
    eos = vocab.eos_id
    non_eos = [t for t in range(vocab.size) if t != eos]
    for length in range(1, max_len + 1):
        for body in itertools.product(non_eos, repeat=length - 1):
            if length < max_len:
                yield (*body, eos)
            else:
                for last in range(vocab.size):
                    yield (*body, last)


def enumerate_objective(
    backend: LmBackend,
    branch_inputs: list[TokenSeq],
    max_len: int,
) -> list[tuple[TokenSeq, float]]:
    """Exact objective for every candidate sequence, best first.

    Refuses instances beyond ``vocab.size ** max_len`` = 1e6 candidates.
    Ties in the objective are ordered lexicographically by token ids.
    """
    vocab = backend.info()
    if vocab.size**max_len > ENUMERATION_GUARD:
        raise CapacityError(
            f"vocab {vocab.size} ** max_len {max_len} exceeds {ENUMERATION_GUARD}"
        )
    if not branch_inputs:
        raise UsageError("need at least one branch input")
    scored = [
        (y, objective_value(backend, branch_inputs, y))
        for y in _candidate_sequences(vocab, max_len)
    ]
    scored.sort(key=lambda item: (-item[1], item[0]))
    return scored
