"""Independent reference implementations used to check the package.

Everything here is deliberately written in plain Python (no numpy, no
imports from the code paths under test beyond the RNG substrate) so a
disagreement points at the implementation, not at shared arithmetic.
"""

from __future__ import annotations

import itertools
import math

from idec.core import Rng


def replay_transform(values: list[float], strategy: str, t: float | None, p: float | None) -> list[float]:
    """Draw probabilities for one step, recomputed from first principles."""
    if strategy == "greedy":
        best = max(range(len(values)), key=lambda i: (values[i], -i))
        return [1.0 if i == best else 0.0 for i in range(len(values))]
    if strategy == "temperature":
        scaled = [v / t for v in values]
        m = max(scaled)
        if m == -math.inf:
            raise ValueError("degenerate distribution")
        weights = [math.exp(s - m) for s in scaled]
        z = sum(weights)
        return [w / z for w in weights]
    # nucleus: keep the smallest descending-probability prefix with mass >= p
    probs = [math.exp(v) for v in values]
    order = sorted(range(len(probs)), key=lambda i: (-probs[i], i))
    kept: list[int] = []
    cum = 0.0
    for i in order:
        kept.append(i)
        cum += probs[i]
        if cum >= p:
            break
    total = sum(probs[i] for i in kept)
    out = [0.0] * len(probs)
    for i in kept:
        out[i] = probs[i] / total
    return out


def replay_draw(probs: list[float], u: float) -> int:
    acc = 0.0
    last_live = None
    for i, pr in enumerate(probs):
        if pr > 0:
            last_live = i
        acc += pr
        if u < acc:
            return i
    return last_live


def replay_sample(backend, prompt, strategy: str, t: float | None, p: float | None,
                  max_new_tokens: int, rng: Rng) -> list[int]:
    """Step-by-step reimplementation of one response draw."""
    eos = backend.info().eos_id
    tokens: list[int] = []
    for _ in range(max_new_tokens):
        dist = backend.next_logprobs(tuple(prompt) + tuple(tokens))
        values = [float(x) for x in dist.values]
        if strategy == "greedy":
            tok = max(range(len(values)), key=lambda i: (values[i], -i))
        else:
            tok = replay_draw(replay_transform(values, strategy, t, p), rng.uniform())
        tokens.append(tok)
        if tok == eos:
            break
    return tokens


def multinomial_pmf(counts: tuple[int, ...], probs: list[float]) -> float:
    k = sum(counts)
    coeff = math.factorial(k)
    for c in counts:
        coeff //= math.factorial(c)
    value = float(coeff)
    for c, pr in zip(counts, probs):
        value *= pr**c
    return value


def plurality_win_probability(
    k: int,
    draw_probs: list[float],
    winner: int,
    tie_rank: list[float],
) -> float:
    """P(the winner token holds the plurality of k i.i.d. draws).

    Count ties are resolved toward the larger ``tie_rank`` entry, then
    the lower index; with tie_rank set to the base answer row this is
    how summed log-prob aggregation resolves equal vote counts in the
    strong-copy limit.
    """
    m = len(draw_probs)
    total = 0.0
    for counts in itertools.product(range(k + 1), repeat=m - 1):
        rest = k - sum(counts)
        if rest < 0:
            continue
        full = list(counts[:winner]) + [rest] + list(counts[winner:])
        c_w = full[winner]
        wins = True
        for v in range(m):
            if v == winner:
                continue
            if full[v] > c_w:
                wins = False
                break
            if full[v] == c_w and (tie_rank[v], -v) > (tie_rank[winner], -winner):
                wins = False
                break
        if wins:
            total += multinomial_pmf(tuple(full), draw_probs)
    return total


def id_rule_win_probability(
    k: int,
    draw_probs: list[float],
    winner: int,
    base_row: list[float],
    beta: float,
) -> float:
    """P(the aggregated-argmax winner is `winner`) over k i.i.d. draws.

    Exact enumeration of vote-count outcomes scored by the same mixture
    arithmetic the copy-biased backend induces; tighter than the plain
    plurality oracle, which ignores the base row's pull.
    """
    m = len(draw_probs)
    total = 0.0
    for counts in itertools.product(range(k + 1), repeat=m - 1):
        rest = k - sum(counts)
        if rest < 0:
            continue
        full = list(counts[:winner]) + [rest] + list(counts[winner:])
        if id_vote_winner(full, base_row, beta) == winner:
            total += multinomial_pmf(tuple(full), draw_probs)
    return total


def id_vote_winner(counts: list[int], base_row: list[float], beta: float) -> int:
    """Exact aggregated-argmax winner for single-token answers.

    Each of the k branches contributes log((1-beta)*b_v + beta) when it
    references v and log((1-beta)*b_v) otherwise; the winner maximizes
    the summed score with ties to the lowest token id.
    """
    k = sum(counts)
    best, best_score = None, None
    for v, b in enumerate(base_row):
        hit = math.log((1 - beta) * b + beta)
        miss = math.log((1 - beta) * b) if b > 0 else -math.inf
        score = counts[v] * hit
        if k > counts[v]:
            score += (k - counts[v]) * miss
        if best_score is None or score > best_score:
            best, best_score = v, score
    return best
