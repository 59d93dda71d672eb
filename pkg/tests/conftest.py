from __future__ import annotations

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from idec.backend import ToyCopyLm, ToyTableLm
from idec.core import Vocab

DATA_DIR = Path(__file__).parent / "data"


@pytest.fixture(scope="session")
def data_dir() -> Path:
    return DATA_DIR


@pytest.fixture(scope="session")
def mini_vocab() -> Vocab:
    """4 answer tokens, one question token, eos, separator."""
    return Vocab(
        size=7,
        eos_id=5,
        token_text={0: "a0", 1: "a1", 2: "a2", 3: "a3", 4: "q0", 5: "</s>", 6: "<s>"},
        sep_ids=(6,),
    )


def make_mini_lm(mini_vocab: Vocab, answer_probs=(0.25, 0.25, 0.25, 0.25)) -> ToyTableLm:
    """Answer row after (q0, <s>); eos after any (<s>, answer)."""
    answer_row = np.zeros(mini_vocab.size)
    answer_row[:4] = answer_probs
    eos_row = np.zeros(mini_vocab.size)
    eos_row[mini_vocab.eos_id] = 1.0
    table = {(4, 6): answer_row}
    for a in range(4):
        table[(6, a)] = eos_row
    return ToyTableLm(mini_vocab, order=3, table=table)


@pytest.fixture()
def mini_lm(mini_vocab: Vocab) -> ToyTableLm:
    return make_mini_lm(mini_vocab)


@pytest.fixture()
def mini_copy_lm(mini_vocab: Vocab) -> ToyCopyLm:
    return ToyCopyLm(make_mini_lm(mini_vocab), 0.8)


def make_chain_lm(words: list[str], extra_words: tuple[str, ...] = ()) -> ToyTableLm:
    """Deterministic word chain: token 0 starts it, then each word forces the next.

    Unseen contexts back off to uniform, whose argmax is token 0, so greedy
    generation from any prompt walks the chain and ends at eos. Used to make
    toy backends emit fixed English sentences for selection/refinement tests.
    ``extra_words`` extend the vocabulary (so prompts tokenize) without
    joining the chain.
    """
    vocab_words = list(dict.fromkeys(list(words) + [w for w in extra_words if w not in words]))
    eos_id = len(vocab_words)
    sep_id = eos_id + 1
    token_text = {i: w for i, w in enumerate(vocab_words)}
    token_text[eos_id] = "</s>"
    token_text[sep_id] = "<s>"
    vocab = Vocab(size=sep_id + 1, eos_id=eos_id, token_text=token_text, sep_ids=(sep_id,))
    ids = [vocab_words.index(w) for w in words]
    table = {}
    for cur, nxt in zip(ids, ids[1:] + [eos_id]):
        row = np.zeros(vocab.size)
        row[nxt] = 1.0
        table[(cur,)] = row
    return ToyTableLm(vocab, order=2, table=table)
