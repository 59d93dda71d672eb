"""Fixture helpers: a tiny local causal LM that needs no downloads.

The model is a 2-layer GPT-2 architecture with random (seeded) weights
over a byte-level tokenizer: every byte is one token, plus one eos. Small
enough to score requests in milliseconds on CPU while exercising the
exact model/tokenizer code paths of a full-size checkpoint.
"""

from __future__ import annotations

from pathlib import Path


def tiny_model_dir(dest: str | Path, *, n_embd: int = 32, n_layer: int = 2) -> Path:
    import torch
    from tokenizers import Tokenizer, decoders, models, pre_tokenizers
    from transformers import GPT2Config, GPT2LMHeadModel, PreTrainedTokenizerFast

    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)

    alphabet = sorted(pre_tokenizers.ByteLevel.alphabet())
    vocab = {ch: i for i, ch in enumerate(alphabet)}
    vocab["<|endoftext|>"] = 256
    raw = Tokenizer(models.BPE(vocab=vocab, merges=[]))
    raw.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    raw.decoder = decoders.ByteLevel()
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=raw,
        eos_token="<|endoftext|>",
        bos_token="<|endoftext|>",
        unk_token="<|endoftext|>",
    )
    tokenizer.save_pretrained(dest)

    torch.manual_seed(0)
    config = GPT2Config(
        vocab_size=257,
        n_positions=512,
        n_embd=n_embd,
        n_layer=n_layer,
        n_head=2,
        eos_token_id=256,
        bos_token_id=256,
    )
    model = GPT2LMHeadModel(config)
    model.eval()
    model.save_pretrained(dest)
    return dest
