"""Integrative decoding engine with toy oracles and an experiment harness."""

__version__ = "0.1.0"

from .core import (  # noqa: F401
    DecodeConfig,
    DecodeResult,
    LogProbDist,
    SamplingSpec,
    StepRecord,
    TokenSeq,
    Vocab,
    make_rng,
)
from .backend import (  # noqa: F401
    LmBackend,
    RemoteLm,
    ToyCopyLm,
    ToyTableLm,
    enumerate_objective,
    load_backend,
    score_sequence,
)
from .id_decoder import aggregate, id_decode, replay_trace  # noqa: F401
from .sampler import SampledResponse, sample_k, sample_one  # noqa: F401
