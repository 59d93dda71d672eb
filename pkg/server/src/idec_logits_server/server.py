"""HTTP adapter for a causal language model's next-token log-probabilities.

The server only scores: given a token prefix it returns log-softmax of the
model's final-position logits as little-endian float32, base64-encoded.
There are no sampling or generation endpoints; decoding strategy stays on
the client side. Optional sessions map prefix extension onto the model's
KV cache without changing response semantics.

Wire protocol:
    GET  /v1/info          -> {vocab_size, eos_id, bos_id, model, max_prefix}
    POST /v1/tokenize      {text}                -> {tokens}
    POST /v1/detokenize    {tokens}              -> {text}
    POST /v1/next_logprobs {tokens}              -> {logprobs_b64}
    POST /v1/session       {tokens}              -> {session_id}
    POST /v1/extend        {session_id, token}   -> {logprobs_b64}

Errors are JSON ``{"error": {"code", "message"}}`` with matching HTTP
status: 400 malformed, 404 unknown session, 413 prefix too long, 503
while the model is loading.
"""

from __future__ import annotations

import base64
import threading
import uuid
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Any

from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse
from pydantic import BaseModel


@dataclass
class ServerConfig:
    model: str
    device: str = "cpu"
    max_prefix: int = 2048
    port: int = 8453
    host: str = "127.0.0.1"
    session_cache_size: int = 16
    debug_json: bool = False


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


@dataclass
class _Session:
    lock: threading.Lock = field(default_factory=threading.Lock)
    past: Any = None
    length: int = 0


class ModelHost:
    """Owns the model, tokenizer, and session cache."""

    def __init__(self, config: ServerConfig):
        import torch
        from transformers import AutoModelForCausalLM, AutoTokenizer

        self.config = config
        self.tokenizer = AutoTokenizer.from_pretrained(config.model)
        self.model = AutoModelForCausalLM.from_pretrained(config.model)
        self.model.to(config.device)
        self.model.eval()
        self._torch = torch
        self.vocab_size = int(self.model.config.vocab_size)
        eos = self.model.config.eos_token_id
        if eos is None:
            eos = self.tokenizer.eos_token_id
        if eos is None:
            raise ValueError("model defines no eos token id")
        self.eos_id = int(eos)
        bos = self.model.config.bos_token_id
        if bos is None:
            bos = self.tokenizer.bos_token_id
        self.bos_id = None if bos is None else int(bos)
        self._sessions: OrderedDict[str, _Session] = OrderedDict()
        self._sessions_lock = threading.Lock()

    # -- helpers -----------------------------------------------------------

    def _check_tokens(self, tokens: list[int], *, allow_empty: bool = False) -> None:
        if not tokens and not allow_empty:
            raise ApiError(400, "empty_tokens", "need at least one token")
        if len(tokens) > self.config.max_prefix:
            raise ApiError(
                413, "prefix_too_long",
                f"{len(tokens)} tokens exceeds max_prefix={self.config.max_prefix}",
            )
        for t in tokens:
            if not 0 <= t < self.vocab_size:
                raise ApiError(400, "token_out_of_range", f"token id {t}")

    def _encode_logits(self, logits) -> dict:
        logprobs = self._torch.log_softmax(logits.float(), dim=-1)
        arr = logprobs.cpu().numpy().astype("<f4")
        payload = {"logprobs_b64": base64.b64encode(arr.tobytes()).decode("ascii")}
        if self.config.debug_json:
            payload["logprobs"] = [float(x) for x in arr]
        return payload

    # -- endpoint bodies ---------------------------------------------------

    def info(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "eos_id": self.eos_id,
            "bos_id": self.bos_id,
            "model": self.config.model,
            "max_prefix": self.config.max_prefix,
        }

    def tokenize(self, text: str) -> dict:
        return {"tokens": [int(t) for t in self.tokenizer.encode(text, add_special_tokens=False)]}

    def detokenize(self, tokens: list[int]) -> dict:
        self._check_tokens(tokens, allow_empty=True)
        text = self.tokenizer.decode(
            tokens, skip_special_tokens=False, clean_up_tokenization_spaces=False
        )
        return {"text": text}

    def next_logprobs(self, tokens: list[int]) -> dict:
        self._check_tokens(tokens)
        torch = self._torch
        with torch.no_grad():
            ids = torch.tensor([tokens], dtype=torch.long, device=self.config.device)
            logits = self.model(input_ids=ids).logits[0, -1]
        return self._encode_logits(logits)

    def open_session(self, tokens: list[int]) -> dict:
        self._check_tokens(tokens, allow_empty=True)
        torch = self._torch
        session = _Session()
        if tokens:
            with torch.no_grad():
                ids = torch.tensor([tokens], dtype=torch.long, device=self.config.device)
                out = self.model(input_ids=ids, use_cache=True)
            session.past = out.past_key_values
            session.length = len(tokens)
        sid = uuid.uuid4().hex
        with self._sessions_lock:
            self._sessions[sid] = session
            while len(self._sessions) > self.config.session_cache_size:
                self._sessions.popitem(last=False)
        return {"session_id": sid}

    def extend(self, session_id: str, token: int) -> dict:
        self._check_tokens([token])
        with self._sessions_lock:
            session = self._sessions.get(session_id)
            if session is not None:
                self._sessions.move_to_end(session_id)
        if session is None:
            raise ApiError(404, "unknown_session", f"no session {session_id!r}")
        torch = self._torch
        with session.lock:
            if session.length + 1 > self.config.max_prefix:
                raise ApiError(413, "prefix_too_long", "session reached max_prefix")
            with torch.no_grad():
                ids = torch.tensor([[token]], dtype=torch.long, device=self.config.device)
                out = self.model(input_ids=ids, past_key_values=session.past, use_cache=True)
            session.past = out.past_key_values
            session.length += 1
            return self._encode_logits(out.logits[0, -1])


class TextIn(BaseModel):
    text: str


class TokensIn(BaseModel):
    tokens: list[int]


class ExtendIn(BaseModel):
    session_id: str
    token: int


def build_app(config: ServerConfig):
    """FastAPI application; the model loads before the app is returned."""
    app = FastAPI(title="idec-logits-server", docs_url=None, redoc_url=None)
    app.state.host = None

    def error_response(status: int, code: str, message: str) -> JSONResponse:
        return JSONResponse(
            status_code=status, content={"error": {"code": code, "message": message}}
        )

    @app.exception_handler(ApiError)
    async def handle_api_error(_req: Request, exc: ApiError):
        return error_response(exc.status, exc.code, exc.message)

    @app.exception_handler(RequestValidationError)
    async def handle_validation(_req: Request, exc: RequestValidationError):
        return error_response(400, "malformed_request", str(exc.errors()[:3]))

    def host() -> ModelHost:
        if app.state.host is None:
            raise ApiError(503, "loading", "model is still loading")
        return app.state.host

    @app.get("/v1/info")
    def info():
        return host().info()

    @app.post("/v1/tokenize")
    def tokenize(body: TextIn):
        return host().tokenize(body.text)

    @app.post("/v1/detokenize")
    def detokenize(body: TokensIn):
        return host().detokenize(body.tokens)

    @app.post("/v1/next_logprobs")
    def next_logprobs(body: TokensIn):
        return host().next_logprobs(body.tokens)

    @app.post("/v1/session")
    def open_session(body: TokensIn):
        return host().open_session(body.tokens)

    @app.post("/v1/extend")
    def extend(body: ExtendIn):
        return host().extend(body.session_id, body.token)

    app.state.host = ModelHost(config)
    return app


def serve(config: ServerConfig) -> None:
    """Blocking entry point: load the model, then serve the protocol."""
    import uvicorn

    app = build_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="info")
