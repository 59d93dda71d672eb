"""Command-line entry point.

Subcommands: sample, decode, score, sweep, serve-check. Results go to
stdout as JSONL (or a single JSON document for score); diagnostics and
the effective-config echo go to stderr. Exit codes: 0 success, 2 usage
error, 3 backend error; errors are also emitted as one JSON object on
stderr.
"""

from __future__ import annotations

import argparse
import base64
import json
import math
import os
import sys
from pathlib import Path
from typing import IO, Sequence

import numpy as np

from . import __version__
from .backend import load_backend
from .baselines import greedy_decode, sc_vote, sr_refine, usc_select
from .consistency import SupportSpec, factuality_score
from .core import (
    BackendError,
    DecodeConfig,
    IdecError,
    ParseFailure,
    SamplingSpec,
    UsageError,
    stable_seed,
)
from .harness import (
    DEFAULT_K_GRID,
    SyntheticTaskSpec,
    cells_to_jsonl,
    generate_task,
    k_sweep,
    render_table,
    write_csv,
)
from .id_decoder import id_decode, write_trace
from .sampler import SampledResponse, sample_k
from .templating import build_base, load_template

DEFAULTS = {
    "template": "toy",
    "strategy": "temp:0.7",
    "k": 1,
    "seed": 0,
    "max_new_tokens": 64,
    "jobs": 1,
    "support": "f1:0.6",
    "methods": "greedy,id",
    "k_list": ",".join(str(k) for k in DEFAULT_K_GRID),
    "seeds": 5,
}


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(obj, dict):
        raise UsageError("config file must hold a JSON object")
    return obj


def _resolve(args: argparse.Namespace, config: dict, key: str):
    """Flags beat the config file, which beats built-in defaults."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in config:
        return config[key]
    return DEFAULTS.get(key)


def _backend_spec(args: argparse.Namespace, config: dict) -> str:
    spec = getattr(args, "backend", None) or config.get("backend") or os.environ.get(
        "IDEC_BACKEND"
    )
    if not spec:
        raise UsageError("no backend: pass --backend, set config, or set IDEC_BACKEND")
    return spec


def _read_questions(path: str) -> list[str]:
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read question file {path}: {exc}") from exc
    questions = [line.strip() for line in lines if line.strip()]
    if not questions:
        raise UsageError(f"question file {path} holds no questions")
    return questions


def _echo_config(stderr: IO[str], command: str, effective: dict) -> None:
    print(json.dumps({"config": {"command": command, **effective}}, sort_keys=True), file=stderr)


def _visible(tokens: Sequence[int], eos_id: int) -> list[int]:
    toks = list(tokens)
    if toks and toks[-1] == eos_id:
        toks.pop()
    return toks


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_sample(args: argparse.Namespace, stdout: IO[str], stderr: IO[str]) -> int:
    config = _load_config(args.config)
    backend = load_backend(_backend_spec(args, config))
    template = load_template(_resolve(args, config, "template"))
    k = int(_resolve(args, config, "k"))
    seed = int(_resolve(args, config, "seed"))
    spec = SamplingSpec.parse(
        _resolve(args, config, "strategy"),
        max_new_tokens=int(_resolve(args, config, "max_new_tokens")),
        seed=seed,
    )
    questions = _read_questions(args.question_file)
    _echo_config(
        stderr,
        "sample",
        {"k": k, "seed": seed, "strategy": spec.describe(), "template": template.id},
    )
    for qi, question in enumerate(questions):
        prompt = build_base(template, question, backend)
        for resp in sample_k(backend, prompt, k, spec, seed=stable_seed(seed, "cli-sample", qi)):
            print(
                json.dumps(
                    {
                        "question_index": qi,
                        "question": question,
                        "index": resp.index,
                        "tokens": list(resp.tokens),
                        "text": resp.text,
                        "ended_with_eos": resp.ended_with_eos,
                        "rng_label": resp.rng_label,
                    },
                    sort_keys=True,
                ),
                file=stdout,
            )
    return 0


def _load_samples(path: str, spec: SamplingSpec) -> dict[int, list[SampledResponse]]:
    grouped: dict[int, list[SampledResponse]] = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        obj = json.loads(line)
        resp = SampledResponse(
            tokens=tuple(obj["tokens"]),
            text=obj["text"],
            index=int(obj["index"]),
            spec=spec,
            rng_label=obj.get("rng_label", ""),
            ended_with_eos=bool(obj["ended_with_eos"]),
        )
        grouped.setdefault(int(obj["question_index"]), []).append(resp)
    return grouped


def cmd_decode(args: argparse.Namespace, stdout: IO[str], stderr: IO[str]) -> int:
    config = _load_config(args.config)
    backend = load_backend(_backend_spec(args, config))
    template = load_template(_resolve(args, config, "template"))
    method = args.method
    k = int(_resolve(args, config, "k"))
    seed = int(_resolve(args, config, "seed"))
    max_new = int(_resolve(args, config, "max_new_tokens"))
    spec = SamplingSpec.parse(
        _resolve(args, config, "strategy"), max_new_tokens=max_new, seed=seed
    )
    questions = _read_questions(args.question_file)
    eos = backend.info().eos_id
    presampled = _load_samples(args.samples, spec) if args.samples else None
    _echo_config(
        stderr,
        "decode",
        {
            "method": method,
            "k": k,
            "seed": seed,
            "strategy": spec.describe(),
            "template": template.id,
            "max_new_tokens": max_new,
        },
    )
    for qi, question in enumerate(questions):
        record: dict
        trace_result = None
        responses: list[SampledResponse] = []
        if method != "greedy":
            if presampled is not None:
                responses = presampled.get(qi, [])[:k]
                if len(responses) != k:
                    raise UsageError(f"samples file has {len(responses)} responses for question {qi}, need k={k}")
            else:
                prompt = build_base(template, question, backend)
                responses = sample_k(
                    backend, prompt, k, spec, seed=stable_seed(seed, "cli-decode", qi)
                )
        if method == "greedy":
            result = greedy_decode(backend, question, template, max_new)
            trace_result = result
            record = {
                "question": question,
                "text": result.text,
                "tokens": _visible(result.output, eos),
                "stop_reason": result.stop_reason,
                "flags": list(result.flags),
                "branch_inputs": [list(q) for q in result.branch_inputs],
            }
        elif method == "id":
            cfg = DecodeConfig(
                k=k, max_new_tokens=max_new, sampling=spec, seed=seed, template_id=template.id
            )
            result = id_decode(backend, question, responses, template, cfg)
            trace_result = result
            record = {
                "question": question,
                "text": result.text,
                "tokens": _visible(result.output, eos),
                "stop_reason": result.stop_reason,
                "flags": list(result.flags),
                "branch_inputs": [list(q) for q in result.branch_inputs],
            }
        elif method == "sr":
            result = sr_refine(backend, question, responses, template, max_new)
            trace_result = result
            record = {
                "question": question,
                "text": result.text,
                "tokens": _visible(result.output, eos),
                "stop_reason": result.stop_reason,
                "flags": list(result.flags),
                "branch_inputs": [list(q) for q in result.branch_inputs],
            }
        elif method == "usc":
            sel = usc_select(backend, question, responses, template, max_new)
            record = {
                "question": question,
                "text": sel.text,
                "tokens": _visible(responses[sel.index - 1].tokens, eos),
                "stop_reason": None,
                "flags": (["usc_fallback"] if sel.fallback else []) + [f"selected:{sel.index}"],
                "branch_inputs": None,
            }
        elif method == "sc":
            try:
                winner = sc_vote(responses, lambda t: t.split()[-1] if t.split() else None)
                record = {
                    "question": question,
                    "text": winner,
                    "tokens": [],
                    "stop_reason": None,
                    "flags": [],
                    "branch_inputs": None,
                }
            except ParseFailure:
                record = {
                    "question": question,
                    "text": "",
                    "tokens": [],
                    "stop_reason": None,
                    "flags": ["vote_unparseable"],
                    "branch_inputs": None,
                }
        else:
            raise UsageError(f"unknown method {method!r}")
        if args.trace and trace_result is not None:
            write_trace(trace_result, f"{args.trace}.q{qi}.jsonl")
        print(json.dumps(record, sort_keys=True), file=stdout)
    return 0


def cmd_score(args: argparse.Namespace, stdout: IO[str], stderr: IO[str]) -> int:
    config = _load_config(args.config)
    fn = SupportSpec.parse(_resolve(args, config, "support"))
    response_text = Path(args.response).read_text()
    samples: list[str] = []
    for line in Path(args.samples).read_text().splitlines():
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            samples.append(obj["text"] if isinstance(obj, dict) and "text" in obj else line)
        except json.JSONDecodeError:
            samples.append(line)
    _echo_config(stderr, "score", {"support": fn.describe(), "samples": len(samples)})
    report = factuality_score(response_text, samples, fn)
    print(report.to_json(), file=stdout)
    return 0


def cmd_sweep(args: argparse.Namespace, stdout: IO[str], stderr: IO[str]) -> int:
    config = _load_config(args.config)
    task_spec = SyntheticTaskSpec.from_json(args.task_spec)
    methods = [m.strip() for m in _resolve(args, config, "methods").split(",") if m.strip()]
    k_grid = [int(x) for x in str(_resolve(args, config, "k_list")).split(",") if str(x).strip()]
    n_seeds = int(_resolve(args, config, "seeds"))
    seed = int(_resolve(args, config, "seed"))
    jobs = int(_resolve(args, config, "jobs"))
    spec = SamplingSpec.parse(
        _resolve(args, config, "strategy"),
        max_new_tokens=4,
        seed=seed,
    )
    seeds = [stable_seed(seed, "sweep-seed", i) for i in range(n_seeds)]
    task, backend = generate_task(task_spec)
    _echo_config(
        stderr,
        "sweep",
        {
            "methods": methods,
            "k_list": k_grid,
            "seeds": n_seeds,
            "seed": seed,
            "strategy": spec.describe(),
            "task": vars(task_spec) | {},
        },
    )
    report = k_sweep(
        task, backend, methods, k_grid, seeds, spec, template_id="toy", jobs=jobs
    )
    stdout.write(cells_to_jsonl(report))
    print(render_table(report), file=stderr)
    if args.csv:
        write_csv(report, args.csv)
    return 0


def _probe_serve(endpoint: str, stdout: IO[str]) -> bool:
    import httpx

    base = endpoint.rstrip("/")
    ok = True

    def report(name: str, passed: bool, detail: str = "") -> None:
        nonlocal ok
        ok = ok and passed
        suffix = f" ({detail})" if detail else ""
        print(f"PROBE {name}: {'PASS' if passed else 'FAIL'}{suffix}", file=stdout)

    with httpx.Client(base_url=base, timeout=60.0) as client:
        info = client.get("/v1/info").json()
        schema_ok = (
            isinstance(info.get("vocab_size"), int)
            and isinstance(info.get("eos_id"), int)
            and isinstance(info.get("model"), str)
            and isinstance(info.get("max_prefix"), int)
            and 0 <= info["eos_id"] < info["vocab_size"]
        )
        report("info-schema", schema_ok, json.dumps(info)[:120])
        if not schema_ok:
            return False
        probe_tokens = [info["bos_id"] if info.get("bos_id") is not None else info["eos_id"]]

        def fetch_raw() -> np.ndarray:
            obj = client.post("/v1/next_logprobs", json={"tokens": probe_tokens}).json()
            return np.frombuffer(base64.b64decode(obj["logprobs_b64"]), dtype="<f4").astype(
                np.float64
            )

        arr = fetch_raw()
        size_ok = arr.size == info["vocab_size"]
        m = float(np.max(arr))
        lse = m + math.log(float(np.sum(np.exp(arr - m))))
        report(
            "normalization",
            size_ok and abs(lse) <= 1e-4,
            f"logsumexp={lse:.2e}, n={arr.size}",
        )
        arr2 = fetch_raw()
        drift = float(np.max(np.abs(arr - arr2)))
        report("determinism", drift <= 1e-6, f"max|diff|={drift:.2e}")
        text = "Hello, world! Tokens 0-9 round-trip."
        toks = client.post("/v1/tokenize", json={"text": text}).json()["tokens"]
        back = client.post("/v1/detokenize", json={"tokens": toks}).json()["text"]
        report("round-trip", back == text, repr(back[:40]))
    return ok


def cmd_serve_check(args: argparse.Namespace, stdout: IO[str], stderr: IO[str]) -> int:
    _echo_config(stderr, "serve-check", {"endpoint": args.endpoint})
    try:
        passed = _probe_serve(args.endpoint, stdout)
    except Exception as exc:  # transport/protocol failure is a backend error
        raise BackendError(f"serve-check against {args.endpoint} failed: {exc}") from exc
    return 0 if passed else 3


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, *, with_backend: bool = True) -> None:
    p.add_argument("--config", help="JSON config file (flags override it)")
    if with_backend:
        p.add_argument("--backend", help="backend spec: toy:<path> or http(s)://<url> (default $IDEC_BACKEND)")
    p.add_argument("--template", help="template id or JSON path")
    p.add_argument("--strategy", help="greedy | temp:T | nucleus:P")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idec", description=__doc__)
    parser.add_argument("--version", action="version", version=f"idec {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="draw k responses per question")
    _add_common(p)
    p.add_argument("--k", type=int)
    p.add_argument("--question-file", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("decode", help="decode with a method")
    _add_common(p)
    p.add_argument("--method", required=True, choices=["greedy", "id", "usc", "sr", "sc"])
    p.add_argument("--k", type=int)
    p.add_argument("--question-file", required=True)
    p.add_argument("--samples", help="reuse responses from a sample JSONL file")
    p.add_argument("--trace", help="path prefix for per-question trace JSONL files")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="consistency-score a response against samples")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--response", required=True)
    p.add_argument("--samples", required=True)
    p.add_argument("--support", help="exact | f1:TAU")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("sweep", help="run a (method, k, seed) sweep on a synthetic task")
    _add_common(p, with_backend=False)
    p.add_argument("--task-spec", required=True, help="JSON task spec file")
    p.add_argument("--methods", help="comma-separated method list")
    p.add_argument("--k-list", dest="k_list", help="comma-separated k grid")
    p.add_argument("--seeds", type=int, help="number of seeds")
    p.add_argument("--jobs", type=int)
    p.add_argument("--csv", help="also write cells as CSV")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("serve-check", help="probe a logits server for protocol conformance")
    p.add_argument("--endpoint", required=True)
    p.set_defaults(func=cmd_serve_check)
    return parser


def main(
    argv: Sequence[str] | None = None,
    stdout: IO[str] | None = None,
    stderr: IO[str] | None = None,
) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args, stdout, stderr)
    except UsageError as exc:
        print(json.dumps({"error": {"code": "usage", "message": str(exc)}}), file=stderr)
        return 2
    except BackendError as exc:
        print(json.dumps({"error": {"code": "backend", "message": str(exc)}}), file=stderr)
        return 3
    except IdecError as exc:
        print(json.dumps({"error": {"code": "internal", "message": str(exc)}}), file=stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
