from __future__ import annotations

import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from steppref import kernels
from steppref.corpus import PairRecord, Problem, Rationale, RationaleRecord
from steppref.synthworld import (
    SynthConfig,
    _apply,
    _fmt_step,
    parse_question,
    simulate_solution,
)


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    # Trigger JIT compilation up front so per-test runtime budgets measure
    # the algorithms, not numba's compiler.
    a = np.array([0, 1, 2], dtype=np.int64)
    b = np.array([0, 2], dtype=np.int64)
    kernels.levenshtein(a, b)
    logits = np.zeros((9, 3))
    ctx = np.array([0, 1], dtype=np.int64)
    tok = np.array([1, 2], dtype=np.int64)
    kernels.seq_logprob(logits, ctx, tok)
    kernels.add_seq_grad(logits, ctx, tok, 0.5, np.zeros_like(logits))


def make_rationale(rng: np.random.Generator, label: str = "ungraded",
                   with_conclusion: bool = True) -> Rationale:
    words = ["alpha", "beta", "gamma", "delta", "eps", "7", "13", "x"]
    n_steps = int(rng.integers(1, 5))
    steps = tuple(
        " ".join(words[int(i)] for i in rng.integers(0, len(words), size=rng.integers(2, 6)))
        for _ in range(n_steps)
    )
    conclusion = f"The answer is {int(rng.integers(0, 100))}." if with_conclusion else None
    extracted = None
    if label == "correct":
        extracted = str(int(rng.integers(0, 100)))
    elif label == "incorrect" and rng.random() < 0.7:
        extracted = str(int(rng.integers(0, 100)))
    return Rationale(steps=steps, conclusion=conclusion, producer="SFT",
                     label=label, extracted_answer=extracted)


def make_pair_record(rng: np.random.Generator, granular: bool = False) -> PairRecord:
    chosen = make_rationale(rng, "correct")
    rejected = make_rationale(rng, "incorrect", with_conclusion=False)
    if granular:
        return PairRecord(
            problem_id=f"p{int(rng.integers(0, 1000)):04d}",
            input="question text\nstep one",
            chosen=chosen,
            rejected=rejected,
            granularity="granular-full",
            pit_index=int(rng.integers(1, 5)),
        )
    return PairRecord(
        problem_id=f"p{int(rng.integers(0, 1000)):04d}",
        input="question text",
        chosen=chosen,
        rejected=rejected,
        granularity="outcome",
        pit_index=None,
    )


def trace_with_error(problem: Problem, cfg: SynthConfig, error_at: int,
                     delta: int = 2) -> Rationale:
    """Gold chain corrupted at `error_at` (1-based), propagated faithfully."""
    start, ops = parse_question(problem.question)
    steps = []
    value = start
    for i, (op, operand) in enumerate(ops, start=1):
        declared = _apply(op, value, operand)
        if i == error_at:
            declared += delta
        steps.append(_fmt_step(op, operand, value, declared))
        value = declared
    return Rationale(
        steps=tuple(steps),
        conclusion=None,
        producer="SFT",
        label="incorrect",
        extracted_answer=str(value),
    )


def correct_rationale(problem: Problem, cfg: SynthConfig) -> Rationale:
    zero = SynthConfig(t=cfg.t, epsilon=0.0, value_range=cfg.value_range,
                       seed=cfg.seed)
    return simulate_solution(problem, zero, draw_seed=0).rationale


class StubHandler(BaseHTTPRequestHandler):
    def do_POST(self):  # noqa: N802 - http.server API
        server = self.server
        with server.lock:
            server.active += 1
            server.peak = max(server.peak, server.active)
        try:
            length = int(self.headers.get("Content-Length", "0"))
            payload = json.loads(self.rfile.read(length) or b"{}")
            with server.lock:
                server.calls.append(payload)
            if server.delay_s:
                time.sleep(server.delay_s)
            status, body = server.respond(payload)
            data = json.dumps(body).encode()
            self.send_response(status)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(data)))
            self.end_headers()
            self.wfile.write(data)
        finally:
            with server.lock:
                server.active -= 1

    def log_message(self, *args):  # silence request logging
        pass


class StubServer:
    """Scriptable completions endpoint for client tests."""

    def __init__(self, respond, delay_s: float = 0.0):
        self.httpd = ThreadingHTTPServer(("127.0.0.1", 0), StubHandler)
        self.httpd.respond = respond
        self.httpd.delay_s = delay_s
        self.httpd.lock = threading.Lock()
        self.httpd.active = 0
        self.httpd.peak = 0
        self.httpd.calls = []
        self.thread = threading.Thread(target=self.httpd.serve_forever, daemon=True)
        self.thread.start()

    @property
    def url(self) -> str:
        host, port = self.httpd.server_address
        return f"http://{host}:{port}/v1/completions"

    @property
    def peak_concurrency(self) -> int:
        return self.httpd.peak

    @property
    def calls(self) -> list:
        return self.httpd.calls

    def close(self) -> None:
        self.httpd.shutdown()
        self.httpd.server_close()


@pytest.fixture
def stub_server():
    servers = []

    def factory(respond, delay_s: float = 0.0) -> StubServer:
        server = StubServer(respond, delay_s)
        servers.append(server)
        return server

    yield factory
    for server in servers:
        server.close()


@pytest.fixture(autouse=True)
def fast_backoff(monkeypatch):
    monkeypatch.setattr("steppref.genclient.BACKOFF_INITIAL_S", 0.01)
    monkeypatch.setattr("steppref.genclient.REQUEST_TIMEOUT_S", 5.0)
