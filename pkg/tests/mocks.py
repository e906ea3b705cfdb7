"""Shared test doubles: scripted transports, stub scorers, fake clocks."""

from __future__ import annotations

import json

from curvedetect.errors import TransportError
from curvedetect.modelclient import Transport
from curvedetect.scorer import ScoreReport, ScorerBackend
from curvedetect.textpool import GeneratorBackend


class MockTransport(Transport):
    """Replays a script of responses, or defers to a handler function.

    Script entries are (status, payload) where payload is a dict (JSON
    encoded for you), raw bytes, or an Exception instance to raise.
    Every dispatched call is recorded in .calls as (url, body, headers).
    """

    def __init__(self, script=None, handler=None):
        self.script = list(script or [])
        self.handler = handler
        self.calls: list[tuple[str, dict, dict]] = []

    def post(self, url, body, headers, timeout):
        self.calls.append((url, body, headers))
        if self.handler is not None:
            status, payload = self.handler(url, body)
        elif self.script:
            status, payload = self.script.pop(0)
        else:
            raise AssertionError(f"unexpected request to {url}")
        if isinstance(payload, Exception):
            raise payload
        if isinstance(payload, dict):
            payload = json.dumps(payload).encode("utf-8")
        return status, payload


class FlakyTransport(Transport):
    """Always raises a retryable transport error."""

    def __init__(self):
        self.calls = 0

    def post(self, url, body, headers, timeout):
        self.calls += 1
        raise TransportError("synthetic outage")


class FakeClock:
    """Manual monotonic clock with a sleep that advances it."""

    def __init__(self):
        self.now = 0.0

    def __call__(self) -> float:
        return self.now

    def sleep(self, seconds: float) -> None:
        self.now += seconds


class TableScorer(ScorerBackend):
    """Stub scorer: text -> pre-set (total_logprob, token_count)."""

    def __init__(self, table: dict, identity: str = "stub-scorer"):
        self.table = table
        self.identity = identity

    def logprob(self, text, per_token=False):
        value = self.table[text]
        if isinstance(value, Exception):
            raise value
        if isinstance(value, tuple):
            total, count = value
        else:
            total, count = value, 1
        return ScoreReport(total_logprob=total, token_count=count)


class TemplateGenerator(GeneratorBackend):
    """Deterministic fast generator: prompt plus n copies of a filler word."""

    def __init__(self, identity="template-gen", n_words=150, fail_prompts=()):
        self.identity = identity
        self.n_words = n_words
        self.fail_prompts = set(fail_prompts)
        self.calls = 0

    def generate(self, prompt, params, seed):
        self.calls += 1
        if prompt in self.fail_prompts:
            return prompt  # too short forever: a permanent quality failure
        return prompt + " " + " ".join(f"w{seed % 7}" for _ in range(self.n_words))
