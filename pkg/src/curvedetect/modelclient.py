"""Wire clients for external generation, scoring, and mask-fill backends.

One dialect is spoken: OpenAI-compatible /v1/completions (plain and
echo-logprob scoring) plus two minimal native routes, POST /score and
POST /fill. Every successful, validated response is stored in a
content-addressed on-disk cache keyed by (endpoint identity, request
kind, canonicalized body), so a warm-cache run never touches the network
and experiments replay offline.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import re
import threading
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from .errors import (
    CapabilityError,
    FillProtocolError,
    OfflineError,
    ProtocolError,
    TransportError,
    ValidationError,
)
from .perturb import SENTINEL_RE, FillBackend, FillRequest
from .scorer import ScoreReport, ScorerBackend
from .textpool import GeneratorBackend
from .util import atomic_write_bytes, canonical_json, normalize_ws


@dataclass(frozen=True)
class GenerationParams:
    """Sampling settings forwarded to generator backends.

    Defaults are recorded in every experiment manifest so runs stay
    attributable even where a model server ignores a field.
    """

    max_tokens: int = 200
    temperature: float = 1.0
    top_p: float = 1.0
    stop: tuple[str, ...] | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ValidationError("temperature must be >= 0")
        if not 0 < self.top_p <= 1:
            raise ValidationError("top_p must be in (0, 1]")
        if self.max_tokens < 0:
            raise ValidationError("max_tokens must be >= 0")

    def to_dict(self) -> dict:
        d: dict[str, Any] = {
            "max_tokens": self.max_tokens,
            "temperature": self.temperature,
            "top_p": self.top_p,
        }
        if self.stop is not None:
            d["stop"] = list(self.stop)
        if self.seed is not None:
            d["seed"] = self.seed
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GenerationParams":
        return cls(
            max_tokens=d.get("max_tokens", 200),
            temperature=d.get("temperature", 1.0),
            top_p=d.get("top_p", 1.0),
            stop=tuple(d["stop"]) if d.get("stop") else None,
            seed=d.get("seed"),
        )


def _env_key_name(alias: str) -> str:
    return "CURVEDETECT_API_KEY_" + re.sub(r"[^A-Za-z0-9]", "_", alias).upper()


@dataclass
class EndpointConfig:
    """One reachable model server.

    The api_key never participates in the endpoint identity (and thus in
    cache keys) and is never serialized; it comes from the config directly
    or from the CURVEDETECT_API_KEY_<ALIAS> environment variable.
    """

    base_url: str
    model_name: str
    alias: str = ""
    api_key: str | None = field(default=None, repr=False)
    timeout_ms: int = 30_000
    max_retries: int = 3
    rate_limit: float | None = None
    score_via: str = "echo"  # "echo" (completions echo+logprobs) or "native" (/score)
    capabilities: tuple[str, ...] = ("generate", "score", "fill")

    def __post_init__(self):
        if self.timeout_ms <= 0:
            raise ValidationError("timeout_ms must be > 0")
        if self.max_retries < 0:
            raise ValidationError("max_retries must be >= 0")
        if self.rate_limit is not None and self.rate_limit <= 0:
            raise ValidationError("rate_limit must be > 0")
        if self.score_via not in ("echo", "native"):
            raise ValidationError('score_via must be "echo" or "native"')

    @property
    def identity(self) -> str:
        return f"{self.model_name}@{self.base_url}"

    def resolve_api_key(self) -> str | None:
        if self.api_key:
            return self.api_key
        return os.environ.get(_env_key_name(self.alias)) if self.alias else None

    def to_dict(self) -> dict:
        return {
            "base_url": self.base_url,
            "model_name": self.model_name,
            "alias": self.alias,
            "timeout_ms": self.timeout_ms,
            "max_retries": self.max_retries,
            "rate_limit": self.rate_limit,
            "score_via": self.score_via,
            "capabilities": list(self.capabilities),
        }


@dataclass(frozen=True)
class CacheEntry:
    key: str
    response_body: bytes
    created_at: float


class ResponseCache:
    """Directory of content-addressed response files.

    Entries are written atomically (temp file, then rename); a corrupted
    entry is treated as a miss and only invalidates itself. Lookups never
    mutate entries.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def request_key(endpoint_identity: str, kind: str, body: dict) -> str:
        material = canonical_json(
            {"endpoint": endpoint_identity, "kind": kind, "body": body}
        )
        return hashlib.sha256(material.encode("utf-8")).hexdigest()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str) -> CacheEntry | None:
        path = self._path(key)
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
            return CacheEntry(
                key=key,
                response_body=payload["body"].encode("utf-8"),
                created_at=payload["created_at"],
            )
        except (OSError, ValueError, KeyError):
            return None

    def put(self, key: str, response_body: bytes) -> None:
        payload = {
            "key": key,
            "created_at": time.time(),
            "body": response_body.decode("utf-8"),
        }
        atomic_write_bytes(self._path(key), json.dumps(payload).encode("utf-8"))


class Transport(ABC):
    """POSTs a JSON body, returns (status_code, raw_body_bytes)."""

    @abstractmethod
    def post(self, url: str, body: dict, headers: dict, timeout: float) -> tuple[int, bytes]:
        ...


class RequestsTransport(Transport):
    def post(self, url: str, body: dict, headers: dict, timeout: float) -> tuple[int, bytes]:
        import requests

        try:
            resp = requests.post(url, json=body, headers=headers, timeout=timeout)
        except requests.RequestException as e:
            raise TransportError(f"POST {url}: {e}") from e
        return resp.status_code, resp.content


class OfflineTransport(Transport):
    """Fails every call; used with --offline so only the cache answers."""

    def post(self, url: str, body: dict, headers: dict, timeout: float) -> tuple[int, bytes]:
        raise OfflineError(f"offline mode: refused network call to {url}")


class RateLimiter:
    """Spaces dispatches at least 1/rate seconds apart (thread-safe)."""

    def __init__(self, rate: float, clock=time.monotonic, sleep=time.sleep):
        self.interval = 1.0 / rate
        self._clock = clock
        self._sleep = sleep
        self._next: float | None = None
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            now = self._clock()
            if self._next is None:
                self._next = now
            wait = self._next - now
            if wait > 0:
                self._sleep(wait)
                now = self._clock()
            self._next = max(now, self._next) + self.interval


class ModelClient:
    """HTTP client with retries, rate limiting, and response caching.

    Transient failures (connection errors, HTTP 429 and 5xx) are retried
    with exponential backoff up to the endpoint's max_retries; protocol
    violations are permanent. Responses are cached only after they parse
    and validate, so the cache can never replay a bad answer.
    """

    def __init__(
        self,
        cache_dir: str | Path | None = None,
        transport: Transport | None = None,
        offline: bool = False,
        sleep=time.sleep,
        backoff_base: float = 0.5,
        backoff_cap: float = 8.0,
    ):
        self.cache = ResponseCache(cache_dir) if cache_dir else None
        if offline:
            transport = OfflineTransport()
        self.transport = transport or RequestsTransport()
        self._sleep = sleep
        self._backoff_base = backoff_base
        self._backoff_cap = backoff_cap
        self._limiters: dict[str, RateLimiter] = {}
        self._lock = threading.Lock()

    def _limiter(self, endpoint: EndpointConfig) -> RateLimiter | None:
        if endpoint.rate_limit is None:
            return None
        with self._lock:
            limiter = self._limiters.get(endpoint.identity)
            if limiter is None:
                limiter = RateLimiter(endpoint.rate_limit)
                self._limiters[endpoint.identity] = limiter
            return limiter

    def _request(
        self, endpoint: EndpointConfig, kind: str, path: str, body: dict
    ) -> tuple[dict, str | None, bool]:
        """Returns (parsed_json, cache_key, from_cache)."""
        key = None
        if self.cache is not None:
            key = ResponseCache.request_key(endpoint.identity, kind, body)
            entry = self.cache.get(key)
            if entry is not None:
                try:
                    return json.loads(entry.response_body), key, True
                except ValueError:
                    pass  # corrupt entry: fall through and refetch

        headers = {"Content-Type": "application/json"}
        api_key = endpoint.resolve_api_key()
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"
        url = endpoint.base_url.rstrip("/") + path
        timeout = endpoint.timeout_ms / 1000.0
        limiter = self._limiter(endpoint)

        last_error: Exception | None = None
        for attempt in range(endpoint.max_retries + 1):
            if attempt:
                self._sleep(min(self._backoff_cap, self._backoff_base * 2 ** (attempt - 1)))
            if limiter is not None:
                limiter.acquire()
            try:
                status, raw = self.transport.post(url, body, headers, timeout)
            except OfflineError:
                raise
            except TransportError as e:
                last_error = e
                continue
            if status == 200:
                try:
                    return json.loads(raw), key, False
                except ValueError as e:
                    raise ProtocolError(f"{url}: response is not JSON: {e}") from e
            if status == 429 or 500 <= status < 600:
                last_error = TransportError(f"{url}: HTTP {status}")
                continue
            raise ProtocolError(f"{url}: HTTP {status}: {raw[:200]!r}")
        raise TransportError(
            f"{url}: giving up after {endpoint.max_retries + 1} attempts: {last_error}"
        )

    def _commit(self, key: str | None, parsed: dict, from_cache: bool = False) -> None:
        if key is not None and self.cache is not None and not from_cache:
            self.cache.put(key, json.dumps(parsed).encode("utf-8"))

    # ---------------------------------------------------------- operations

    def complete(self, endpoint: EndpointConfig, prompt: str, params: GenerationParams) -> str:
        """Completion text (prompt excluded) via /v1/completions."""
        body: dict[str, Any] = {
            "model": endpoint.model_name,
            "prompt": prompt,
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
            "top_p": params.top_p,
        }
        if params.stop is not None:
            body["stop"] = list(params.stop)
        if params.seed is not None:
            body["seed"] = params.seed
        parsed, key, from_cache = self._request(endpoint, "completions", "/v1/completions", body)
        try:
            text = parsed["choices"][0]["text"]
        except (KeyError, IndexError, TypeError) as e:
            raise ProtocolError(f"completions response missing choices[0].text: {e}") from e
        if not isinstance(text, str) or not text.strip():
            raise ProtocolError("backend returned an empty completion")
        self._commit(key, parsed, from_cache)
        return text

    def score_remote(self, endpoint: EndpointConfig, text: str) -> ScoreReport:
        """Total log-probability of text under the endpoint's model.

        score_via "native" posts /score and sums token_logprobs; "echo"
        posts a completions request with echo enabled and zero new tokens,
        skipping the leading null logprob that models emit for the first
        token.
        """
        if not text or not text.strip():
            raise ValidationError("cannot score empty text")
        if "score" not in endpoint.capabilities:
            raise CapabilityError(f"{endpoint.identity} is not scoreable")
        if endpoint.score_via == "native":
            body = {"model": endpoint.model_name, "text": text}
            parsed, key, from_cache = self._request(endpoint, "score", "/score", body)
            lps = parsed.get("token_logprobs")
            if not isinstance(lps, list) or not lps:
                raise ProtocolError("native /score response lacks token_logprobs")
            if any(not isinstance(x, (int, float)) for x in lps):
                raise ProtocolError("token_logprobs contains non-numeric entries")
            self._commit(key, parsed, from_cache)
            return ScoreReport(total_logprob=math.fsum(lps), token_count=len(lps))

        body = {
            "model": endpoint.model_name,
            "prompt": text,
            "max_tokens": 0,
            "echo": True,
            "logprobs": 0,
        }
        parsed, key, from_cache = self._request(endpoint, "completions", "/v1/completions", body)
        try:
            logprobs = parsed["choices"][0]["logprobs"]
        except (KeyError, IndexError, TypeError):
            logprobs = None
        if not isinstance(logprobs, dict) or "token_logprobs" not in logprobs:
            raise CapabilityError(
                f"{endpoint.identity} does not return echoed token logprobs"
            )
        lps = logprobs["token_logprobs"]
        tokens = logprobs.get("tokens")
        if tokens is not None and len(tokens) != len(lps):
            raise ProtocolError("tokens and token_logprobs lengths differ")
        start = 1 if lps and lps[0] is None else 0
        kept = lps[start:]
        if not kept:
            raise ProtocolError("no scoreable token logprobs in echo response")
        if any(not isinstance(x, (int, float)) for x in kept):
            raise ProtocolError("null logprob beyond the first token")
        per_token = None
        if tokens is not None:
            per_token = list(zip(tokens[start:], [float(x) for x in kept]))
        self._commit(key, parsed, from_cache)
        return ScoreReport(
            total_logprob=math.fsum(kept), token_count=len(kept), per_token=per_token
        )

    def fill_mask_remote(
        self, endpoint: EndpointConfig, masked_text: str, n_sentinels: int
    ) -> list[str]:
        """Fill strings for a sentinel-masked text via the native /fill route.

        A response with missing fills is retried (fresh request) up to the
        endpoint's max_retries before giving up.
        """
        if "fill" not in endpoint.capabilities:
            raise CapabilityError(f"{endpoint.identity} cannot fill masks")
        markers = SENTINEL_RE.findall(masked_text)
        if n_sentinels < 1 or markers != [str(i) for i in range(n_sentinels)]:
            raise ValidationError(
                f"masked text must contain sentinels 0..{n_sentinels - 1} in order"
            )
        body = {"model": endpoint.model_name, "text": masked_text}
        last: Exception | None = None
        for _ in range(endpoint.max_retries + 1):
            parsed, key, from_cache = self._request(endpoint, "fill", "/fill", body)
            out = parsed.get("text")
            if not isinstance(out, str):
                raise ProtocolError('/fill response lacks a string "text" field')
            try:
                fills = parse_sentinel_fills(out, n_sentinels)
            except FillProtocolError as e:
                last = e
                if from_cache:
                    break  # a cached response will never change; stop retrying
                continue
            self._commit(key, parsed, from_cache)
            return fills
        raise FillProtocolError(
            f"{endpoint.identity}: fill count mismatch after retries: {last}"
        )


def parse_sentinel_fills(output: str, n_sentinels: int) -> list[str]:
    """Split a sentinel-delimited fill response into one string per sentinel.

    fills[j] is the text between <extra_id_j> and the next sentinel (or the
    end of output), whitespace-normalized. All of 0..n_sentinels-1 must be
    present, in order.
    """
    matches = list(SENTINEL_RE.finditer(output))
    indices = [int(m.group(1)) for m in matches]
    expected = list(range(n_sentinels))
    if indices[: len(expected)] != expected:
        raise FillProtocolError(
            f"expected sentinels {expected}, response has {indices}"
        )
    fills = []
    for j in range(n_sentinels):
        start = matches[j].end()
        end = matches[j + 1].start() if j + 1 < len(matches) else len(output)
        fills.append(normalize_ws(output[start:end]))
    return fills


# ----------------------------------------------------------------- backends

class RemoteGenerator(GeneratorBackend):
    """GeneratorBackend speaking /v1/completions through a ModelClient."""

    def __init__(self, client: ModelClient, endpoint: EndpointConfig, identity: str | None = None):
        if "generate" not in endpoint.capabilities:
            raise CapabilityError(f"{endpoint.identity} cannot generate")
        self.client = client
        self.endpoint = endpoint
        self.identity = identity or endpoint.identity

    def generate(self, prompt: str, params: GenerationParams, seed: int) -> str:
        if params.seed is None:
            params = replace(params, seed=seed)
        completion = self.client.complete(self.endpoint, prompt, params)
        joiner = "" if completion[:1].isspace() else " "
        return prompt + joiner + completion


class RemoteScorer(ScorerBackend):
    """ScorerBackend adapter over score_remote."""

    def __init__(self, client: ModelClient, endpoint: EndpointConfig, identity: str | None = None):
        self.client = client
        self.endpoint = endpoint
        self.identity = identity or endpoint.identity

    def logprob(self, text: str, per_token: bool = False) -> ScoreReport:
        report = self.client.score_remote(self.endpoint, text)
        if not per_token and report.per_token is not None:
            return ScoreReport(
                total_logprob=report.total_logprob, token_count=report.token_count
            )
        return report


class RemoteFillBackend(FillBackend):
    """FillBackend adapter over fill_mask_remote."""

    def __init__(self, client: ModelClient, endpoint: EndpointConfig, identity: str | None = None):
        self.client = client
        self.endpoint = endpoint
        self.identity = identity or endpoint.identity

    def fill(self, request: FillRequest, rng) -> list[str]:
        return self.client.fill_mask_remote(
            self.endpoint, request.masked_text, request.n_sentinels
        )
