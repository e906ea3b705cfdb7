"""Log-probability scoring backends.

The engine scores texts through the ScorerBackend contract. The built-in
backend is an additively smoothed n-gram language model with a fixed,
versioned tokenizer, so scores are reproducible across runs and platforms.
External model servers plug in through curvedetect.modelclient.
"""

from __future__ import annotations

import json
import math
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .util import atomic_write_text, fingerprint_texts

TOKENIZER_VERSION = 1

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"

_BOS_ID = -1
_EOS_ID = -2

_TOKEN_RE = re.compile(r"[^\W_]+|[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Versioned model tokenizer: lowercase, split words and punctuation.

    Alphanumeric runs become word tokens, every other non-space character
    becomes a single-character token. The reserved markers <s>, </s> and
    <unk> can never be produced (angle brackets split), so they are safe
    as internal sentinels.
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass
class ScoreReport:
    """Total natural-log probability of a text under one scorer.

    per_token is optional to keep memory bounded on large pools; when
    present its logprobs sum to total_logprob (within 1e-9).
    """

    total_logprob: float
    token_count: int
    per_token: list[tuple[str, float]] | None = None

    def __post_init__(self):
        if self.token_count < 1:
            raise ValidationError("ScoreReport requires token_count >= 1")
        if self.per_token is not None:
            s = math.fsum(lp for _, lp in self.per_token)
            if abs(s - self.total_logprob) > 1e-9:
                raise ValidationError(
                    f"per_token logprobs sum to {s}, expected {self.total_logprob}"
                )

    @property
    def mean_logprob(self) -> float:
        return self.total_logprob / self.token_count


class ScorerBackend(ABC):
    """Anything that can assign a total log-probability to a text.

    identity must be a stable string (model name + endpoint, or training
    fingerprint); score calls must be deterministic for a fixed identity.
    """

    identity: str

    @abstractmethod
    def logprob(self, text: str, per_token: bool = False) -> ScoreReport:
        """Score text; raises ValidationError on empty/untokenizable input."""


class NGramModel:
    """Add-k smoothed n-gram language model over the versioned tokenizer.

    Probabilities are P(w|ctx) = (c(ctx,w) + k) / (c(ctx) + k*D) where D is
    the size of the event domain: the vocabulary (corpus types plus the
    reserved <unk>) for unigram models, plus the end-of-text event </s> for
    order >= 2. Order >= 2 counts include begin padding contexts and one
    terminal </s> event per document; scoring a text never appends </s>,
    so fragments are scored as prefixes.
    """

    def __init__(
        self,
        order: int,
        smoothing_k: float,
        vocab: Sequence[str],
        counts: dict[tuple[int, ...], dict[int, int]],
        corpus_fingerprint: str,
    ):
        if order < 1:
            raise ValidationError("order must be >= 1")
        if smoothing_k <= 0:
            raise ValidationError("smoothing_k must be > 0")
        self.order = order
        self.smoothing_k = float(smoothing_k)
        self.vocab = list(vocab)  # corpus types sorted, then <unk>
        self.corpus_fingerprint = corpus_fingerprint
        self._id_of = {tok: i for i, tok in enumerate(self.vocab)}
        self._unk_id = self._id_of[UNK]
        self._counts = counts
        self._totals = {ctx: sum(c.values()) for ctx, c in counts.items()}
        # Event domain size for smoothing: vocab plus </s> when order >= 2.
        self.domain_size = len(self.vocab) + (1 if order >= 2 else 0)
        gen_ids = [i for i in range(len(self.vocab)) if i != self._unk_id]
        if order >= 2:
            gen_ids.append(_EOS_ID)
        self._gen_ids = np.array(sorted(gen_ids), dtype=np.int64)
        self._fallback_id = min(i for i in gen_ids if i >= 0)
        self._ctx_cache: dict[tuple[int, ...], tuple[np.ndarray, np.ndarray, int]] = {}

    # ----------------------------------------------------------- training

    @classmethod
    def train(cls, corpus: Sequence[str], order: int, smoothing_k: float) -> "NGramModel":
        if order < 1:
            raise ValidationError("order must be >= 1")
        if smoothing_k <= 0:
            raise ValidationError("smoothing_k must be > 0")
        docs = [tokenize(doc) for doc in corpus]
        if not corpus or not any(docs):
            raise ValidationError("training corpus is empty")
        types = sorted({tok for doc in docs for tok in doc})
        vocab = types + [UNK]
        id_of = {tok: i for i, tok in enumerate(vocab)}

        counts: dict[tuple[int, ...], dict[int, int]] = {}
        ctx_len = order - 1
        for doc in docs:
            if not doc:
                continue
            ids = [id_of[t] for t in doc]
            if order == 1:
                table = counts.setdefault((), {})
                for i in ids:
                    table[i] = table.get(i, 0) + 1
            else:
                padded = [_BOS_ID] * ctx_len + ids + [_EOS_ID]
                for t in range(ctx_len, len(padded)):
                    ctx = tuple(padded[t - ctx_len : t])
                    table = counts.setdefault(ctx, {})
                    ev = padded[t]
                    table[ev] = table.get(ev, 0) + 1
        return cls(order, smoothing_k, vocab, counts, fingerprint_texts(list(corpus)))

    # ------------------------------------------------------------ scoring

    def _event_prob(self, ctx: tuple[int, ...], event_id: int) -> float:
        c = self._counts.get(ctx)
        num = self.smoothing_k
        den = self.smoothing_k * self.domain_size
        if c is not None:
            num += c.get(event_id, 0)
            den += self._totals[ctx]
        return num / den

    def _context_ids(self, token_ids: list[int], position: int) -> tuple[int, ...]:
        ctx_len = self.order - 1
        if ctx_len == 0:
            return ()
        ctx = token_ids[max(0, position - ctx_len) : position]
        if len(ctx) < ctx_len:
            ctx = [_BOS_ID] * (ctx_len - len(ctx)) + ctx
        return tuple(ctx)

    def _to_ids(self, tokens: Sequence[str]) -> list[int]:
        unk = self._unk_id
        idx = self._id_of
        return [idx.get(t, unk) for t in tokens]

    def logprob(self, text: str, per_token: bool = False) -> ScoreReport:
        """Sum of ln P(w_t | context) over the tokens of text."""
        if not text or not text.strip():
            raise ValidationError("cannot score empty text")
        tokens = tokenize(text)
        if not tokens:
            raise ValidationError("text has no scoreable tokens")
        ids = self._to_ids(tokens)
        logs = []
        for t, event in enumerate(ids):
            ctx = self._context_ids(ids, t)
            logs.append(math.log(self._event_prob(ctx, event)))
        total = math.fsum(logs)
        detail = list(zip(tokens, logs)) if per_token else None
        return ScoreReport(total_logprob=total, token_count=len(tokens), per_token=detail)

    def conditional(self, context: Sequence[str]) -> dict[str, float]:
        """Full smoothed conditional distribution after the given context.

        Keys cover the whole event domain (vocabulary plus </s> for
        order >= 2); values sum to 1. Context tokens outside the
        vocabulary map to <unk>, missing context is padded with <s>.
        """
        ids = self._to_ids(list(context))
        ctx = self._context_ids(ids, len(ids))
        dist = {tok: self._event_prob(ctx, i) for i, tok in enumerate(self.vocab)}
        if self.order >= 2:
            dist[EOS] = self._event_prob(ctx, _EOS_ID)
        return dist

    # ----------------------------------------------------------- sampling

    def _ctx_arrays(self, ctx: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray, int]:
        cached = self._ctx_cache.get(ctx)
        if cached is None:
            table = self._counts.get(ctx, {})
            items = sorted(table.items())
            ids = np.array([i for i, _ in items], dtype=np.int64)
            cum = np.cumsum([c for _, c in items], dtype=np.int64)
            total = int(cum[-1]) if len(cum) else 0
            cached = (ids, cum, total)
            self._ctx_cache[ctx] = cached
        return cached

    def _draw(self, ctx: tuple[int, ...], temperature: float, greedy: bool,
              rng: np.random.Generator) -> int:
        gen_ids = self._gen_ids
        k = self.smoothing_k
        ids, cum, total = self._ctx_arrays(ctx)
        if greedy:
            if total == 0:
                # Unseen context: every event ties at the smoothing floor;
                # break the tie toward the lowest-id word token.
                return self._fallback_id
            counts = np.diff(cum, prepend=0)
            return int(ids[int(np.argmax(counts))])
        if temperature == 1.0:
            # Add-k is an exact mixture of the empirical distribution and a
            # uniform over the domain; sampling the mixture avoids building
            # the full probability vector at every step.
            d = len(gen_ids)
            if total > 0 and rng.random() < total / (total + k * d):
                r = int(rng.integers(total))
                return int(ids[int(np.searchsorted(cum, r, side="right"))])
            return int(gen_ids[int(rng.integers(d))])
        logits = np.full(len(gen_ids), math.log(k))
        if total:
            pos = np.searchsorted(gen_ids, ids)
            counts = np.diff(cum, prepend=0)
            logits[pos] = np.log(counts + k)
        logits /= temperature
        logits -= logits.max()
        probs = np.exp(logits)
        probs /= probs.sum()
        return int(rng.choice(gen_ids, p=probs))

    def sample(
        self,
        prompt: str,
        max_words: int,
        temperature: float = 1.0,
        seed: int = 0,
        greedy: bool = False,
    ) -> str:
        """Autoregressive continuation of prompt, deterministic per seed.

        Samples model tokens (the <unk> token is never emitted) until </s>
        is drawn or max_words tokens were produced; logits are scaled by
        1/temperature. A prompt that tokenizes to nothing falls back to
        begin-of-text context.
        """
        if temperature <= 0:
            raise ValidationError("temperature must be > 0")
        rng = np.random.Generator(np.random.PCG64(seed))
        ids = self._to_ids(tokenize(prompt))
        ctx_len = self.order - 1
        out: list[str] = []
        for _ in range(max_words):
            ctx = self._context_ids(ids, len(ids))
            tok_id = self._draw(ctx, temperature, greedy, rng)
            if tok_id == _EOS_ID:
                break
            out.append(self.vocab[tok_id])
            ids.append(tok_id)
            if ctx_len:
                ids = ids[-ctx_len:]
        if not out:
            return prompt
        continuation = " ".join(out)
        return f"{prompt} {continuation}" if prompt else continuation

    # -------------------------------------------------------- persistence

    def to_json(self) -> str:
        def name(i: int) -> str:
            if i == _BOS_ID:
                return BOS
            if i == _EOS_ID:
                return EOS
            return self.vocab[i]

        payload = {
            "format": "curvedetect-ngram",
            "format_version": 1,
            "tokenizer_version": TOKENIZER_VERSION,
            "order": self.order,
            "smoothing_k": self.smoothing_k,
            "corpus_fingerprint": self.corpus_fingerprint,
            "vocab": self.vocab[:-1],  # <unk> is implicit
            "counts": {
                " ".join(name(i) for i in ctx): {name(e): c for e, c in sorted(table.items())}
                for ctx, table in sorted(self._counts.items())
            },
        }
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_json(cls, text: str) -> "NGramModel":
        payload = json.loads(text)
        if payload.get("format") != "curvedetect-ngram":
            raise ValidationError("not an n-gram model artifact")
        if payload.get("tokenizer_version") != TOKENIZER_VERSION:
            raise ValidationError(
                f"model built with tokenizer v{payload.get('tokenizer_version')}, "
                f"engine has v{TOKENIZER_VERSION}"
            )
        vocab = list(payload["vocab"]) + [UNK]
        id_of = {tok: i for i, tok in enumerate(vocab)}
        id_of[BOS] = _BOS_ID
        id_of[EOS] = _EOS_ID
        counts: dict[tuple[int, ...], dict[int, int]] = {}
        for ctx_str, table in payload["counts"].items():
            ctx = tuple(id_of[t] for t in ctx_str.split(" ")) if ctx_str else ()
            counts[ctx] = {id_of[t]: c for t, c in table.items()}
        return cls(
            order=payload["order"],
            smoothing_k=payload["smoothing_k"],
            vocab=vocab,
            counts=counts,
            corpus_fingerprint=payload["corpus_fingerprint"],
        )

    def save(self, path) -> None:
        atomic_write_text(path, self.to_json())

    @classmethod
    def load(cls, path) -> "NGramModel":
        with open(path, "r", encoding="utf-8") as f:
            return cls.from_json(f.read())


def train_ngram(corpus: Sequence[str], order: int, smoothing_k: float) -> NGramModel:
    """Train an add-k smoothed n-gram model; see NGramModel.train."""
    return NGramModel.train(corpus, order, smoothing_k)


def sample(model: NGramModel, prompt: str, max_words: int, temperature: float = 1.0,
           seed: int = 0, greedy: bool = False) -> str:
    return model.sample(prompt, max_words, temperature=temperature, seed=seed, greedy=greedy)


class NGramScorer(ScorerBackend):
    """ScorerBackend adapter around a trained NGramModel."""

    def __init__(self, model: NGramModel, identity: str | None = None):
        self.model = model
        self.identity = identity or (
            f"ngram{model.order}-k{model.smoothing_k:g}-{model.corpus_fingerprint}"
        )

    def logprob(self, text: str, per_token: bool = False) -> ScoreReport:
        return self.model.logprob(text, per_token=per_token)
