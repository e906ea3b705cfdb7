"""Perturbation machinery: mask span selection, sentinel masking, filling.

A perturbed neighbor of a text is built by masking a fraction of its
whitespace-delimited words (in fixed-length spans, or one contiguous span)
and replacing each span through a fill backend. Words are the masking unit
because they are the only unit shared by fill models and scorers with
different tokenizers.
"""

from __future__ import annotations

import json
import math
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FillProtocolError, SpanPlacementError, ValidationError
from .scorer import UNK, NGramModel
from .util import atomic_write_text, derive_rng

SENTINEL_RE = re.compile(r"<extra_id_(\d+)>")

_PLACEMENT_RESTARTS = 100
_DRAWS_PER_SPAN = 100
_IDENTICAL_REDRAWS = 3


def sentinel(index: int) -> str:
    return f"<extra_id_{index}>"


@dataclass(frozen=True)
class MaskPlan:
    """Span selection over the words of one text.

    spans are (start_word_index, length_in_words), sorted, non-overlapping
    and separated by at least one unmasked word; contiguous mode relaxes
    the separation rule by only ever holding a single span.
    """

    spans: tuple[tuple[int, int], ...]
    n_words: int
    contiguous: bool = False

    def __post_init__(self):
        if self.contiguous and len(self.spans) != 1:
            raise ValidationError("contiguous plan must hold exactly one span")
        prev_end = None
        for start, length in self.spans:
            if length < 1 or start < 0 or start + length > self.n_words:
                raise ValidationError(f"span ({start},{length}) out of bounds")
            if prev_end is not None and start < prev_end + 1:
                raise ValidationError("spans must be sorted with >=1 word separation")
            prev_end = start + length
        if sum(length for _, length in self.spans) > self.n_words:
            raise ValidationError("spans cover more words than the text has")

    @property
    def masked_words(self) -> int:
        return sum(length for _, length in self.spans)


@dataclass(frozen=True)
class PerturbationConfig:
    """How to build the k perturbed neighbors of each record."""

    mask_pct: float = 0.15
    span_len: int = 2
    contiguous: bool = False
    k: int = 100
    filler: str = ""
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.mask_pct < 1:
            raise ValidationError("mask_pct must be in (0, 1)")
        if self.span_len < 1:
            raise ValidationError("span_len must be >= 1")
        if self.k < 1:
            raise ValidationError("k must be >= 1")

    def to_dict(self) -> dict:
        return {
            "mask_pct": self.mask_pct,
            "span_len": self.span_len,
            "contiguous": self.contiguous,
            "k": self.k,
            "filler": self.filler,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class PerturbedText:
    """One filled neighbor; words outside the plan's spans match the source."""

    text: str
    plan: MaskPlan
    fills: tuple[str, ...]
    filler_id: str


@dataclass(frozen=True)
class FillRequest:
    """Everything a fill backend may need for one masked text.

    Remote backends use masked_text; the built-in unigram filler uses
    span_lengths; the echo filler (a degenerate-baseline tool) uses
    original_spans.
    """

    masked_text: str
    n_sentinels: int
    span_lengths: tuple[int, ...]
    original_spans: tuple[str, ...]


class FillBackend(ABC):
    """Rewrites masked spans; must return exactly one fill per sentinel."""

    identity: str

    @abstractmethod
    def fill(self, request: FillRequest, rng: np.random.Generator) -> list[str]:
        ...


class EchoFillBackend(FillBackend):
    """Returns the original masked words: perturbations equal the source.

    Useful as a degenerate anchor; the curvature statistic collapses to
    zero under it.
    """

    identity = "echo"

    def fill(self, request: FillRequest, rng: np.random.Generator) -> list[str]:
        return list(request.original_spans)


class UnigramFillBackend(FillBackend):
    """Offline fallback filler: i.i.d. word samples from a unigram model."""

    def __init__(self, model: NGramModel, identity: str | None = None):
        if model.order != 1:
            raise ValidationError("unigram filler requires an order-1 model")
        self.model = model
        self.identity = identity or f"unigram-k{model.smoothing_k:g}-{model.corpus_fingerprint}"
        self._tokens, self._probs = _unigram_fill_distribution(model)

    def fill(self, request: FillRequest, rng: np.random.Generator) -> list[str]:
        return [
            " ".join(rng.choice(self._tokens, size=length, p=self._probs))
            for length in request.span_lengths
        ]


def _unigram_fill_distribution(model: NGramModel) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed unigram distribution restricted to real tokens (no <unk>)."""
    dist = model.conditional([])
    items = sorted((tok, p) for tok, p in dist.items() if tok != UNK)
    tokens = np.array([t for t, _ in items], dtype=object)
    probs = np.array([p for _, p in items], dtype=float)
    probs /= probs.sum()
    return tokens, probs


def builtin_fill(
    masked_text: str,
    unigram: NGramModel,
    rng: np.random.Generator,
    span_lengths: int | Sequence[int] = 2,
) -> list[str]:
    """Fill every sentinel in masked_text with unigram-sampled words.

    span_lengths gives the word count per sentinel (one int for all, or a
    sequence matching the sentinel count). Draws are i.i.d. from the add-k
    smoothed unigram distribution with <unk> excluded and renormalized.
    """
    markers = SENTINEL_RE.findall(masked_text)
    if not markers:
        raise ValidationError("masked text contains no sentinel markers")
    n = len(markers)
    if isinstance(span_lengths, int):
        lengths = [span_lengths] * n
    else:
        lengths = list(span_lengths)
        if len(lengths) != n:
            raise ValidationError(f"{n} sentinels but {len(lengths)} span lengths")
    tokens, probs = _unigram_fill_distribution(unigram)
    return [" ".join(rng.choice(tokens, size=length, p=probs)) for length in lengths]


def select_spans(
    n_words: int, cfg: PerturbationConfig, rng: np.random.Generator
) -> MaskPlan:
    """Choose mask spans covering about mask_pct of n_words words.

    The target word count is m = round(mask_pct * n_words). Non-contiguous
    mode places ceil(m / span_len) spans of exactly span_len words by
    rejection sampling of start positions (slight overshoot of the target
    is accepted; undershoot never is); contiguous mode places a single
    m-word span at a uniformly random admissible start.
    """
    m = round(cfg.mask_pct * n_words)
    if m < 1:
        raise SpanPlacementError(
            f"mask_pct {cfg.mask_pct} of {n_words} words selects zero words"
        )
    if cfg.contiguous:
        if m > n_words:
            raise SpanPlacementError("contiguous span longer than text")
        start = int(rng.integers(0, n_words - m + 1))
        return MaskPlan(spans=((start, m),), n_words=n_words, contiguous=True)

    if m < cfg.span_len:
        raise SpanPlacementError(
            f"target of {m} masked words cannot host a span of {cfg.span_len}; "
            "lower span_len"
        )
    if n_words < cfg.span_len:
        raise SpanPlacementError(f"text of {n_words} words is shorter than one span")
    n_spans = math.ceil(m / cfg.span_len)
    length = cfg.span_len
    if n_spans * length + (n_spans - 1) > n_words:
        raise SpanPlacementError(
            f"{n_spans} spans of {length} words with separation do not fit "
            f"in {n_words} words"
        )
    for _ in range(_PLACEMENT_RESTARTS):
        placed: list[int] = []
        ok = True
        for _ in range(n_spans):
            for _ in range(_DRAWS_PER_SPAN):
                start = int(rng.integers(0, n_words - length + 1))
                if all(start >= p + length + 1 or p >= start + length + 1 for p in placed):
                    placed.append(start)
                    break
            else:
                ok = False
                break
        if ok:
            spans = tuple((s, length) for s in sorted(placed))
            return MaskPlan(spans=spans, n_words=n_words, contiguous=False)
    raise SpanPlacementError(
        f"could not place {n_spans} separated spans of {length} words "
        f"in {n_words} words"
    )


def apply_mask(words: Sequence[str], plan: MaskPlan) -> str:
    """Replace each planned span with its sentinel; keep other words verbatim."""
    if plan.n_words != len(words):
        raise ValidationError(
            f"plan was made for {plan.n_words} words, text has {len(words)}"
        )
    parts: list[str] = []
    cursor = 0
    for j, (start, length) in enumerate(plan.spans):
        parts.extend(words[cursor:start])
        parts.append(sentinel(j))
        cursor = start + length
    parts.extend(words[cursor:])
    return " ".join(parts)


def _splice(words: Sequence[str], plan: MaskPlan, fills: Sequence[str]) -> str:
    parts: list[str] = []
    cursor = 0
    for j, (start, length) in enumerate(plan.spans):
        parts.extend(words[cursor:start])
        if fills[j]:
            parts.append(fills[j])
        cursor = start + length
    parts.extend(words[cursor:])
    return " ".join(parts)


def perturb_k(
    text: str,
    cfg: PerturbationConfig,
    filler: FillBackend,
    record_id: str,
) -> list[PerturbedText]:
    """Build the k perturbed neighbors of text.

    Perturbation i draws from an RNG substream keyed by
    (cfg.seed, record_id, i), so the set is deterministic and any neighbor
    can be regenerated in isolation; execution order never matters. A
    neighbor that comes back identical to the source text is re-drawn up
    to 3 times and then accepted as-is (degenerate fillers must not wedge
    the pipeline).
    """
    source = " ".join(text.split())
    words = source.split()
    if not words:
        raise ValidationError("cannot perturb empty text")
    out: list[PerturbedText] = []
    for i in range(cfg.k):
        rng = derive_rng(cfg.seed, record_id, i)
        chosen: PerturbedText | None = None
        for _ in range(_IDENTICAL_REDRAWS + 1):
            plan = select_spans(len(words), cfg, rng)
            masked = apply_mask(words, plan)
            request = FillRequest(
                masked_text=masked,
                n_sentinels=len(plan.spans),
                span_lengths=tuple(length for _, length in plan.spans),
                original_spans=tuple(
                    " ".join(words[s : s + length]) for s, length in plan.spans
                ),
            )
            fills = filler.fill(request, rng)
            if len(fills) != len(plan.spans):
                raise FillProtocolError(
                    f"filler {filler.identity} returned {len(fills)} fills "
                    f"for {len(plan.spans)} sentinels"
                )
            candidate = PerturbedText(
                text=_splice(words, plan, fills),
                plan=plan,
                fills=tuple(fills),
                filler_id=filler.identity,
            )
            chosen = candidate
            if candidate.text != source:
                break
        out.append(chosen)
    return out


def reconstruct_outside_spans(perturbed: PerturbedText, source_words: Sequence[str]) -> bool:
    """Check the locality invariant: words outside spans survive verbatim."""
    fill_words = [f.split() for f in perturbed.fills]
    got = perturbed.text.split()
    cursor_src = 0
    cursor_got = 0
    for j, (start, length) in enumerate(perturbed.plan.spans):
        keep = list(source_words[cursor_src:start])
        if got[cursor_got : cursor_got + len(keep)] != keep:
            return False
        cursor_got += len(keep)
        if got[cursor_got : cursor_got + len(fill_words[j])] != fill_words[j]:
            return False
        cursor_got += len(fill_words[j])
        cursor_src = start + length
    tail = list(source_words[cursor_src:])
    return got[cursor_got:] == tail and cursor_got + len(tail) == len(got)


def write_perturbations(
    path: str | Path,
    rows: Iterable[tuple[str, int, PerturbedText]],
    meta: dict | None = None,
) -> None:
    """Persist perturbations as JSONL so scoring can resume or re-run.

    Each line holds {record_id, perturbation_index, text, spans, filler_id};
    an optional leading {"__meta__": ...} line carries run provenance.
    """
    lines = []
    if meta is not None:
        lines.append(json.dumps({"__meta__": meta}, sort_keys=True))
    for record_id, index, p in rows:
        lines.append(
            json.dumps(
                {
                    "record_id": record_id,
                    "perturbation_index": index,
                    "text": p.text,
                    "spans": [list(s) for s in p.plan.spans],
                    "filler_id": p.filler_id,
                },
                sort_keys=True,
            )
        )
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_perturbations(path: str | Path) -> dict[str, list[str]]:
    """Load perturbation texts grouped by record id, ordered by index."""
    grouped: dict[str, list[tuple[int, str]]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "__meta__" in obj:
                continue
            grouped.setdefault(obj["record_id"], []).append(
                (obj["perturbation_index"], obj["text"])
            )
    return {
        rid: [text for _, text in sorted(items)] for rid, items in grouped.items()
    }
