"""Target pool construction: human corpora in, balanced human/machine pools out.

The pool is the evaluation set for detection: half human-written texts from
a corpus, half machine texts obtained by prompting a generator backend with
the first words of each human text. Everything is keyed by explicit seeds,
so a pool is a pure function of (corpus bytes, seed, generation params,
backend identity) for deterministic backends.
"""

from __future__ import annotations

import json
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from .errors import BackendError, CorpusError, GenerationError, ValidationError
from .scorer import NGramModel
from .util import atomic_write_text, derive_seed, normalize_ws, ordered_map

if TYPE_CHECKING:
    from .modelclient import GenerationParams

PROMPT_WORDS = 20


class Label(str, Enum):
    HUMAN = "human"
    MACHINE = "machine"


@dataclass(frozen=True)
class TextRecord:
    """One pool item: a text plus its provenance.

    Machine records carry the generating backend's identity and the prompt
    (always a prefix of the text); human records carry neither.
    """

    id: str
    text: str
    label: Label
    generator_id: str | None = None
    prompt: str | None = None

    def __post_init__(self):
        if not normalize_ws(self.text):
            raise ValidationError(f"record {self.id}: empty text")
        if (self.label == Label.MACHINE) != (self.generator_id is not None):
            raise ValidationError(
                f"record {self.id}: generator_id must be present iff label is machine"
            )
        if self.prompt is not None and not self.text.startswith(self.prompt):
            raise ValidationError(f"record {self.id}: prompt is not a prefix of text")

    def to_dict(self) -> dict:
        d = {"id": self.id, "text": self.text, "label": self.label.value}
        if self.generator_id is not None:
            d["generator_id"] = self.generator_id
        if self.prompt is not None:
            d["prompt"] = self.prompt
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TextRecord":
        return cls(
            id=d["id"],
            text=d["text"],
            label=Label(d["label"]),
            generator_id=d.get("generator_id"),
            prompt=d.get("prompt"),
        )


@dataclass
class TargetPool:
    """Ordered, immutable-after-construction set of TextRecords."""

    records: list[TextRecord]
    seed: int
    source_manifest: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            raise ValidationError("pool record ids are not unique")

    def humans(self) -> list[TextRecord]:
        return [r for r in self.records if r.label == Label.HUMAN]

    def machines(self) -> list[TextRecord]:
        return [r for r in self.records if r.label == Label.MACHINE]

    def by_id(self) -> dict[str, TextRecord]:
        return {r.id: r for r in self.records}


class GeneratorBackend(ABC):
    """Produces a text continuation for a prompt.

    generate returns the full text, starting with the prompt verbatim.
    identity is a stable string naming the backend; deterministic backends
    must make generate a pure function of (prompt, params, seed).
    """

    identity: str

    @abstractmethod
    def generate(self, prompt: str, params: "GenerationParams", seed: int) -> str:
        ...


class NGramGenerator(GeneratorBackend):
    """Built-in deterministic generator sampling from an NGramModel.

    The default identity matches NGramScorer's for the same model, so a
    matrix built from both recognizes the self-detection cell. top_p is
    ignored by this backend; temperature 0 selects greedy decoding.
    """

    def __init__(self, model: NGramModel, identity: str | None = None):
        self.model = model
        self.identity = identity or (
            f"ngram{model.order}-k{model.smoothing_k:g}-{model.corpus_fingerprint}"
        )

    def generate(self, prompt: str, params: "GenerationParams", seed: int) -> str:
        greedy = params.temperature == 0
        return self.model.sample(
            prompt,
            max_words=params.max_tokens,
            temperature=params.temperature if not greedy else 1.0,
            seed=seed,
            greedy=greedy,
        )


def load_corpus(
    path: str | Path,
    min_words: int = 1,
    max_records: int | None = None,
    seed: int = 0,
) -> list[str]:
    """Load human documents from a JSONL or plain-text corpus file.

    Files ending in .jsonl hold one JSON object per line with a "text"
    field; anything else is plain text with blank-line-separated documents.
    Documents are whitespace-normalized, filtered to at least min_words
    whitespace-delimited words, and (when more than max_records survive)
    subsampled uniformly without replacement using the given seed. Output
    order is deterministic for a fixed seed.
    """
    path = Path(path)
    try:
        raw = path.read_text(encoding="utf-8")
    except OSError as e:
        raise CorpusError(f"cannot read corpus {path}: {e}") from e

    docs: list[str] = []
    if path.suffix == ".jsonl":
        for lineno, line in enumerate(raw.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as e:
                raise CorpusError(f"{path}: malformed JSONL at line {lineno}: {e}") from e
            if not isinstance(obj, dict) or not isinstance(obj.get("text"), str):
                raise CorpusError(f'{path}: line {lineno} lacks a string "text" field')
            docs.append(obj["text"])
    else:
        docs = re.split(r"\n\s*\n", raw)

    texts = [normalize_ws(d) for d in docs]
    texts = [t for t in texts if t and len(t.split()) >= min_words]
    if not texts:
        raise CorpusError(f"{path}: no documents with >= {min_words} words")
    if max_records is not None and len(texts) > max_records:
        rng = np.random.Generator(np.random.PCG64(seed))
        idx = rng.choice(len(texts), size=max_records, replace=False)
        texts = [texts[i] for i in idx]
    return texts


def extract_prompt(text: str, n_tokens: int = PROMPT_WORDS) -> str:
    """First n_tokens whitespace-delimited words, single-space joined.

    Words (not model-specific subwords) keep the prompt backend-agnostic,
    which is what lets one pool be shared across generator backends.
    """
    words = text.split()
    if len(words) < n_tokens:
        raise ValidationError(f"text has {len(words)} words, prompt needs {n_tokens}")
    return " ".join(words[:n_tokens])


def _id_slug(identity: str) -> str:
    slug = re.sub(r"[^A-Za-z0-9]+", "-", identity).strip("-")
    return slug[:48] or "gen"


def build_pool(
    human_texts: Sequence[str],
    generator: GeneratorBackend,
    n_per_class: int = 300,
    gen_params: "GenerationParams" = None,
    seed: int = 0,
    prompt_words: int = PROMPT_WORDS,
    min_machine_words: int = 150,
    max_retries: int = 3,
    workers: int = 1,
    source: dict | None = None,
) -> TargetPool:
    """Build a balanced pool: n_per_class human and n_per_class machine texts.

    Machine text i is generated from the first prompt_words words of human
    text i, so each pair shares prompt provenance (recorded for audit only;
    detection never uses it). Machine texts shorter than min_machine_words
    words (prompt included) are retried with fresh derived seeds up to
    max_retries times; a pair that still fails is dropped and replaced from
    spare human texts, never disturbing pairs already admitted. Generation
    may run with workers > 1; results are assembled in input order and every
    generation is seeded by (seed, candidate_index, attempt), so the pool is
    independent of scheduling.
    """
    if gen_params is None:
        raise ValidationError("gen_params is required")
    if n_per_class < 1:
        raise ValidationError("n_per_class must be >= 1")
    if len(human_texts) < n_per_class:
        raise ValidationError(
            f"need at least {n_per_class} human texts, got {len(human_texts)}"
        )

    candidates = [normalize_ws(t) for t in human_texts]

    def attempt_pair(idx: int) -> tuple[str, str, str] | None:
        """Returns (human_text, prompt, machine_text) or None on failure."""
        human = candidates[idx]
        try:
            prompt = extract_prompt(human, prompt_words)
        except ValidationError:
            return None
        backend_failures = 0
        for attempt in range(max_retries + 1):
            try:
                raw = generator.generate(prompt, gen_params, derive_seed(seed, idx, attempt))
            except BackendError:
                backend_failures += 1
                continue
            machine = normalize_ws(raw)
            if machine.startswith(prompt) and len(machine.split()) >= min_machine_words:
                return human, prompt, machine
        if backend_failures > max_retries:
            raise GenerationError(
                f"generator {generator.identity} failed all {max_retries + 1} attempts"
            )
        return None

    admitted: list[tuple[str, str, str]] = []
    cursor = 0
    backend_down_streak = 0
    while len(admitted) < n_per_class:
        missing = n_per_class - len(admitted)
        batch = list(range(cursor, min(cursor + missing, len(candidates))))
        if not batch:
            raise ValidationError(
                f"insufficient human texts: admitted {len(admitted)} of {n_per_class} "
                f"pairs after exhausting {len(candidates)} candidates"
            )
        cursor = batch[-1] + 1

        def run(idx: int):
            try:
                return attempt_pair(idx)
            except GenerationError:
                return GenerationError

        results = ordered_map(run, batch, workers=workers)
        for res in results:
            if res is GenerationError:
                backend_down_streak += 1
                if backend_down_streak >= 25:
                    raise GenerationError(
                        f"generator {generator.identity} failing persistently; aborting pool build"
                    )
                continue
            if res is None:
                continue
            backend_down_streak = 0
            admitted.append(res)
            if len(admitted) == n_per_class:
                break

    slug = _id_slug(generator.identity)
    records: list[TextRecord] = []
    for k, (human, prompt, machine) in enumerate(admitted):
        records.append(TextRecord(id=f"human-{k:04d}", text=human, label=Label.HUMAN))
        records.append(
            TextRecord(
                id=f"machine-{slug}-{k:04d}",
                text=machine,
                label=Label.MACHINE,
                generator_id=generator.identity,
                prompt=prompt,
            )
        )

    manifest = {
        "seed": seed,
        "n_per_class": n_per_class,
        "generator": generator.identity,
        "gen_params": gen_params.to_dict(),
        "prompt_words": prompt_words,
        "min_machine_words": min_machine_words,
        "max_retries": max_retries,
    }
    if source:
        manifest.update(source)
    return TargetPool(records=records, seed=seed, source_manifest=manifest)


def _sidecar_path(path: Path) -> Path:
    return path.with_name(path.stem + ".manifest.json")


def write_pool(pool: TargetPool, path: str | Path) -> None:
    """Persist a pool as JSONL plus a sidecar manifest JSON."""
    path = Path(path)
    lines = [json.dumps(r.to_dict(), sort_keys=True) for r in pool.records]
    atomic_write_text(path, "\n".join(lines) + "\n")
    sidecar = {"seed": pool.seed, "source_manifest": pool.source_manifest}
    atomic_write_text(_sidecar_path(path), json.dumps(sidecar, indent=2, sort_keys=True))


def read_pool(path: str | Path) -> TargetPool:
    path = Path(path)
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                records.append(TextRecord.from_dict(json.loads(line)))
    seed = 0
    manifest: dict = {}
    sidecar = _sidecar_path(path)
    if sidecar.exists():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        seed = meta.get("seed", 0)
        manifest = meta.get("source_manifest", {})
    return TargetPool(records=records, seed=seed, source_manifest=manifest)
