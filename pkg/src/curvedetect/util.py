"""Small shared helpers: canonical hashing, keyed RNG streams, atomic IO."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from typing import Any, Callable, Iterable, Sequence, TypeVar

import numpy as np

T = TypeVar("T")
U = TypeVar("U")


def canonical_json(obj: Any) -> str:
    """Serialize to JSON with sorted keys and no whitespace.

    Two structurally equal objects always map to the same string, which
    makes the result safe to hash for cache keys and stage fingerprints.
    """
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def fingerprint_texts(texts: Sequence[str]) -> str:
    """Stable 16-hex-digit fingerprint of an ordered list of texts."""
    h = hashlib.sha256()
    for t in texts:
        h.update(t.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()[:16]


def normalize_ws(text: str) -> str:
    """Collapse all whitespace runs to single spaces and strip the ends."""
    return " ".join(text.split())


def derive_seed(*parts: Any) -> int:
    """Derive a 64-bit seed from arbitrary JSON-able parts.

    Used to key independent RNG substreams by (seed, record_id, index) so
    results never depend on execution order.
    """
    digest = hashlib.sha256(canonical_json(list(parts)).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def derive_rng(*parts: Any) -> np.random.Generator:
    """Independent, platform-stable RNG stream keyed by the given parts."""
    return np.random.Generator(np.random.PCG64(derive_seed(*parts)))


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write a file via temp-then-rename so readers never see partial writes."""
    path = os.fspath(path)
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def file_sha256(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def ordered_map(fn: Callable[[T], U], items: Iterable[T], workers: int = 1) -> list[U]:
    """Map fn over items, preserving input order.

    With workers > 1 the calls run on a thread pool; outputs are still
    assembled in input order so callers stay deterministic.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
