"""Shared plumbing: worker pools, deterministic file writers, checksums."""
from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence


class DataError(Exception):
    """Bad input data or artifact (maps to CLI exit code 2)."""


def worker_count() -> int:
    """Worker cap from HMMPROBE_THREADS; results never depend on it."""
    raw = os.environ.get("HMMPROBE_THREADS", "")
    try:
        n = int(raw)
    except ValueError:
        return 1
    return max(1, n)


def parallel_map(fn: Callable, items: Sequence) -> list:
    """Map `fn` over `items`, preserving order.

    Per-item work must be independent; results are merged by the caller in
    list order, so the outcome is identical for any worker count.
    """
    n = worker_count()
    if n <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, items))


def sha256_bytes(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dump_json(obj, path: str | os.PathLike) -> None:
    """Stable JSON: sorted keys, repr floats, LF newlines."""
    with open(path, "w", newline="\n") as f:
        json.dump(obj, f, sort_keys=True, indent=1)
        f.write("\n")


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    """Plain deterministic CSV: floats via repr so reruns are byte-identical."""

    def cell(v) -> str:
        if isinstance(v, float):
            return repr(v)
        return str(v)

    with open(path, "w", newline="\n") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(cell(v) for v in row) + "\n")
