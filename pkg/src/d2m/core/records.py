"""Newline-delimited JSON records for step logs and reports."""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Iterable, Iterator


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


class RecordWriter:
    """Append-only JSONL writer; usable as a context manager or a callable sink."""

    def __init__(self, path: str | Path, mode: str = "w"):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, mode)

    def __call__(self, record: dict) -> None:
        self.write(record)

    def write(self, record: dict) -> None:
        self._fh.write(json.dumps(_clean(record), sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_records(path: str | Path, records: Iterable[dict]) -> None:
    with RecordWriter(path) as w:
        for r in records:
            w.write(r)


def read_records(path: str | Path) -> Iterator[dict]:
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                yield json.loads(line)
