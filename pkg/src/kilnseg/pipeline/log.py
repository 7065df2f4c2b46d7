"""Append-only JSON-lines record log with exclusive-writer locking."""

from __future__ import annotations

import fcntl
import json
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Iterable, Iterator

from ..errors import LogCorruptError


def _encode(record: dict) -> bytes:
    return (json.dumps(record, sort_keys=True, allow_nan=False) + "\n").encode()


@contextmanager
def _locked_append(path: Path) -> Iterator[int]:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        yield fd
    finally:
        fcntl.flock(fd, fcntl.LOCK_UN)
        os.close(fd)


def _write_all(fd: int, data: bytes) -> None:
    view = memoryview(data)
    while view:
        view = view[os.write(fd, view):]


def append_record(path, record: dict) -> None:
    """Append one record as a single locked write; earlier bytes are never touched."""
    with _locked_append(Path(path)) as fd:
        _write_all(fd, _encode(record))


def append_records(path, records: Iterable[dict]) -> int:
    """Append many records under one lock so a run's block stays contiguous."""
    data = b"".join(_encode(r) for r in records)
    with _locked_append(Path(path)) as fd:
        _write_all(fd, data)
    return data.count(b"\n")


def read_log(path) -> list[dict]:
    path = Path(path)
    records = []
    with path.open("rb") as fh:
        fcntl.flock(fh.fileno(), fcntl.LOCK_SH)
        try:
            for n, raw in enumerate(fh, start=1):
                if not raw.endswith(b"\n"):
                    raise LogCorruptError(path, n, "truncated final line")
                try:
                    rec = json.loads(raw)
                except (json.JSONDecodeError, UnicodeDecodeError) as exc:
                    raise LogCorruptError(path, n, f"invalid JSON: {exc}") from None
                if not isinstance(rec, dict):
                    raise LogCorruptError(path, n, "record is not an object")
                records.append(rec)
        finally:
            fcntl.flock(fh.fileno(), fcntl.LOCK_UN)
    return records
