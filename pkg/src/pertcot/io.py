"""Line-delimited file helpers, digests, and atomic writes.

Artifact files written by this package start with a single provenance
header line of the form ``# {json}``. Readers skip ``#`` lines, so the
same helpers load both our artifacts and plain external files.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from collections.abc import Iterable, Iterator
from pathlib import Path
from typing import Any

from .errors import CorpusError

HEADER_PREFIX = "# "


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def sha256_hex(data: bytes | str) -> str:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return hashlib.sha256(data).hexdigest()


def digest_file(path: Path | str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write_text(path: Path | str, text: str) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def iter_jsonl(path: Path | str) -> Iterator[tuple[int, dict]]:
    """Yield (1-based line number, parsed object), skipping headers and blanks."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        try:
            obj = json.loads(stripped)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
        if not isinstance(obj, dict):
            raise CorpusError(f"{path}:{lineno}: expected an object per line")
        yield lineno, obj


def read_jsonl(path: Path | str) -> list[dict]:
    return [obj for _, obj in iter_jsonl(path)]


def write_jsonl(path: Path | str, rows: Iterable[dict], header: dict | None = None) -> None:
    """Write rows as line-delimited JSON with an optional provenance header."""
    lines: list[str] = []
    if header is not None:
        lines.append(HEADER_PREFIX + canonical_json(header))
    for row in rows:
        lines.append(canonical_json(row))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_header(path: Path | str) -> dict | None:
    """Return the parsed provenance header of an artifact, if present."""
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    if first.startswith(HEADER_PREFIX):
        try:
            return json.loads(first[len(HEADER_PREFIX):])
        except json.JSONDecodeError:
            return None
    return None
