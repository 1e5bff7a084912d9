"""Small file helpers shared by dataset and report writers."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path


class DatasetError(RuntimeError):
    """Missing, malformed, or wrong-version dataset/checkpoint file."""


def canonical_json(obj) -> str:
    # sorted keys + tight separators: identical content -> identical bytes
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def write_ndjson(path: str | Path, header: dict, records: list[dict]) -> None:
    lines = [canonical_json(header)]
    lines.extend(canonical_json(r) for r in records)
    Path(path).write_text("\n".join(lines) + "\n")


def read_ndjson(path: str | Path, schema: str, version: int) -> tuple[dict, list[dict]]:
    p = Path(path)
    if not p.exists():
        raise DatasetError(f"dataset file not found: {p}")
    lines = p.read_text().splitlines()
    if not lines:
        raise DatasetError(f"empty dataset file: {p}")
    try:
        header = json.loads(lines[0])
        records = [json.loads(line) for line in lines[1:] if line.strip()]
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON in {p}: {exc}") from exc
    if header.get("schema") != schema:
        raise DatasetError(
            f"{p}: expected schema {schema!r}, found {header.get('schema')!r}"
        )
    if header.get("version") != version:
        raise DatasetError(
            f"{p}: unsupported {schema} version {header.get('version')!r} (want {version})"
        )
    return header, records
