"""Provenance headers for every file a command writes.

Text artifacts start with ``# key: value`` lines; JSON artifacts carry the
same fields under a leading ``"header"`` key.  Headers hold the tool
version, the seed, a digest of the resolved configuration and digests of
every input -- never timestamps, so reruns are byte-identical.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Mapping

from . import __version__

TOOL = "radspan"


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def config_digest(config: Mapping) -> str:
    return sha256_bytes(canonical_json(config).encode("utf-8"))


def file_digest(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def directory_digest(path: str | Path, suffixes=(".txt", ".ann")) -> str:
    """Digest over (relative name, content digest) of the corpus files in ``path``."""
    root = Path(path)
    h = hashlib.sha256()
    for p in sorted(q for q in root.iterdir() if q.is_file() and q.suffix in suffixes):
        h.update(p.name.encode("utf-8") + b"\0" + file_digest(p).encode("ascii") + b"\n")
    return h.hexdigest()


def make_header(seed: int | None, config: Mapping, inputs: Mapping[str, str] | None = None,
                **extra) -> dict:
    header = {
        "tool": f"{TOOL} {__version__}",
        "seed": seed,
        "config_sha256": config_digest(config),
    }
    for name, digest in sorted((inputs or {}).items()):
        header[f"input_sha256[{name}]"] = digest
    for k, v in extra.items():
        header[k] = v
    return header


def header_text(header: Mapping) -> str:
    return "".join(f"# {k}: {v}\n" for k, v in header.items())


def parse_header(text: str) -> dict:
    """Read leading ``# key: value`` lines back into a dict of strings."""
    out = {}
    for line in text.splitlines():
        if not line.startswith("# "):
            break
        key, _, value = line[2:].partition(": ")
        out[key] = value
    return out


def write_text(path: str | Path, header: Mapping, body: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(header_text(header))
        f.write(body)


def write_json(path: str | Path, header: Mapping, payload: Mapping) -> None:
    doc = {"header": dict(header), **payload}
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(doc, indent=2, ensure_ascii=False) + "\n")
