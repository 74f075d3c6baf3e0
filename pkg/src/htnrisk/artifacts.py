"""Shared artifact plumbing: canonical JSON, hashing, key=value configs,
and per-stage run manifests.

Every file the pipeline writes must be byte-reproducible under a fixed
seed, so all JSON goes through `canonical_json` (sorted keys, no
whitespace, repr-exact floats) and all CSVs use LF line endings.
"""

from __future__ import annotations

import hashlib
import json
import math
from pathlib import Path
from typing import Any


def canonical_json(obj: Any) -> str:
    """Serialize to a canonical JSON string (stable across runs)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_json(path: str | Path, obj: Any) -> None:
    Path(path).write_text(canonical_json(obj) + "\n", encoding="utf-8")


def read_json(path: str | Path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_hex(Path(path).read_bytes())


def derive_seed(seed: int, label: str) -> int:
    """Fan a master seed out to a named stage/substream.

    Sub-seed = first 8 bytes of sha256("<seed>:<label>"), so stages are
    decorrelated but fully determined by (--seed, stage name).
    """
    digest = hashlib.sha256(f"{seed}:{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def format_number(value: float) -> str:
    """Format a numeric cell: integers without a trailing .0, floats via repr.

    repr round-trips float64 exactly, which keeps parse -> serialize
    byte-stable for files this package wrote.
    """
    value = float(value)
    if math.isfinite(value) and value == int(value) and abs(value) < 1e15:
        return str(int(value))
    return repr(value)


# -- key=value config files -------------------------------------------------

def read_kv_config(path: str | Path) -> dict[str, str]:
    """Parse a flat key=value config file. '#' starts a comment line."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def write_kv_config(path: str | Path, values: dict[str, Any]) -> None:
    lines = [f"{k}={values[k]}" for k in values]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# -- run manifests -----------------------------------------------------------

def write_manifest(
    out_dir: str | Path,
    stage: str,
    inputs: dict[str, str | Path],
    outputs: dict[str, str | Path],
    config: dict[str, Any],
    seed: int,
    unhashed_outputs: dict[str, str | Path] | None = None,
) -> Path:
    """Record a stage run: input/output paths with content hashes plus the
    config snapshot and seed. The hash chain is the provenance trail.

    `unhashed_outputs` lists files that legitimately vary between
    identical reruns (wall-clock timing logs); they are recorded by path
    only so manifests of identical runs stay byte-identical.
    """
    from . import __version__

    manifest = {
        "stage": stage,
        "inputs": {
            name: {"path": str(p), "sha256": sha256_file(p)} for name, p in inputs.items()
        },
        "outputs": {
            name: {"path": str(p), "sha256": sha256_file(p)} for name, p in outputs.items()
        },
        "config": config,
        "seed": seed,
        "tool_version": __version__,
    }
    if unhashed_outputs:
        manifest["unhashed_outputs"] = {
            name: {"path": str(p)} for name, p in unhashed_outputs.items()
        }
    path = Path(out_dir) / "manifest.json"
    write_json(path, manifest)
    return path
