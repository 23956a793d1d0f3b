"""Checkpoint archive: one zip holding a JSON manifest and a torch payload.

The manifest carries schema version, a hash of the resolved run config,
and the resume cursor (stage, iteration). The payload holds parameter and
optimizer state dicts, the edited-image cache, and bookkeeping counters.
Loading into a run whose config hash differs is an explicit schema error.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import torch

from control4d.errors import SchemaError

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"
STATE_NAME = "state.pt"


def config_hash(config: dict) -> str:
    """Stable hash of a JSON-serializable config tree."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.blake2b(canonical.encode(), digest_size=16).hexdigest()


def save_checkpoint(
    path: Path | str,
    state: dict,
    config: dict,
    stage: str | None,
    iteration: int,
) -> None:
    """Write the archive atomically (tmp file + rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config_hash(config),
        "config": config,
        "stage": stage,
        "iteration": int(iteration),
    }
    buf = io.BytesIO()
    torch.save(state, buf)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr(MANIFEST_NAME, json.dumps(manifest, indent=1))
        zf.writestr(STATE_NAME, buf.getvalue())
    tmp.replace(path)


def read_manifest(path: Path | str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise SchemaError(f"checkpoint {path} does not exist")
    try:
        with zipfile.ZipFile(path) as zf:
            with zf.open(MANIFEST_NAME) as fh:
                manifest = json.load(fh)
    except (zipfile.BadZipFile, KeyError, json.JSONDecodeError) as exc:
        raise SchemaError(f"malformed checkpoint {path}: {exc}") from exc
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise SchemaError(
            f"checkpoint {path} has schema version {manifest.get('schema_version')}, "
            f"expected {SCHEMA_VERSION}"
        )
    for key in ("config_hash", "config", "iteration"):
        if key not in manifest:
            raise SchemaError(f"checkpoint {path} manifest missing key {key!r}")
    return manifest


def load_checkpoint(
    path: Path | str, expected_config: dict | None = None
) -> tuple[dict, dict]:
    """Return (manifest, state). Verifies the config hash when one is given."""
    path = Path(path)
    manifest = read_manifest(path)
    if expected_config is not None:
        want = config_hash(expected_config)
        if manifest["config_hash"] != want:
            raise SchemaError(
                f"checkpoint {path} was produced under a different config "
                f"(hash {manifest['config_hash']}, expected {want})"
            )
    try:
        with zipfile.ZipFile(path) as zf:
            with zf.open(STATE_NAME) as fh:
                state = torch.load(io.BytesIO(fh.read()), map_location="cpu", weights_only=False)
    except (zipfile.BadZipFile, KeyError, RuntimeError) as exc:
        raise SchemaError(f"malformed checkpoint {path}: {exc}") from exc
    if not isinstance(state, dict):
        raise SchemaError(f"checkpoint {path} payload is not a state dict")
    return manifest, state
