"""Single-file checkpoints: JSON manifest + one little-endian float64 blob.

Layout: 4-byte magic, u64 manifest length, manifest JSON (UTF-8), raw
tensor bytes. The manifest records the format version, every tensor's
name/shape/offset, the resolved config, dataset geometry, epoch, stage
tag, annealing temperature, RNG state, and a SHA-256 of the blob that is
verified on load. Identical training runs produce byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .model import ModelDims, ModelParams
from .selector import SelectorParams

MAGIC = b"FRC1"
FORMAT_VERSION = 1


def _tensor_entries(model: ModelParams, selector: SelectorParams):
    for name, p in model.group:
        yield f"model.{name}", p
    for name, p in selector.group:
        yield f"selector.{name}", p


def save_checkpoint(
    path: str | Path,
    model: ModelParams,
    selector: SelectorParams,
    *,
    epoch: int,
    stage: str,
    tau: float,
    config: dict | None = None,
    field_names: tuple[str, ...] | None = None,
    rng_state: dict | None = None,
    vocab_sha256: str | None = None,
) -> None:
    entries = []
    chunks = []
    offset = 0
    for name, p in _tensor_entries(model, selector):
        raw = np.ascontiguousarray(p.value, dtype="<f8").tobytes()
        entries.append(
            {"name": name, "shape": list(p.value.shape), "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    dims = model.dims
    manifest = {
        "format_version": FORMAT_VERSION,
        "epoch": epoch,
        "stage": stage,
        "tau": tau,
        "config": config,
        "model_dims": {
            "num_fields": dims.num_fields,
            "embed_dim": dims.embed_dim,
            "hidden_dim": dims.hidden_dim,
            "rank": dims.rank,
            "num_scenarios": dims.num_scenarios,
            "num_tasks": dims.num_tasks,
            "vocab_sizes": list(dims.vocab_sizes),
        },
        "activation": model.activation,
        "selector": {
            "input_dim": selector.input_dim,
            "num_tasks": selector.num_tasks,
            "widths": list(selector.widths),
            "head_bias_init": selector.head_bias_init,
        },
        "field_names": list(field_names) if field_names else None,
        "vocab_sha256": vocab_sha256,
        "rng_state": rng_state,
        "tensors": entries,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
    }
    mbytes = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    with Path(path).open("wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(mbytes)))
        fh.write(mbytes)
        fh.write(blob)


@dataclass
class Checkpoint:
    model: ModelParams
    selector: SelectorParams
    manifest: dict

    @property
    def epoch(self) -> int:
        return self.manifest["epoch"]

    @property
    def stage(self) -> str:
        return self.manifest["stage"]

    @property
    def tau(self) -> float:
        return self.manifest["tau"]

    @property
    def config(self) -> dict | None:
        return self.manifest["config"]

    @property
    def field_names(self) -> tuple[str, ...] | None:
        names = self.manifest.get("field_names")
        return tuple(names) if names else None


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise DataError(f"{path} is not a checkpoint (bad magic)")
    (mlen,) = struct.unpack("<Q", raw[4:12])
    if len(raw) < 12 + mlen:
        raise DataError(f"{path} is truncated")
    try:
        manifest = json.loads(raw[12 : 12 + mlen].decode())
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"{path} has a corrupt manifest: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"{path} has unsupported format version {manifest.get('format_version')}"
        )
    blob = raw[12 + mlen :]
    digest = hashlib.sha256(blob).hexdigest()
    if digest != manifest["blob_sha256"]:
        raise DataError(f"{path} failed its integrity check (blob hash mismatch)")
    md = manifest["model_dims"]
    dims = ModelDims(
        num_fields=md["num_fields"],
        embed_dim=md["embed_dim"],
        hidden_dim=md["hidden_dim"],
        rank=md["rank"],
        num_scenarios=md["num_scenarios"],
        num_tasks=md["num_tasks"],
        vocab_sizes=tuple(md["vocab_sizes"]),
    )
    model = ModelParams(dims, activation=manifest["activation"])
    sd = manifest["selector"]
    selector = SelectorParams(
        input_dim=sd["input_dim"],
        num_tasks=sd["num_tasks"],
        widths=tuple(sd["widths"]),
        head_bias_init=sd["head_bias_init"],
    )
    params = dict(_tensor_entries(model, selector))
    seen = set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name not in params:
            raise DataError(f"{path} holds unknown tensor '{name}'")
        p = params[name]
        shape = tuple(entry["shape"])
        if shape != p.value.shape:
            raise DataError(
                f"{path}: tensor '{name}' has shape {shape}, expected {p.value.shape}"
            )
        start = entry["offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=p.value.size, offset=start)
        p.value[...] = arr.reshape(shape)
        seen.add(name)
    missing = set(params) - seen
    if missing:
        raise DataError(f"{path} is missing tensors: {sorted(missing)}")
    return Checkpoint(model=model, selector=selector, manifest=manifest)
