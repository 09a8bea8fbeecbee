"""Self-describing binary checkpoint container.

Layout (version 1):

    bytes 0..7    magic b"INVDECK1"
    bytes 8..15   little-endian uint64: header length in bytes
    header        UTF-8 JSON with keys
                      version          int, currently 1
                      config           the full model config
                      params           list of {name, shape, offset, nbytes}
                      norm_stats_file  sibling stats filename or null
                      seeds            free-form dict of rng seeds
    payload       concatenated parameter buffers, row-major float64,
                  little-endian, at the offsets the manifest declares

Everything needed to rebuild the model lives in the header, so another
implementation (or language) can read and write the format from this
comment alone. Serialization is canonical (sorted keys, no whitespace), so
identical inputs give identical bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, ModelParams, init_params

MAGIC = b"INVDECK1"
VERSION = 1


class CheckpointError(ValueError):
    """Corrupt, truncated, or incompatible checkpoint."""


@dataclass
class Checkpoint:
    config: ModelConfig
    params: ModelParams
    seeds: dict
    norm_stats_file: str | None
    version: int = VERSION


def save_checkpoint(
    path,
    cfg: ModelConfig,
    params: ModelParams,
    seeds: dict | None = None,
    norm_stats_file: str | None = None,
) -> None:
    manifest = []
    payloads = []
    offset = 0
    for p in params.parameters():
        buf = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        manifest.append(
            {"name": p.name, "shape": list(p.data.shape), "offset": offset, "nbytes": len(buf)}
        )
        payloads.append(buf)
        offset += len(buf)
    header = json.dumps(
        {
            "version": VERSION,
            "config": cfg.to_dict(),
            "params": manifest,
            "norm_stats_file": norm_stats_file,
            "seeds": seeds or {},
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for buf in payloads:
            fh.write(buf)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        payload = fh.read()
    if header.get("version") != VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {header.get('version')!r}"
        )
    cfg = ModelConfig.from_dict(header["config"])
    params = init_params(cfg, seed=0)
    named = params.named()
    seen = set()
    for entry in header["params"]:
        name = entry["name"]
        if name not in named:
            raise CheckpointError(f"{path}: unknown parameter {name!r} for this config")
        p = named[name]
        shape = tuple(entry["shape"])
        if shape != p.data.shape:
            raise CheckpointError(
                f"{path}: parameter {name!r} has shape {shape}, config implies {p.data.shape}"
            )
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if len(raw) != entry["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {name!r}")
        p.data[...] = np.frombuffer(raw, dtype="<f8").reshape(shape)
        seen.add(name)
    missing = set(named) - seen
    if missing:
        raise CheckpointError(f"{path}: parameters missing from manifest: {sorted(missing)}")
    return Checkpoint(
        config=cfg,
        params=params,
        seeds=header.get("seeds", {}),
        norm_stats_file=header.get("norm_stats_file"),
        version=header["version"],
    )
