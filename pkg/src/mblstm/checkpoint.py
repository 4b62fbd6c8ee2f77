"""Checkpoint directory format.

A checkpoint is a directory holding two files::

    manifest.txt   text, one record per line
    weights.bin    every tensor as little-endian float32, concatenated

Manifest records::

    mblstm-checkpoint
    version 1
    blob weights.bin float32-le
    config <key> <value>          # one per NetworkConfig field
    meta <key> <value>            # free-form extras (crop size, polar size, ...)
    tensor <name> <d0,d1,d2,d3> <byte offset>
    end
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import CheckpointError
from .network import ModelParams, NetworkConfig, build, rebind_skips

FORMAT_TAG = "mblstm-checkpoint"
VERSION = 1
MANIFEST = "manifest.txt"
BLOB = "weights.bin"


def _config_lines(cfg: NetworkConfig) -> list[str]:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if f.name == "blstm_levels":
            value = ",".join(str(int(v)) for v in value)
        lines.append(f"config {f.name} {value}")
    return lines


def _parse_config(items: dict[str, str]) -> NetworkConfig:
    try:
        return NetworkConfig(
            depth=int(items["depth"]),
            base_channels=int(items["base_channels"]),
            in_channels=int(items["in_channels"]),
            out_channels=int(items["out_channels"]),
            input_size=int(items["input_size"]),
            blstm_levels=tuple(v == "1" for v in items["blstm_levels"].split(",")),
            seed=int(items["seed"]),
        )
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"checkpoint config incomplete or malformed: {exc}") from exc


def save_checkpoint(model: ModelParams, path: str | Path, meta: dict[str, str] | None = None) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    lines = [FORMAT_TAG, f"version {VERSION}", f"blob {BLOB} float32-le"]
    lines += _config_lines(model.config)
    merged = {**getattr(model, "meta", {}), **(meta or {})}
    for key in sorted(merged):
        lines.append(f"meta {key} {merged[key]}")
    offset = 0
    chunks = []
    for name, t in model.tensors.items():
        raw = np.ascontiguousarray(t.data, dtype="<f4").tobytes()
        lines.append(f"tensor {name} {','.join(str(d) for d in t.shape)} {offset}")
        chunks.append(raw)
        offset += len(raw)
    lines.append("end")
    (out / BLOB).write_bytes(b"".join(chunks))
    (out / MANIFEST).write_text("\n".join(lines) + "\n")
    return out


def read_manifest(path: str | Path) -> tuple[NetworkConfig, dict[str, str], list[tuple[str, tuple[int, ...], int]]]:
    manifest = Path(path) / MANIFEST
    if not manifest.is_file():
        raise CheckpointError(f"no checkpoint manifest at {manifest}")
    lines = manifest.read_text().splitlines()
    if not lines or lines[0] != FORMAT_TAG:
        raise CheckpointError(f"{manifest}: not an mblstm checkpoint")
    version = None
    config: dict[str, str] = {}
    meta: dict[str, str] = {}
    entries: list[tuple[str, tuple[int, ...], int]] = []
    ended = False
    for lineno, line in enumerate(lines[1:], 2):
        parts = line.split(" ")
        try:
            kind = parts[0]
            if kind == "version":
                version = int(parts[1])
            elif kind == "blob":
                if parts[1:] != [BLOB, "float32-le"]:
                    raise CheckpointError(f"{manifest}:{lineno}: unsupported blob record {line!r}")
            elif kind == "config":
                config[parts[1]] = parts[2]
            elif kind == "meta":
                meta[parts[1]] = " ".join(parts[2:])
            elif kind == "tensor":
                shape = tuple(int(d) for d in parts[2].split(","))
                entries.append((parts[1], shape, int(parts[3])))
            elif kind == "end":
                ended = True
                break
            else:
                raise CheckpointError(f"{manifest}:{lineno}: unknown record {kind!r}")
        except (IndexError, ValueError) as exc:
            raise CheckpointError(f"{manifest}:{lineno}: corrupt record {line!r}") from exc
    if version is None:
        raise CheckpointError(f"{manifest}: missing version field")
    if version != VERSION:
        raise CheckpointError(f"{manifest}: checkpoint version {version}, this build reads version {VERSION}")
    if not ended:
        raise CheckpointError(f"{manifest}: truncated manifest (no end record)")
    return _parse_config(config), meta, entries


def load_checkpoint(path: str | Path, expected: NetworkConfig | None = None) -> ModelParams:
    """Rebuild a model from ``path``; every tensor comes back bit-exact as float32."""
    cfg, meta, entries = read_manifest(path)
    skeleton = build(cfg)
    if expected is not None:
        reference = build(dataclasses.replace(expected, seed=cfg.seed))
        for name, t in reference.tensors.items():
            got = skeleton.tensors.get(name)
            if got is None or got.shape != t.shape:
                found = None if got is None else got.shape
                raise CheckpointError(f"shape mismatch for {name}: checkpoint has {found}, expected {t.shape}")
        if set(reference.tensors) != set(skeleton.tensors):
            extra = sorted(set(skeleton.tensors) - set(reference.tensors))
            raise CheckpointError(f"checkpoint has unexpected tensors {extra[:5]}")
    blob = (Path(path) / BLOB).read_bytes()
    seen = set()
    for name, shape, offset in entries:
        if name not in skeleton.tensors:
            raise CheckpointError(f"checkpoint tensor {name} is not part of the configured model")
        target = skeleton.tensors[name]
        if target.shape != shape:
            raise CheckpointError(f"shape mismatch for {name}: manifest {shape}, model {target.shape}")
        nbytes = 4 * int(np.prod(shape))
        if offset < 0 or offset + nbytes > len(blob):
            raise CheckpointError(f"weights blob too short for tensor {name} (needs bytes {offset}..{offset + nbytes})")
        values = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        target.data = np.ascontiguousarray(values, dtype=T.dtype())
        seen.add(name)
    missing = set(skeleton.tensors) - seen
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {sorted(missing)[:5]}")
    rebind_skips(skeleton)
    skeleton.meta = dict(meta)
    return skeleton
