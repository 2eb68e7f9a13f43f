"""Single-file checkpoint archive.

A checkpoint is a zip archive with stored (uncompressed) entries in sorted
order and fixed timestamps, so identical content always produces identical
bytes:

    meta.json                      format version, LODConfig, frozen levels, train state
    params/level{l}/{block}/{layer}.npy
    optim/level{l}/{block}/{layer}/{exp_avg,exp_avg_sq,step}.npy   (optional)
    best/level{l}/{block}/{layer}.npy                              (optional)

Parameter names can be listed with any zip tool and loaded per level.
"""
from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import LODConfig, LODNetwork

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: LODConfig
    params: dict[str, np.ndarray]
    frozen_levels: list[int] = field(default_factory=list)
    train_state: dict | None = None
    optimizer: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    best: dict[str, np.ndarray] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def level_params(self, level: int) -> dict[str, np.ndarray]:
        prefix = f"level{level}/"
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def build_model(self, seed: int | None = 0) -> LODNetwork:
        model = LODNetwork(self.config, seed=seed)
        model.import_state(self.params)
        for lvl in self.frozen_levels:
            model.freeze_level(lvl)
        return model


def _npy_bytes(arr) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _npy_load(raw: bytes) -> np.ndarray:
    return np.load(io.BytesIO(raw), allow_pickle=False)


def to_bytes(ckpt: Checkpoint) -> bytes:
    meta = {
        "format_version": ckpt.format_version,
        "config": ckpt.config.to_dict(),
        "frozen_levels": sorted(int(x) for x in ckpt.frozen_levels),
        "train_state": ckpt.train_state,
    }
    entries = {"meta.json": json.dumps(meta, sort_keys=True, indent=1).encode()}
    for name, arr in ckpt.params.items():
        entries[f"params/{name}.npy"] = _npy_bytes(arr)
    for name, slots in ckpt.optimizer.items():
        for slot, arr in slots.items():
            entries[f"optim/{name}/{slot}.npy"] = _npy_bytes(arr)
    for name, arr in ckpt.best.items():
        entries[f"best/{name}.npy"] = _npy_bytes(arr)

    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(entries):
            info = zipfile.ZipInfo(name, date_time=_EPOCH)
            info.external_attr = 0o644 << 16
            zf.writestr(info, entries[name])
    return buf.getvalue()


def from_bytes(raw: bytes) -> Checkpoint:
    try:
        zf = zipfile.ZipFile(io.BytesIO(raw))
        bad = zf.testzip()
    except (zipfile.BadZipFile, OSError, EOFError) as exc:
        raise CheckpointError(f"not a readable checkpoint archive: {exc}") from exc
    if bad is not None:
        raise CheckpointError(f"corrupted entry {bad!r}")
    with zf:
        names = zf.namelist()
        if "meta.json" not in names:
            raise CheckpointError("archive has no meta.json")
        try:
            meta = json.loads(zf.read("meta.json"))
        except ValueError as exc:
            raise CheckpointError(f"meta.json unreadable: {exc}") from exc
        version = meta.get("format_version")
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"checkpoint format version {version!r} is not supported (expected {FORMAT_VERSION})"
            )
        params, best, optim = {}, {}, {}
        try:
            for name in names:
                if not name.endswith(".npy"):
                    continue
                arr = _npy_load(zf.read(name))
                stem = name[: -len(".npy")]
                if stem.startswith("params/"):
                    params[stem[len("params/"):]] = arr
                elif stem.startswith("best/"):
                    best[stem[len("best/"):]] = arr
                elif stem.startswith("optim/"):
                    pname, slot = stem[len("optim/"):].rsplit("/", 1)
                    optim.setdefault(pname, {})[slot] = arr
        except (ValueError, OSError, zipfile.BadZipFile) as exc:
            raise CheckpointError(f"corrupted tensor entry: {exc}") from exc
    try:
        config = LODConfig.from_dict(meta["config"]).validate()
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"invalid stored config: {exc}") from exc
    return Checkpoint(config, params, list(meta.get("frozen_levels", [])),
                      meta.get("train_state"), optim, best, version)


def save(ckpt: Checkpoint, path) -> Path:
    """Write atomically: a crash mid-write never leaves a truncated file at ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_bytes(ckpt)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load(path) -> Checkpoint:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc}") from exc
    return from_bytes(raw)


def from_model(model: LODNetwork, **extra) -> Checkpoint:
    return Checkpoint(model.cfg, model.export_state(), sorted(model.frozen_levels), **extra)


def save_model(model: LODNetwork, path, **extra) -> Path:
    return save(from_model(model, **extra), path)


def load_model(path) -> LODNetwork:
    model = load(path).build_model()
    model.eval()
    return model
