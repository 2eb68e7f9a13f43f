"""Volume and label-map I/O plus the canonical pre-processing chain.

Every volume entering the network goes through the same steps: reorientation
to LIA by header axis codes, whole-grid z-scoring, then symmetric zero
padding (or center cropping) to a cube. Labels follow the same geometry but
skip the intensity step.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import nibabel as nib
import numpy as np
from nibabel import orientations as nio

CANONICAL = ("L", "I", "A")

LABEL_NAMES = (
    "background",
    "grey_matter",
    "white_matter",
    "csf",
    "ventricles",
    "cerebellum",
    "brainstem",
    "basal_ganglia",
)
NUM_CLASSES = len(LABEL_NAMES)

SPLITS = ("train", "val", "test_int", "test_ext")

_AXIS_PAIRS = {"L": "R", "R": "L", "A": "P", "P": "A", "S": "I", "I": "S"}


class UnsupportedFormatError(ValueError):
    pass


class OrientationError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


class LabelRangeError(ValueError):
    pass


class ManifestError(ValueError):
    pass


def _affine_from_codes(codes: Sequence[str], spacing: Sequence[float]) -> np.ndarray:
    # nibabel's ornt convention is RAS+, so 'L' on an axis means a -1 world direction.
    ornt = nio.axcodes2ornt(tuple(codes))
    affine = np.eye(4)
    affine[:3, :3] = 0.0
    for ax, (world, sign) in enumerate(ornt):
        affine[int(world), ax] = sign * spacing[ax]
    return affine


@dataclass
class Volume:
    """3D scalar image with the geometry needed to undo pre-processing."""

    data: np.ndarray
    orientation: tuple[str, str, str] = CANONICAL
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    source_id: str = ""
    affine: np.ndarray | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise UnsupportedFormatError(f"expected a 3D grid, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"empty axis in shape {self.data.shape}")
        self.orientation = tuple(str(c).upper() for c in self.orientation)
        self.spacing_mm = tuple(float(s) for s in self.spacing_mm)
        if len(self.spacing_mm) != 3 or min(self.spacing_mm) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing_mm}")
        if self.affine is None:
            _check_codes(self.orientation)
            self.affine = _affine_from_codes(self.orientation, self.spacing_mm)
        else:
            self.affine = np.asarray(self.affine, dtype=np.float64)

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class LabelVolume(Volume):
    num_classes: int = NUM_CLASSES
    class_names: tuple[str, ...] = field(default=LABEL_NAMES)

    def __post_init__(self):
        super().__post_init__()
        if not np.issubdtype(self.data.dtype, np.integer):
            rounded = np.rint(self.data)
            if not np.array_equal(rounded, self.data):
                raise LabelRangeError("label grid contains non-integer values")
            self.data = rounded.astype(np.int16)
        if len(self.class_names) != self.num_classes:
            raise ValueError("class_names must have one entry per class")
        check_label_range(self.data, self.num_classes)


def check_label_range(data: np.ndarray, num_classes: int) -> None:
    bad = (data < 0) | (data >= num_classes)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise LabelRangeError(
            f"label {int(data[idx])} at voxel {idx} outside [0, {num_classes - 1}]"
        )


def _check_codes(codes: Sequence[str]) -> None:
    if len(codes) != 3:
        raise OrientationError(f"need three axis codes, got {codes!r}")
    seen = {}
    for ax, c in enumerate(codes):
        if c not in _AXIS_PAIRS:
            raise OrientationError(f"axis {ax}: unknown orientation code {c!r}")
        key = frozenset((c, _AXIS_PAIRS[c]))
        if key in seen:
            raise OrientationError(
                f"axis {ax}: code {c!r} duplicates the direction of axis {seen[key]}"
            )
        seen[key] = ax


def _codes_from_affine(affine: np.ndarray, tol: float = 1e-3) -> tuple[str, str, str]:
    rot = affine[:3, :3]
    norms = np.linalg.norm(rot, axis=0)
    if np.any(norms == 0):
        raise OrientationError(f"axis {int(np.argmin(norms))}: zero-length direction in affine")
    unit = np.abs(rot / norms)
    for ax in range(3):
        if unit[:, ax].max() < 1.0 - tol:
            raise OrientationError(
                f"axis {ax}: oblique direction {np.round(rot[:, ax] / norms[ax], 4).tolist()}"
            )
    codes = nio.aff2axcodes(affine)
    if None in codes:
        ax = codes.index(None)
        raise OrientationError(f"axis {ax}: direction cannot be assigned to an anatomical axis")
    _check_codes(codes)
    return tuple(codes)


# -- I/O ------------------------------------------------------------------


def _load_image(path) -> nib.Nifti1Image:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    try:
        img = nib.load(str(path))
    except Exception as exc:  # nibabel raises several unrelated types
        raise OSError(f"cannot read NIfTI image {path}: {exc}") from exc
    if not isinstance(img, (nib.Nifti1Image, nib.Nifti2Image)):
        raise UnsupportedFormatError(f"{path}: not a NIfTI image")
    shape = img.shape
    if len(shape) == 4 and shape[3] == 1:
        pass
    elif len(shape) != 3:
        raise UnsupportedFormatError(f"{path}: expected a 3D scalar image, got shape {shape}")
    return img


def _header_geometry(img) -> tuple[np.ndarray, tuple[float, float, float]]:
    affine = np.asarray(img.affine, dtype=np.float64)
    spacing = tuple(float(z) for z in img.header.get_zooms()[:3])
    return affine, spacing


def _lenient_codes(affine: np.ndarray) -> tuple[str, str, str]:
    # Oblique volumes still load; reorient_canonical is where they get rejected.
    try:
        return _codes_from_affine(affine)
    except OrientationError:
        codes = nio.aff2axcodes(affine)
        return tuple(c if c is not None else "?" for c in codes)


def load_volume(path) -> Volume:
    img = _load_image(path)
    data = np.asanyarray(img.dataobj)
    if data.ndim == 4:
        data = data[..., 0]
    if np.iscomplexobj(data) or data.dtype.fields is not None:
        raise UnsupportedFormatError(f"{path}: non-scalar voxel type {data.dtype}")
    affine, spacing = _header_geometry(img)
    return Volume(
        data=np.asarray(data, dtype=np.float32),
        orientation=_lenient_codes(affine),
        spacing_mm=spacing,
        source_id=str(path),
        affine=affine,
    )


def load_labels(path, num_classes: int = NUM_CLASSES, class_names=None) -> LabelVolume:
    img = _load_image(path)
    data = np.asanyarray(img.dataobj)
    if data.ndim == 4:
        data = data[..., 0]
    affine, spacing = _header_geometry(img)
    names = tuple(class_names) if class_names else LABEL_NAMES[:num_classes]
    if len(names) != num_classes:
        names = tuple(f"class_{i}" for i in range(num_classes))
    return LabelVolume(
        data=np.asarray(data),
        orientation=_lenient_codes(affine),
        spacing_mm=spacing,
        source_id=str(path),
        affine=affine,
        num_classes=num_classes,
        class_names=names,
    )


def _save(data: np.ndarray, affine: np.ndarray, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    img = nib.Nifti1Image(data, affine)
    img.set_qform(affine, code=1)
    img.set_sform(affine, code=1)
    img.header.set_data_dtype(data.dtype)
    nib.save(img, str(path))


def save_volume(v: Volume, path) -> None:
    _save(np.asarray(v.data, dtype=np.float32), v.affine, path)


def save_labels(lab: LabelVolume, path) -> None:
    dtype = np.uint8 if lab.num_classes <= 255 else np.int16
    _save(np.asarray(lab.data, dtype=dtype), lab.affine, path)


def cached_load(path, labels: bool = False, cache_dir=None):
    """Load a volume (or label map), going through LODSEG_CACHE when set.

    The cache stores the canonicalized array keyed by absolute path, size and
    mtime, so edits to the source file invalidate the entry.
    """
    cache_dir = cache_dir or os.environ.get("LODSEG_CACHE")
    loader = load_labels if labels else load_volume
    if not cache_dir:
        return reorient_canonical(loader(path))
    st = os.stat(path)
    key = hashlib.sha256(
        f"{os.path.abspath(path)}|{st.st_size}|{st.st_mtime_ns}|{labels}".encode()
    ).hexdigest()[:32]
    entry = Path(cache_dir) / f"{key}.npz"
    if entry.exists():
        with np.load(entry, allow_pickle=False) as z:
            kw = dict(
                data=z["data"],
                orientation=tuple(str(c) for c in z["orientation"]),
                spacing_mm=tuple(z["spacing"]),
                affine=z["affine"],
                source_id=str(path),
            )
        return LabelVolume(**kw) if labels else Volume(**kw)
    v = reorient_canonical(loader(path))
    entry.parent.mkdir(parents=True, exist_ok=True)
    tmp = entry.with_suffix(".tmp.npz")
    np.savez(tmp, data=v.data, orientation=np.array(v.orientation),
             spacing=np.array(v.spacing_mm), affine=v.affine)
    os.replace(tmp, entry)
    return v


# -- geometry -----------------------------------------------------------------


def reorient(v: Volume, target: Sequence[str] = CANONICAL) -> Volume:
    """Permute/flip axes so the header codes read ``target``. No interpolation."""
    target = tuple(str(c).upper() for c in target)
    _check_codes(target)
    current = _codes_from_affine(v.affine)
    if current == target:
        return v.replace(orientation=target, data=v.data.copy())
    transform = nio.ornt_transform(nio.axcodes2ornt(current), nio.axcodes2ornt(target))
    data = nio.apply_orientation(v.data, transform)
    affine = v.affine @ nio.inv_ornt_aff(transform, v.data.shape)
    perm = [int(p) for p in transform[:, 0]]
    spacing = [0.0, 0.0, 0.0]
    for src, dst in enumerate(perm):
        spacing[dst] = v.spacing_mm[src]
    return v.replace(
        data=np.ascontiguousarray(data),
        orientation=target,
        spacing_mm=tuple(spacing),
        affine=affine,
    )


def reorient_canonical(v: Volume) -> Volume:
    return reorient(v, CANONICAL)


def _cube_offsets(n: int, side: int) -> tuple[int, int]:
    """Return (start in source, start in destination) for one axis."""
    if n <= side:
        return 0, (side - n) // 2
    return (n - side) // 2, 0


def pad_crop_to_cube(v: Volume, side: int) -> Volume:
    if side < 1:
        raise ValueError(f"side must be >= 1, got {side}")
    out = np.zeros((side, side, side), dtype=v.data.dtype)
    src, dst, shift = [], [], []
    for n in v.shape:
        s0, d0 = _cube_offsets(n, side)
        length = min(n, side)
        src.append(slice(s0, s0 + length))
        dst.append(slice(d0, d0 + length))
        shift.append(s0 - d0)
    out[tuple(dst)] = v.data[tuple(src)]
    affine = v.affine.copy()
    affine[:3, 3] = v.affine[:3, :3] @ np.asarray(shift, dtype=np.float64) + v.affine[:3, 3]
    return v.replace(data=out, affine=affine)


def undo_pad_crop(data: np.ndarray, original_shape: Sequence[int]) -> np.ndarray:
    """Map a cube produced by :func:`pad_crop_to_cube` back to ``original_shape``.

    Regions that were cropped away come back as zeros.
    """
    side = data.shape[-1]
    out = np.zeros(tuple(data.shape[:-3]) + tuple(original_shape), dtype=data.dtype)
    src, dst = [], []
    for n in original_shape:
        s0, d0 = _cube_offsets(n, side)
        length = min(n, side)
        dst.append(slice(s0, s0 + length))
        src.append(slice(d0, d0 + length))
    lead = (slice(None),) * (data.ndim - 3)
    out[lead + tuple(dst)] = data[lead + tuple(src)]
    return out


# -- intensities and labels ---------------------------------------------------


def z_score(v: Volume) -> Volume:
    data = np.asarray(v.data, dtype=np.float64)
    if not np.all(np.isfinite(data)):
        raise ValueError("z_score requires finite intensities")
    mean = data.mean()
    std = data.std()
    if not std > 0 or std < 1e-12 * max(1.0, abs(mean)):
        raise DegenerateInputError("constant volume: zero intensity variance")
    return v.replace(data=((data - mean) / std).astype(np.float32))


def preprocess(v: Volume, side: int) -> Volume:
    """Canonicalize, z-score on the unpadded grid, then pad/crop to a cube."""
    return pad_crop_to_cube(z_score(reorient_canonical(v)), side)


def one_hot(lab, num_classes: int | None = None) -> np.ndarray:
    if isinstance(lab, LabelVolume):
        data, num_classes = lab.data, lab.num_classes
    else:
        data = np.asarray(lab)
        if num_classes is None:
            raise ValueError("num_classes required for a bare array")
    check_label_range(data, num_classes)
    out = np.zeros((num_classes,) + data.shape, dtype=np.uint8)
    np.put_along_axis(out, data[None].astype(np.intp), 1, axis=0)
    return out


# -- manifest -----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    volume_path: str
    label_path: str | None
    dataset_id: str
    split: str


MANIFEST_HEADER = ("volume_path", "label_path", "dataset_id", "split")


class DatasetManifest:
    def __init__(self, records: Iterable[ManifestRecord], root=None):
        self.records = list(records)
        self.root = Path(root) if root is not None else None
        self.validate()

    def validate(self) -> None:
        for i, r in enumerate(self.records):
            if r.split not in SPLITS:
                raise ManifestError(f"record {i}: unknown split {r.split!r}")
            if r.split == "train" and not r.label_path:
                raise ManifestError(f"record {i}: train record without label_path")
        train_ids = {r.dataset_id for r in self.records if r.split == "train"}
        ext_ids = {r.dataset_id for r in self.records if r.split == "test_ext"}
        leaked = sorted(train_ids & ext_ids)
        if leaked:
            raise ManifestError(f"external datasets also used in training: {leaked}")

    def resolve(self, p: str | None) -> Path | None:
        if not p:
            return None
        path = Path(p)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def select(self, splits: Iterable[str] | None) -> list[ManifestRecord]:
        if splits is None:
            return list(self.records)
        wanted = set(splits)
        return [r for r in self.records if r.split in wanted]

    @classmethod
    def read(cls, path) -> "DatasetManifest":
        path = Path(path)
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
                raise ManifestError(
                    f"{path}: header must be {','.join(MANIFEST_HEADER)}, got {reader.fieldnames}"
                )
            records = [
                ManifestRecord(row["volume_path"], row["label_path"] or None,
                               row["dataset_id"], row["split"])
                for row in reader
            ]
        return cls(records, root=path.parent)

    def write(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(MANIFEST_HEADER)
            for r in self.records:
                w.writerow([r.volume_path, r.label_path or "", r.dataset_id, r.split])


def cap_per_dataset(manifest: DatasetManifest, split: str, cap: int, seed: int) -> DatasetManifest:
    """Keep at most ``cap`` records per dataset within ``split`` (seeded, order-stable)."""
    rng = np.random.default_rng(seed)
    by_ds: dict[str, list[int]] = {}
    for i, r in enumerate(manifest.records):
        if r.split == split:
            by_ds.setdefault(r.dataset_id, []).append(i)
    drop = set()
    for ds in sorted(by_ds):
        idx = by_ds[ds]
        if len(idx) > cap:
            keep = set(rng.choice(idx, size=cap, replace=False).tolist())
            drop.update(i for i in idx if i not in keep)
    kept = [r for i, r in enumerate(manifest.records) if i not in drop]
    return DatasetManifest(kept, root=manifest.root)
