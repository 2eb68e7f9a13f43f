"""Segmentation inference, per-volume Dice records and INT/EXT statistics."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .losses import dice_per_class
from .network import LODNetwork
from .volume_io import (
    LabelVolume,
    Volume,
    DatasetManifest,
    cached_load,
    pad_crop_to_cube,
    reorient,
    reorient_canonical,
    undo_pad_crop,
    z_score,
)


class Segmenter:
    """Full-volume inference: canonicalize, z-score, pad, predict, undo padding, reorient back."""

    def __init__(self, model: LODNetwork, level: int = 1):
        self.model = model
        self.level = level
        self.model.eval()

    def __call__(self, v: Volume) -> LabelVolume:
        canon = reorient_canonical(v)
        side = self.model.cfg.input_side
        x = pad_crop_to_cube(z_score(canon), side).data
        probs = self.model.predict(x, level=self.level)
        labels = probs.argmax(axis=0).astype(np.uint8)
        if self.level > 1:
            factor = side // labels.shape[0]
            labels = np.repeat(np.repeat(np.repeat(labels, factor, 0), factor, 1), factor, 2)
        labels = undo_pad_crop(labels, canon.shape)
        out = LabelVolume(labels, canon.orientation, canon.spacing_mm, v.source_id, canon.affine,
                          num_classes=self.model.cfg.num_classes)
        return reorient(out, v.orientation)


@dataclass
class EvalRecord:
    volume_id: str
    dataset_id: str
    split: str
    dice: list[float] = field(default_factory=list)
    mean_fg: float = float("nan")
    error: str = ""
    seconds: float = 0.0

    @classmethod
    def from_labels(cls, volume_id, dataset_id, split, pred, gt, num_classes) -> "EvalRecord":
        d = dice_per_class(pred, gt, num_classes)
        return cls(volume_id, dataset_id, split, [float(x) for x in d], float(d[1:].mean()))

    @property
    def ok(self) -> bool:
        return not self.error


def evaluate(model: LODNetwork, manifest: DatasetManifest, splits: Iterable[str] | None = None,
             level: int = 1) -> list[EvalRecord]:
    """One record per selected manifest entry, in manifest order.

    Failures (missing labels, unreadable files) become records with ``error``
    set and the run continues.
    """
    seg = Segmenter(model, level)
    out = []
    for r in manifest.select(splits):
        t0 = time.perf_counter()
        try:
            if not r.label_path:
                raise ValueError("no label_path for this record")
            v = cached_load(manifest.resolve(r.volume_path))
            gt = reorient_canonical(cached_load(manifest.resolve(r.label_path), labels=True))
            pred = reorient_canonical(seg(v))
            rec = EvalRecord.from_labels(r.volume_path, r.dataset_id, r.split, pred.data, gt.data,
                                         model.cfg.num_classes)
        except (OSError, ValueError) as exc:
            rec = EvalRecord(r.volume_path, r.dataset_id, r.split, error=str(exc))
        rec.seconds = time.perf_counter() - t0
        out.append(rec)
    return out


def evaluate_pairs(segment, pairs: Sequence[tuple[str, str, str, Volume, LabelVolume]],
                   num_classes: int = 8) -> list[EvalRecord]:
    """Evaluate in-memory (volume_id, dataset_id, split, volume, labels) tuples."""
    out = []
    for vid, ds, split, v, gt in pairs:
        pred = segment(v)
        out.append(EvalRecord.from_labels(vid, ds, split, getattr(pred, "data", pred), gt.data,
                                          num_classes))
    return out


# -- statistics ---------------------------------------------------------------


def welch_ttest(a: Sequence[float], b: Sequence[float], eps: float = 1e-12) -> tuple[float, float]:
    """Two-sided Welch t-test; returns (t, p).

    Zero-variance samples are guarded: a variance floor of ``eps`` keeps the
    statistic finite, and identical constant samples give p = 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = len(a), len(b)
    diff = a.mean() - b.mean()
    va, vb = a.var(ddof=1) / na, b.var(ddof=1) / nb
    if va + vb == 0.0:
        if diff == 0.0:
            return 0.0, 1.0
        va = vb = eps
    se2 = va + vb
    t = diff / math.sqrt(se2)
    dof = se2**2 / (va**2 / (na - 1) + vb**2 / (nb - 1))
    p = 2.0 * stats.t.sf(abs(t), dof)
    return float(t), float(min(1.0, p))


@dataclass
class GapReport:
    int_mean: float
    int_std: float
    ext_mean: float
    ext_std: float
    gap: float
    t: float
    p_value: float
    n_int: int
    n_ext: int

    @property
    def significant(self) -> bool:
        return self.p_value < 0.05


def gap_report(records: Sequence[EvalRecord], bonferroni: int = 1,
               internal: str = "test_int", external: str = "test_ext") -> GapReport:
    """INT vs EXT mean foreground Dice with a Welch test (p multiplied by ``bonferroni``)."""
    # sorted so the float reductions do not depend on record order
    a = sorted(r.mean_fg for r in records if r.ok and r.split == internal)
    b = sorted(r.mean_fg for r in records if r.ok and r.split == external)
    if len(a) < 2 or len(b) < 2:
        raise ValueError(f"need >= 2 records per side (got {internal}={len(a)}, {external}={len(b)})")
    t, p = welch_ttest(a, b)
    return GapReport(float(np.mean(a)), float(np.std(a, ddof=1)), float(np.mean(b)),
                     float(np.std(b, ddof=1)), float(np.mean(a) - np.mean(b)), t,
                     min(1.0, p * bonferroni), len(a), len(b))


def sites_curve(records_by_k: dict[int, Sequence[EvalRecord]]) -> list[dict]:
    """Rows of (k, INT, EXT, gap, p) for models trained on k sites."""
    rows = []
    for k in sorted(records_by_k):
        rep = gap_report(records_by_k[k])
        rows.append({"k": k, "int_dice": rep.int_mean, "ext_dice": rep.ext_mean, "gap": rep.gap,
                     "p_value": rep.p_value})
    return rows


# -- persistence ----------------------------------------------------------------


RECORD_FIELDS = ("volume_id", "dataset_id", "split", "mean_fg", "error", "seconds")


def write_records(records: Sequence[EvalRecord], path, num_classes: int = 8) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(RECORD_FIELDS) + [f"dice_{c}" for c in range(num_classes)])
        for r in records:
            dice = r.dice if r.dice else [""] * num_classes
            w.writerow([r.volume_id, r.dataset_id, r.split,
                        "" if not r.ok else repr(r.mean_fg), r.error, f"{r.seconds:.3f}"]
                       + [x if x == "" else repr(x) for x in dice])
    return path


def read_records(path) -> list[EvalRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            dice_keys = sorted((k for k in row if k.startswith("dice_")),
                               key=lambda k: int(k.split("_")[1]))
            dice = [float(row[k]) for k in dice_keys if row[k] != ""]
            out.append(EvalRecord(row["volume_id"], row["dataset_id"], row["split"], dice,
                                  float(row["mean_fg"]) if row["mean_fg"] else float("nan"),
                                  row["error"], float(row["seconds"] or 0)))
    return out


def write_table(rows: Sequence[dict], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})
    return path


def plot_sites_curve(rows: Sequence[dict], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ks = [r["k"] for r in rows]
    fig, ax = plt.subplots(figsize=(4, 3))
    ax.plot(ks, [r["int_dice"] for r in rows], "o-", label="INT")
    ax.plot(ks, [r["ext_dice"] for r in rows], "s-", label="EXT")
    ax.set_xscale("log", base=2)
    ax.set_xlabel("training sites")
    ax.set_ylabel("mean foreground Dice")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_dataset_strip(records: Sequence[EvalRecord], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ok = [r for r in records if r.ok]
    names = sorted({r.dataset_id for r in ok})
    fig, ax = plt.subplots(figsize=(max(4, 0.5 * len(names)), 3))
    for i, name in enumerate(names):
        ys = [r.mean_fg for r in ok if r.dataset_id == name]
        color = "tab:red" if any(r.split == "test_ext" for r in ok if r.dataset_id == name) else "tab:blue"
        ax.plot(np.full(len(ys), i) + np.linspace(-0.15, 0.15, len(ys)), ys, ".", color=color)
    ax.set_xticks(range(len(names)), names, rotation=60, fontsize=7)
    ax.set_ylabel("mean foreground Dice")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
