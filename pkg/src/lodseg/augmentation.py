"""Augmentation transform pool, training pipeline and the robustness-driven
selection protocol.

Transforms act on raw (canonicalized, not yet z-scored) intensities. The
default roster and probabilities are:
sagittal flip (p=1/2), grid distortion (p=1), six mutually exclusive noise
transforms (p=1/6 each), ghosting and bias-field inhomogeneity (p=1/2 each).

A parameter given as a two-element list is a range sampled uniformly per
call; a scalar is used as is. ``probe_robustness`` pins the swept parameter
to a scalar.
"""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage

from .losses import dice_per_class
from .phantom import bias_field
from .volume_io import LabelVolume, Volume


class AugmentationConfigError(ValueError):
    pass


GEOMETRIC = ("flip", "grid_distortion")
NOISE = ("salt_pepper", "gaussian", "gamma", "contrast", "blur", "downscale")
ARTEFACT = ("ghosting", "inhomogeneity")

# name -> (default parameters, default probability, parameter probed by sweeps)
_REGISTRY: dict[str, tuple[dict, float, str | None]] = {
    "flip": ({"axis": 0}, 0.5, None),
    "grid_distortion": ({"steps": 5, "distortion": 0.1}, 1.0, "distortion"),
    "salt_pepper": ({"amount": 0.01, "salt": 0.2}, 1 / 6, "amount"),
    "gaussian": ({"amount": 0.2}, 1 / 6, "amount"),
    "gamma": ({"clip": 0.025, "log_gamma": [-0.4, 0.4]}, 1 / 6, "log_gamma"),
    "contrast": ({"alpha": [0.5, 3.0]}, 1 / 6, "alpha"),
    "blur": ({"limit": 3}, 1 / 6, "limit"),
    "downscale": ({"scale": [0.25, 0.75]}, 1 / 6, "scale"),
    "ghosting": ({"max_reps": 4, "intensity": [0.05, 0.3]}, 0.5, "intensity"),
    "inhomogeneity": ({"amplitude": 0.2}, 0.5, "amplitude"),
    "identity": ({}, 1.0, "level"),
}
_EXTRA_PARAMS = {"identity": {"level"}}


@dataclass
class TransformSpec:
    name: str
    probability: float | None = None
    parameters: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in _REGISTRY:
            raise AugmentationConfigError(f"unknown transform {self.name!r}")
        defaults, p, _ = _REGISTRY[self.name]
        unknown = set(self.parameters) - set(defaults) - _EXTRA_PARAMS.get(self.name, set())
        if unknown:
            raise AugmentationConfigError(
                f"{self.name}: unknown parameter(s) {sorted(unknown)}; allowed {sorted(defaults)}"
            )
        self.parameters = {**defaults, **self.parameters}
        if self.probability is None:
            self.probability = p
        if not 0.0 <= self.probability <= 1.0:
            raise AugmentationConfigError(f"{self.name}: probability must be in [0, 1]")

    @property
    def affects_labels(self) -> bool:
        return self.name in GEOMETRIC

    @property
    def group(self) -> str:
        if self.name in GEOMETRIC:
            return "geometric"
        if self.name in NOISE:
            return "noise"
        return "artefact"

    def to_dict(self) -> dict:
        return {"name": self.name, "probability": self.probability, "parameters": self.parameters}

    @classmethod
    def from_dict(cls, d) -> "TransformSpec":
        if isinstance(d, str):
            return cls(d)
        return cls(d["name"], d.get("probability"), dict(d.get("parameters", {})))


def default_specs() -> list[TransformSpec]:
    return [TransformSpec(n) for n in GEOMETRIC + NOISE + ARTEFACT]


def sweep_parameter(name: str) -> str | None:
    return _REGISTRY[name][2]


def _draw(value, rng):
    if isinstance(value, (list, tuple)):
        lo, hi = value
        return float(rng.uniform(lo, hi))
    return value


# -- individual transforms ----------------------------------------------------
# Each takes (image, labels or None, params, rng) and returns (image, labels).


def _flip(img, lab, p, rng):
    ax = int(p["axis"])
    img = np.flip(img, axis=ax).copy()
    if lab is not None:
        lab = np.flip(lab, axis=ax).copy()
    return img, lab


def _distorted_axis(n, steps, limit, rng):
    """Sample positions for one axis: ``steps`` cells with jittered widths."""
    widths = 1.0 + rng.uniform(-limit, limit, steps)
    edges = np.concatenate([[0.0], np.cumsum(widths)])
    edges *= (n - 1) / edges[-1]
    knots = np.linspace(0, n - 1, steps + 1)
    return np.interp(np.arange(n), knots, edges)


def grid_coordinates(shape, steps, limit, rng):
    axes = [_distorted_axis(n, int(steps), float(limit), rng) for n in shape]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def _grid_distortion(img, lab, p, rng):
    limit = _draw(p["distortion"], rng)
    if limit == 0:
        return img, lab
    coords = grid_coordinates(img.shape, p["steps"], limit, rng)
    out = ndimage.map_coordinates(img, coords, order=1, mode="nearest").astype(img.dtype)
    if lab is not None:
        lab = ndimage.map_coordinates(lab, coords, order=0, mode="nearest").astype(lab.dtype)
    return out, lab


def _salt_pepper(img, lab, p, rng):
    amount = _draw(p["amount"], rng)
    if amount == 0:
        return img, lab
    out = img.copy()
    hit = rng.random(img.shape) < amount
    salt = rng.random(img.shape) < float(p["salt"])
    out[hit & salt] = img.max()
    out[hit & ~salt] = img.min()
    return out, lab


def _gaussian(img, lab, p, rng):
    amount = _draw(p["amount"], rng)
    if amount == 0:
        return img, lab
    sigma = amount * float(img.std())
    return (img + sigma * rng.standard_normal(img.shape)).astype(img.dtype), lab


def _gamma(img, lab, p, rng):
    log_g = _draw(p["log_gamma"], rng)
    if log_g == 0:
        return img, lab
    lo, hi = np.quantile(img, [p["clip"], 1.0 - p["clip"]])
    if hi <= lo:
        return img, lab
    x = np.clip((img - lo) / (hi - lo), 0.0, 1.0)
    return (lo + (hi - lo) * x ** np.exp(log_g)).astype(img.dtype), lab


def _contrast(img, lab, p, rng):
    alpha = _draw(p["alpha"], rng)
    if alpha == 1:
        return img, lab
    m = img.mean()
    return (m + alpha * (img - m)).astype(img.dtype), lab


def _blur(img, lab, p, rng):
    limit = int(_draw(p["limit"], rng))
    sizes = list(range(3, limit + 1, 2))
    if not sizes:
        return img, lab
    k = int(rng.choice(sizes))
    return ndimage.uniform_filter(img, size=k, mode="nearest").astype(img.dtype), lab


def _downscale(img, lab, p, rng):
    scale = _draw(p["scale"], rng)
    if scale >= 1:
        return img, lab
    small = ndimage.zoom(img, scale, order=1, mode="nearest", grid_mode=True)
    back = ndimage.zoom(small, np.divide(img.shape, small.shape), order=1, mode="nearest",
                        grid_mode=True)
    return back[: img.shape[0], : img.shape[1], : img.shape[2]].astype(img.dtype), lab


def ghost(img, num_ghosts: int, intensity: float, axis: int) -> np.ndarray:
    """k-space ghosting: every (num_ghosts+1)-th line along ``axis`` scaled by 1 - intensity.

    This leaves ``num_ghosts`` copies shifted by multiples of n/(num_ghosts+1),
    each with relative amplitude about intensity/(num_ghosts+1).
    """
    if intensity == 0 or num_ghosts < 1:
        return img
    k = np.fft.fftn(img)
    period = num_ghosts + 1
    index = [slice(None)] * 3
    index[axis] = slice(0, None, period)
    k[tuple(index)] *= 1.0 - intensity
    return np.real(np.fft.ifftn(k)).astype(img.dtype)


def _ghosting(img, lab, p, rng):
    n = int(rng.integers(1, int(p["max_reps"]) + 1))
    intensity = _draw(p["intensity"], rng)
    axis = int(rng.integers(0, 3))
    return ghost(img, n, intensity, axis), lab


def _inhomogeneity(img, lab, p, rng):
    amp = _draw(p["amplitude"], rng)
    if amp == 0:
        return img, lab
    coeffs = rng.uniform(-1.0, 1.0, 9)
    shape = np.log(bias_field(img.shape, coeffs))
    shape /= max(np.abs(shape).max(), 1e-12)
    # multiplicative field spanning at most [1 - amp, 1 + amp]
    return (img * (1.0 + amp * shape)).astype(img.dtype), lab


def _identity(img, lab, p, rng):
    return img, lab


_FUNCS: dict[str, Callable] = {
    "flip": _flip,
    "grid_distortion": _grid_distortion,
    "salt_pepper": _salt_pepper,
    "gaussian": _gaussian,
    "gamma": _gamma,
    "contrast": _contrast,
    "blur": _blur,
    "downscale": _downscale,
    "ghosting": _ghosting,
    "inhomogeneity": _inhomogeneity,
    "identity": _identity,
}


def _arrays(v, lab):
    img = np.asarray(getattr(v, "data", v), dtype=np.float32)
    labels = None if lab is None else np.asarray(getattr(lab, "data", lab))
    return img, labels


def _wrap(v, lab, img, labels):
    out_v = v.replace(data=img) if isinstance(v, Volume) else img
    if lab is None:
        return out_v, None
    out_l = lab.replace(data=labels) if isinstance(lab, LabelVolume) else labels
    return out_v, out_l


def _rng(seed):
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def apply_transform(spec: TransformSpec, v, lab=None, seed=0, force: bool = False):
    """Apply ``spec`` with its probability (always if ``force``); returns (volume, labels)."""
    rng = _rng(seed)
    img, labels = _arrays(v, lab)
    if force or rng.random() < spec.probability:
        img, labels = _FUNCS[spec.name](img, labels, spec.parameters, rng)
    return _wrap(v, lab, img, labels)


def sample_seed(run_seed: int, sample_id: str, epoch: int, level: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(run_seed), zlib.crc32(str(sample_id).encode()),
                                   int(epoch), int(level)])


class Pipeline:
    """Geometric transforms, then artefacts, then at most one noise transform.

    Geometric and artefact transforms fire independently with their own
    probabilities. Noise transforms are mutually exclusive: one uniform draw
    picks the transform whose probability slot it lands in (slots are laid
    end to end), or none if it falls past their sum.
    """

    def __init__(self, specs: Iterable[TransformSpec] = ()):
        self.specs = [s if isinstance(s, TransformSpec) else TransformSpec.from_dict(s)
                      for s in specs]
        self.independent = [s for s in self.specs if s.group != "noise"]
        self.independent.sort(key=lambda s: 0 if s.group == "geometric" else 1)
        self.noise = [s for s in self.specs if s.group == "noise"]
        total = sum(s.probability for s in self.noise)
        if total > 1.0 + 1e-9:
            raise AugmentationConfigError(f"noise probabilities sum to {total} > 1")

    def draw(self, rng) -> list[TransformSpec]:
        """Choose the transforms for one call (consumes rng)."""
        chosen = [s for s in self.independent if rng.random() < s.probability]
        u = rng.random()
        acc = 0.0
        for s in self.noise:
            acc += s.probability
            if u < acc:
                chosen.append(s)
                break
        return chosen

    def __call__(self, v, lab=None, seed=0):
        rng = _rng(seed)
        img, labels = _arrays(v, lab)
        for spec in self.draw(rng):
            img, labels = _FUNCS[spec.name](img, labels, spec.parameters, rng)
        return _wrap(v, lab, img, labels)

    @property
    def is_identity(self) -> bool:
        return not self.specs


def build_pipeline(specs: Iterable[TransformSpec] = ()) -> Pipeline:
    return Pipeline(specs)


# -- robustness probing and selection ----------------------------------------


@dataclass
class RobustnessCurve:
    transform: str
    sweep: list[float]
    dice: list[float]
    baseline: float

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.sweep, self.sweep[1:])):
            raise ValueError("sweep values must be strictly increasing")
        if len(self.dice) != len(self.sweep):
            raise ValueError("one Dice value per sweep value")

    @property
    def max_drop(self) -> float:
        return float(self.baseline - min(self.dice)) if self.dice else 0.0

    @property
    def drop_at_max(self) -> float:
        return float(self.baseline - self.dice[-1])


def _mean_foreground(pred, gt, num_classes):
    return float(dice_per_class(pred, gt, num_classes)[1:].mean())


def probe_robustness(segment, val_set: Sequence, transform, sweep: Sequence[float],
                     seed: int = 0, num_classes: int = 8) -> RobustnessCurve:
    """Mean foreground Dice of ``segment`` on transformed validation volumes.

    ``segment`` maps a Volume to a label grid (a Segmenter works). ``val_set``
    holds (Volume, LabelVolume) pairs. The transform always fires, with its
    sweep parameter pinned to each value in turn; the per-volume random
    stream is the same for every sweep value.
    """
    if not val_set:
        raise ValueError("empty validation set")
    spec = transform if isinstance(transform, TransformSpec) else TransformSpec(transform)
    param = sweep_parameter(spec.name)

    def score(v, lab):
        pred = segment(v)
        return _mean_foreground(getattr(pred, "data", pred), lab.data, num_classes)

    baseline = float(np.mean([score(v, lab) for v, lab in val_set]))
    values = []
    for x in sweep:
        pinned = TransformSpec(spec.name, 1.0, {**spec.parameters, **({param: x} if param else {})})
        scores = []
        for i, (v, lab) in enumerate(val_set):
            tv, tl = apply_transform(pinned, v, lab, seed=[seed, i], force=True)
            scores.append(score(tv, tl))
        values.append(float(np.mean(scores)))
    return RobustnessCurve(spec.name, [float(s) for s in sweep], values, baseline)


def select_transforms(curves: Iterable[RobustnessCurve], drop_threshold: float = 0.01) -> list[str]:
    """Transforms whose worst Dice drop exceeds ``drop_threshold``."""
    return [c.transform for c in curves if c.max_drop > drop_threshold]


def write_curves(curves: Iterable[RobustnessCurve], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["transform", "sweep_value", "dice", "baseline"])
        for c in curves:
            for x, d in zip(c.sweep, c.dice):
                w.writerow([c.transform, f"{x:.6g}", f"{d:.6f}", f"{c.baseline:.6f}"])


def plot_curves(curves: Sequence[RobustnessCurve], path, others: Sequence[RobustnessCurve] = ()):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = len(curves)
    fig, axes = plt.subplots(1, n, figsize=(3.2 * n, 3.0), squeeze=False)
    by_name = {c.transform: c for c in others}
    for ax, c in zip(axes[0], curves):
        ax.plot(c.sweep, c.dice, "o-", label="no augmentation")
        if c.transform in by_name:
            o = by_name[c.transform]
            ax.plot(o.sweep, o.dice, "s-", label="augmented")
        ax.axhline(c.baseline, color="grey", lw=0.8, ls="--")
        ax.set_title(c.transform)
        ax.set_xlabel("parameter")
        ax.set_ylabel("mean Dice")
    axes[0][0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
