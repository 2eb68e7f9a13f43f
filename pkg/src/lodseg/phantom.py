"""Synthetic multi-site brain phantoms with exact ground truth.

A subject is a nested set of ellipsoidal structures (CSF shell, cortical
ribbon, white-matter core, ventricles, basal ganglia, cerebellum, brainstem)
evaluated at smoothly displaced coordinates. A site is an intensity model:
per-class means and spreads, an order-2 polynomial bias field, a global
gamma and additive noise. Rendering never touches the labels.
"""
from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .volume_io import CANONICAL, LABEL_NAMES, NUM_CLASSES, LabelVolume, Volume

BG, GM, WM, CSF, VENT, CEREB, STEM, BASAL = range(8)

# T1-like ordering of mean intensities on a unit scale.
BASE_MEANS = np.array([0.0, 0.48, 0.94, 0.20, 0.32, 0.60, 0.82, 0.70])

MIN_GRID = 32


class PhantomError(ValueError):
    pass


def _seed_int(*parts) -> int:
    return zlib.crc32("|".join(str(p) for p in parts).encode())


@dataclass
class SubjectGeometry:
    seed: int
    deformation_amplitude: float = 0.05
    # scales[0] scales the whole head; scales[c] the structure of class c.
    scales: tuple[float, ...] = (1.0,) * NUM_CLASSES

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        if len(self.scales) != NUM_CLASSES or min(self.scales) <= 0:
            raise PhantomError("scales must hold one positive factor per class")
        if self.deformation_amplitude < 0:
            raise PhantomError("deformation_amplitude must be non-negative")

    @classmethod
    def random(cls, seed: int, amplitude: float = 0.05, scale_jitter: float = 0.08):
        rng = np.random.default_rng([seed, 11])
        scales = 1.0 + rng.uniform(-scale_jitter, scale_jitter, size=NUM_CLASSES)
        scales[0] = 1.0 + rng.uniform(-scale_jitter, scale_jitter) / 2
        return cls(seed=seed, deformation_amplitude=amplitude, scales=tuple(scales))


def _ellipsoid(u, center, radii):
    return sum(((u[i] - center[i]) / radii[i]) ** 2 for i in range(3))


def template_labels(u: np.ndarray, scales=(1.0,) * NUM_CLASSES) -> np.ndarray:
    """Label the normalized coordinates ``u`` (shape (3, ...)) with the template."""
    g = scales[0]
    out = np.zeros(u.shape[1:], dtype=np.uint8)
    brain_c = (0.0, -0.10, 0.02)
    brain_r = tuple(r * g * scales[CSF] for r in (0.78, 0.66, 0.86))
    s = np.sqrt(_ellipsoid(u, brain_c, brain_r))
    # cortical folding: angular ripple on the grey/white boundary
    theta = np.arctan2(u[1] - brain_c[1], u[0] - brain_c[0])
    phi = np.arctan2(u[2] - brain_c[2], u[0] - brain_c[0])
    ripple = 1.0 + 0.05 * np.sin(6 * theta) * np.sin(5 * phi)
    out[s <= 1.0] = CSF
    out[s <= 0.84 * scales[GM]] = GM
    out[s * ripple <= 0.60 * scales[WM]] = WM
    cereb = _ellipsoid(u, (0.0, 0.52 * g, -0.42 * g),
                       tuple(r * g * scales[CEREB] for r in (0.46, 0.24, 0.30)))
    out[cereb <= 1.0] = CEREB
    stem = _ellipsoid(u, (0.0, 0.55 * g, -0.02 * g),
                      tuple(r * g * scales[STEM] for r in (0.12, 0.40, 0.13)))
    out[stem <= 1.0] = STEM
    for side in (-1.0, 1.0):
        basal = _ellipsoid(u, (0.30 * side * g, 0.02 * g, 0.10 * g),
                           tuple(r * g * scales[BASAL] for r in (0.10, 0.13, 0.17)))
        out[basal <= 1.0] = BASAL
        vent = _ellipsoid(u, (0.12 * side * g, -0.12 * g, 0.02 * g),
                          tuple(r * g * scales[VENT] for r in (0.09, 0.14, 0.30)))
        out[vent <= 1.0] = VENT
    return out


def _grid(side: int) -> np.ndarray:
    ax = (np.arange(side) + 0.5) / side * 2.0 - 1.0
    return np.stack(np.meshgrid(ax, ax, ax, indexing="ij"))


def displacement_field(side: int, amplitude: float, seed: int) -> np.ndarray:
    """Smooth random displacement (3, s, s, s) in normalized units, fold-free."""
    if amplitude == 0:
        return np.zeros((3, side, side, side))
    rng = np.random.default_rng([seed, 23])
    sigma = side / 6.0
    field = np.stack([
        ndimage.gaussian_filter(rng.standard_normal((side,) * 3), sigma, mode="wrap")
        for _ in range(3)
    ])
    field *= amplitude / np.abs(field).max()
    # cap the Jacobian deviation so x -> x + d(x) stays invertible
    h = 2.0 / side
    grad_max = max(np.abs(np.gradient(field[i], h, axis=j)).max()
                   for i in range(3) for j in range(3))
    if grad_max > 0.5:
        field *= 0.5 / grad_max
    return field


def generate_subject(geom: SubjectGeometry, grid_side: int = 64,
                     source_id: str | None = None) -> LabelVolume:
    if grid_side < MIN_GRID:
        raise PhantomError(f"grid_side {grid_side} too small to host all structures (min {MIN_GRID})")
    u = _grid(grid_side)
    u = u + displacement_field(grid_side, geom.deformation_amplitude, geom.seed)
    labels = template_labels(u, geom.scales)
    counts = np.bincount(labels.ravel(), minlength=NUM_CLASSES)
    if np.any(counts == 0):
        missing = [LABEL_NAMES[c] for c in np.flatnonzero(counts == 0)]
        raise PhantomError(f"structures lost at grid {grid_side}: {missing}")
    spacing = 256.0 / grid_side
    return LabelVolume(
        data=labels,
        orientation=CANONICAL,
        spacing_mm=(spacing,) * 3,
        source_id=source_id or f"subject-{geom.seed}",
    )


@dataclass
class SiteProfile:
    site_id: str
    class_mean: tuple[float, ...] = tuple(BASE_MEANS * 1000.0)
    class_std: tuple[float, ...] = (0.0,) * NUM_CLASSES
    # exp() of an order-2 polynomial in (x, y, z, x^2, y^2, z^2, xy, xz, yz)
    bias_coeffs: tuple[float, ...] = (0.0,) * 9
    noise_sigma: float = 0.0
    gamma: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.class_mean = tuple(float(m) for m in self.class_mean)
        self.class_std = tuple(float(s) for s in self.class_std)
        self.bias_coeffs = tuple(float(c) for c in self.bias_coeffs)
        self.validate()

    def validate(self) -> None:
        if len(self.class_mean) != NUM_CLASSES or len(self.class_std) != NUM_CLASSES:
            raise PhantomError("class_mean/class_std need one value per class")
        if min(self.class_std) < 0 or self.noise_sigma < 0:
            raise PhantomError("spreads must be non-negative")
        if not 0.5 <= self.gamma <= 2.0:
            raise PhantomError(f"gamma {self.gamma} outside [0.5, 2.0]")
        if len(self.bias_coeffs) != 9:
            raise PhantomError("bias_coeffs needs 9 polynomial coefficients")
        fg = sorted(self.class_mean[1:])
        gap = min(b - a for a, b in zip(fg, fg[1:]))
        if gap < 3.0 * max(self.class_std):
            raise PhantomError(
                f"site {self.site_id}: foreground means {gap:.4g} apart, "
                f"need >= 3 x max class_std = {3 * max(self.class_std):.4g}"
            )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def sample(cls, site_id: str, seed: int, gain=(500.0, 2000.0), mean_jitter=0.035,
               std=(0.003, 0.008), gamma=(0.5, 2.0), noise=(0.01, 0.06),
               bias_linear=0.3, bias_quadratic=0.2) -> "SiteProfile":
        rng = np.random.default_rng([seed, 31])
        g = rng.uniform(*gain)
        means = BASE_MEANS + rng.uniform(-mean_jitter, mean_jitter, NUM_CLASSES)
        means[0] = BASE_MEANS[0] + abs(means[0] - BASE_MEANS[0])
        stds = rng.uniform(*std, NUM_CLASSES)
        coeffs = np.concatenate([
            rng.uniform(-bias_linear, bias_linear, 3),
            rng.uniform(-bias_quadratic, bias_quadratic, 6),
        ])
        return cls(
            site_id=site_id,
            class_mean=tuple(means * g),
            class_std=tuple(stds * g),
            bias_coeffs=tuple(coeffs),
            noise_sigma=float(rng.uniform(*noise) * g),
            # log-uniform so contrast compression and expansion are equally likely
            gamma=float(np.exp(rng.uniform(np.log(gamma[0]), np.log(gamma[1])))),
            seed=int(seed),
        )


def bias_field(side_or_shape, coeffs) -> np.ndarray:
    shape = (side_or_shape,) * 3 if np.isscalar(side_or_shape) else tuple(side_or_shape)
    axes = [(np.arange(n) + 0.5) / n * 2.0 - 1.0 for n in shape]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    terms = (x, y, z, x * x, y * y, z * z, x * y, x * z, y * z)
    poly = sum(c * t for c, t in zip(coeffs, terms) if c != 0.0)
    return np.exp(poly) if not np.isscalar(poly) else np.ones(shape)


def render_subject(labels: LabelVolume, site: SiteProfile, subject_key=None) -> Volume:
    key = labels.source_id if subject_key is None else subject_key
    rng = np.random.default_rng([site.seed, _seed_int(key), 47])
    lab = np.asarray(labels.data, dtype=np.intp)
    mean = np.asarray(site.class_mean)[lab]
    img = mean.astype(np.float64)
    if max(site.class_std) > 0:
        img = img + np.asarray(site.class_std)[lab] * rng.standard_normal(lab.shape)
    if any(site.bias_coeffs):
        img = img * bias_field(lab.shape, site.bias_coeffs)
    if site.gamma != 1.0:
        ref = max(site.class_mean)
        img = np.sign(img) * ref * (np.abs(img) / ref) ** site.gamma
    if site.noise_sigma > 0:
        img = img + site.noise_sigma * rng.standard_normal(lab.shape)
    return Volume(
        data=img.astype(np.float32),
        orientation=labels.orientation,
        spacing_mm=labels.spacing_mm,
        source_id=f"{site.site_id}/{key}",
        affine=labels.affine,
    )


def intensity_histogram(data: np.ndarray, bins: int = 64, lo: float = -3.0, hi: float = 4.0):
    """Normalized histogram of z-scored intensities on a fixed support."""
    d = np.asarray(data, dtype=np.float64)
    z = (d - d.mean()) / d.std()
    h, _ = np.histogram(np.clip(z, lo, hi), bins=bins, range=(lo, hi))
    return h / h.sum()


def histogram_distance(a: np.ndarray, b: np.ndarray) -> float:
    """L1 distance between the z-scored intensity histograms of two images."""
    return float(np.abs(intensity_histogram(a) - intensity_histogram(b)).sum())


@dataclass
class PhantomSubject:
    subject_id: str
    site_id: str
    volume: Volume
    labels: LabelVolume


@dataclass
class RosterConfig:
    """Site roster for a phantom dataset.

    The first ``n_sites - ext_sites`` sites are internal: each contributes
    ``train_per_site`` training, ``val_per_site`` validation and
    ``test_per_site`` internal-test subjects. External sites contribute
    ``ext_subjects`` subjects each, all in ``test_ext``.
    """

    n_sites: int = 10
    ext_sites: int = 2
    train_per_site: int = 15
    val_per_site: int = 1
    test_per_site: int = 5
    ext_subjects: int = 5
    grid_side: int = 64
    seed: int = 0
    deformation_amplitude: float = 0.05
    site_ranges: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.n_sites < 1:
            raise PhantomError("n_sites must be >= 1")
        if not 0 <= self.ext_sites < self.n_sites:
            raise PhantomError("ext_sites must leave at least one internal site")
        if self.grid_side < MIN_GRID:
            raise PhantomError(f"grid_side must be >= {MIN_GRID}")
        for name in ("train_per_site", "val_per_site", "test_per_site", "ext_subjects"):
            if getattr(self, name) < 0:
                raise PhantomError(f"{name} must be non-negative")

    def site_profiles(self) -> list[SiteProfile]:
        return [
            SiteProfile.sample(f"site{i:02d}", _seed_int(self.seed, "site", i), **self.site_ranges)
            for i in range(self.n_sites)
        ]

    def subject_splits(self, site_index: int) -> list[str]:
        if site_index >= self.n_sites - self.ext_sites:
            return ["test_ext"] * self.ext_subjects
        return (["train"] * self.train_per_site + ["val"] * self.val_per_site
                + ["test_int"] * self.test_per_site)


def make_subject(site: SiteProfile, site_index: int, subject_index: int, roster: RosterConfig,
                 ) -> PhantomSubject:
    sid = f"s{site_index:02d}_sub{subject_index:03d}"
    geom = SubjectGeometry.random(_seed_int(roster.seed, "subject", site_index, subject_index),
                                  amplitude=roster.deformation_amplitude)
    labels = generate_subject(geom, roster.grid_side, source_id=sid)
    return PhantomSubject(sid, site.site_id, render_subject(labels, site), labels)


def generate_roster(roster: RosterConfig):
    """Yield (PhantomSubject, split) for every subject of the roster."""
    roster.validate()
    for i, site in enumerate(roster.site_profiles()):
        for j, split in enumerate(roster.subject_splits(i)):
            yield make_subject(site, i, j, roster), split
