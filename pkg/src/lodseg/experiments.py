"""Phantom-scale experiments: site-count generalization, augmentation
robustness and the memorization smoke run.

Everything here runs in memory on generated phantoms; the CLI wraps these
functions and persists their outputs.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .augmentation import (
    RobustnessCurve,
    TransformSpec,
    default_specs,
    probe_robustness,
    select_transforms,
    sweep_parameter,
)
from .evaluator import EvalRecord, Segmenter, evaluate_pairs, gap_report, sites_curve
from .network import LODConfig, LODNetwork
from .phantom import RosterConfig, SiteProfile, make_subject
from .trainer import TrainConfig, Trainer, TrainingSample

log = logging.getLogger(__name__)


def _subjects(roster: RosterConfig, site_index: int, split: str, site: SiteProfile,
              limit: int | None = None):
    """(PhantomSubject) for the subjects of one site in one split, in roster order."""
    splits = roster.subject_splits(site_index)
    idx = [j for j, s in enumerate(splits) if s == split][:limit]
    return [make_subject(site, site_index, j, roster) for j in idx]


def _as_sample(subj) -> TrainingSample:
    return TrainingSample(subj.subject_id, subj.site_id, subj.volume, subj.labels)


# -- multi-site generalization ------------------------------------------------


@dataclass
class SitesExperiment:
    roster: RosterConfig = field(default_factory=lambda: RosterConfig(
        n_sites=10, ext_sites=2, train_per_site=15, val_per_site=1, test_per_site=10,
        ext_subjects=5, grid_side=64))
    site_counts: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    # internal test volumes per model, drawn round-robin from its training sites
    int_test: int = 10
    net: LODConfig = field(default_factory=lambda: LODConfig(
        levels=2, down_factor=4, input_side=64, channels_per_level=[[8, 16, 32], [8, 16, 32]],
        convs_per_block=1))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs_per_level=[30, 20], initial_lr=2e-3, samples_per_epoch=16))

    def validate(self) -> None:
        self.roster.validate()
        internal = self.roster.n_sites - self.roster.ext_sites
        if max(self.site_counts) > internal:
            raise ValueError(f"site counts up to {max(self.site_counts)} but only {internal} internal sites")
        if self.int_test > self.roster.test_per_site * min(self.site_counts):
            raise ValueError("not enough internal test subjects per site for int_test")


@dataclass
class SitesResult:
    rows: list[dict]
    records: dict[int, list[EvalRecord]]
    models: dict[int, LODNetwork]
    seconds: float

    def gaps(self) -> list[float]:
        return [r["gap"] for r in self.rows]


def _round_robin(per_site: list[list], total: int) -> list:
    out, j = [], 0
    while len(out) < total:
        for subjects in per_site:
            if j < len(subjects) and len(out) < total:
                out.append(subjects[j])
        j += 1
    return out


def run_sites_experiment(exp: SitesExperiment, keep_models: bool = True) -> SitesResult:
    exp.validate()
    t0 = time.perf_counter()
    roster = exp.roster
    profiles = roster.site_profiles()
    k_max = max(exp.site_counts)
    internal = roster.n_sites - roster.ext_sites
    train = {i: [_as_sample(s) for s in _subjects(roster, i, "train", profiles[i])]
             for i in range(k_max)}
    val = {i: [_as_sample(s) for s in _subjects(roster, i, "val", profiles[i])]
           for i in range(k_max)}
    tests = {i: _subjects(roster, i, "test_int", profiles[i]) for i in range(k_max)}
    ext = [s for i in range(internal, roster.n_sites)
           for s in _subjects(roster, i, "test_ext", profiles[i])]

    records, models, rows = {}, {}, []
    for k in exp.site_counts:
        sites = list(range(k))
        tr = [s for i in sites for s in train[i]]
        va = [s for i in sites for s in val[i]]
        log.info("training on %d site(s): %d train, %d val", k, len(tr), len(va))
        model = Trainer(exp.net, exp.train, tr, va).fit()
        int_subjects = _round_robin([tests[i] for i in sites], exp.int_test)
        pairs = [(s.subject_id, s.site_id, "test_int", s.volume, s.labels) for s in int_subjects]
        pairs += [(s.subject_id, s.site_id, "test_ext", s.volume, s.labels) for s in ext]
        records[k] = evaluate_pairs(Segmenter(model), pairs, exp.net.num_classes)
        if keep_models:
            models[k] = model
        rep = gap_report(records[k])
        log.info("k=%d INT %.4f EXT %.4f gap %.4f p %.3g", k, rep.int_mean, rep.ext_mean,
                 rep.gap, rep.p_value)
    rows = sites_curve(records)
    return SitesResult(rows, records, models, time.perf_counter() - t0)


# -- augmentation robustness ----------------------------------------------------


def _default_sweeps() -> dict:
    return {
        "gaussian": [0.25, 0.5, 0.75, 1.0],
        "ghosting": [0.1, 0.2, 0.3, 0.4],
        "salt_pepper": [0.0025, 0.005, 0.0075, 0.01],
        "blur": [3, 5, 7],
        "identity": [0.0, 1.0],
    }


def covering_specs(specs, sweeps: dict) -> list[TransformSpec]:
    """Copy of ``specs`` whose swept parameters are sampled over [low, max(sweep)].

    ``low`` is the lower end of the default range, or the smaller of a scalar
    default and the sweep minimum. Probabilities are unchanged.
    """
    out = []
    for spec in specs:
        spec = spec if isinstance(spec, TransformSpec) else TransformSpec.from_dict(spec)
        param = sweep_parameter(spec.name)
        if spec.name in sweeps and param is not None:
            cur = spec.parameters[param]
            low = cur[0] if isinstance(cur, (list, tuple)) else min(cur, min(sweeps[spec.name]))
            spec = TransformSpec(spec.name, spec.probability,
                                 {**spec.parameters, param: [low, max(sweeps[spec.name])]})
        out.append(spec)
    return out


@dataclass
class AugmentationExperiment:
    roster: RosterConfig = field(default_factory=lambda: RosterConfig(
        n_sites=1, ext_sites=0, train_per_site=15, val_per_site=4, test_per_site=0,
        grid_side=64, seed=7))
    net: LODConfig = field(default_factory=lambda: LODConfig(
        levels=2, down_factor=4, input_side=64, channels_per_level=[[8, 16, 32], [8, 16, 32]],
        convs_per_block=1))
    # both models get the same budget; the augmented one needs the longer schedule to converge
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs_per_level=[60, 40], initial_lr=2e-3, samples_per_epoch=16))
    # transform name -> strictly increasing sweep of its probed parameter
    sweeps: dict = field(default_factory=_default_sweeps)
    # None: the default pool widened to cover the sweeps (see covering_specs)
    augmentation: list | None = None
    drop_threshold: float = 0.01
    seed: int = 0

    def augmentation_specs(self) -> list[TransformSpec]:
        if self.augmentation is not None:
            return [s if isinstance(s, TransformSpec) else TransformSpec.from_dict(s)
                    for s in self.augmentation]
        return covering_specs(default_specs(), self.sweeps)


@dataclass
class AugmentationResult:
    plain: list[RobustnessCurve]
    augmented: list[RobustnessCurve]
    selected: list[str]
    models: dict[str, LODNetwork]
    seconds: float

    def curve(self, which: str, name: str) -> RobustnessCurve:
        curves = self.plain if which == "plain" else self.augmented
        return next(c for c in curves if c.transform == name)


def run_augmentation_experiment(exp: AugmentationExperiment) -> AugmentationResult:
    t0 = time.perf_counter()
    roster = exp.roster
    site = roster.site_profiles()[0]
    train = [_as_sample(s) for s in _subjects(roster, 0, "train", site)]
    val_subjects = _subjects(roster, 0, "val", site)
    val = [_as_sample(s) for s in val_subjects]
    val_pairs = [(s.volume, s.labels) for s in val_subjects]

    plain_model = Trainer(exp.net, exp.train, train, val).fit()
    aug_cfg = dataclasses.replace(
        exp.train, augmentation=[sp.to_dict() for sp in exp.augmentation_specs()])
    aug_model = Trainer(exp.net, aug_cfg, train, val).fit()

    def probe(model):
        seg = Segmenter(model)
        return [probe_robustness(seg, val_pairs, TransformSpec(name), sweep, seed=exp.seed,
                                 num_classes=exp.net.num_classes)
                for name, sweep in exp.sweeps.items()]

    plain = probe(plain_model)
    augmented = probe(aug_model)
    selected = select_transforms(plain, exp.drop_threshold)
    return AugmentationResult(plain, augmented, selected,
                              {"plain": plain_model, "augmented": aug_model},
                              time.perf_counter() - t0)


# -- memorization -----------------------------------------------------------------


@dataclass
class MemorizationRun:
    grid_side: int = 32
    subjects: int = 2
    net: LODConfig = field(default_factory=lambda: LODConfig(
        levels=2, down_factor=2, input_side=32, channels_per_level=[[8, 16, 32], [8, 16, 32]],
        dropout_rate=0.0))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        epochs_per_level=[60, 100], initial_lr=3e-3, plateau_patience=10))
    seed: int = 0


def memorization_samples(run: MemorizationRun) -> list[TrainingSample]:
    roster = RosterConfig(n_sites=1, ext_sites=0, train_per_site=run.subjects, val_per_site=0,
                          test_per_site=0, grid_side=run.grid_side, seed=run.seed)
    site = roster.site_profiles()[0]
    return [_as_sample(s) for s in _subjects(roster, 0, "train", site)]


def run_memorization(run: MemorizationRun):
    """Train on ``subjects`` phantoms and score the model on those same phantoms."""
    samples = memorization_samples(run)
    trainer = Trainer(run.net, run.train, samples)
    model = trainer.fit()
    pairs = [(s.sample_id, s.dataset_id, "train", s.volume, s.labels) for s in samples]
    records = evaluate_pairs(Segmenter(model), pairs, run.net.num_classes)
    return trainer, records


def mean_fg(records) -> float:
    return float(np.mean([r.mean_fg for r in records]))
