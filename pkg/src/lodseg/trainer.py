"""Bottom-up, level-by-level training.

Levels are trained from coarsest to finest. Before level ``l`` starts, every
coarser level must already be frozen. Only level ``l``'s parameters reach the
optimizer. When a level's epoch budget is spent, its best-validation weights
are restored, it is frozen and ``level{l}.ckpt`` is written. The whole stack
is never fine-tuned jointly.

All randomness in an epoch (dropout, sample order, augmentation) is seeded
from ``(global_seed, level, epoch)``. A run resumed from ``resume.ckpt``
therefore repeats the uninterrupted run's metric history exactly.
"""
from __future__ import annotations

import csv
import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .augmentation import Pipeline, TransformSpec, sample_seed
from .losses import LossConfig, dice_per_class, mixed_loss
from .network import ConfigError, LODConfig, LODNetwork, majority_pool
from .volume_io import (
    DatasetManifest,
    LabelVolume,
    Volume,
    cached_load,
    pad_crop_to_cube,
    reorient_canonical,
    z_score,
)

log = logging.getLogger(__name__)


class ContractError(RuntimeError):
    """Raised when training is attempted out of the bottom-up order."""


@dataclass
class TrainConfig:
    # coarse -> fine: epochs_per_level[0] is level L, the last entry level 1
    epochs_per_level: list[int] = field(default_factory=lambda: [50, 30])
    initial_lr: float = 5e-4
    plateau_factor: float = 0.25
    plateau_patience: int = 5
    plateau_metric: str = "val_loss"
    batch_size: int = 1
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    global_seed: int = 0
    samples_per_epoch: int | None = None
    loss_lambda: float = 0.0
    include_background: bool = True
    augmentation: list = field(default_factory=list)
    workers: int = 0
    deterministic: bool = True

    def problems(self, levels: int | None = None) -> list[str]:
        out = []
        if levels is not None and len(self.epochs_per_level) != levels:
            out.append(
                f"epochs_per_level has {len(self.epochs_per_level)} entries for {levels} levels"
            )
        if any(e < 0 for e in self.epochs_per_level):
            out.append("epochs_per_level must be non-negative")
        if not 0.0 < self.plateau_factor < 1.0:
            out.append(f"plateau_factor must be in (0, 1) (got {self.plateau_factor})")
        if self.plateau_patience < 1:
            out.append("plateau_patience must be >= 1")
        if self.plateau_metric not in ("val_loss", "val_dice"):
            out.append("plateau_metric must be 'val_loss' or 'val_dice'")
        if self.batch_size < 1:
            out.append("batch_size must be >= 1")
        if not self.initial_lr > 0:
            out.append("initial_lr must be positive")
        if self.samples_per_epoch is not None and self.samples_per_epoch < 1:
            out.append("samples_per_epoch must be >= 1")
        if not 0.0 <= self.loss_lambda <= 1.0:
            out.append("loss_lambda must be in [0, 1]")
        try:
            [TransformSpec.from_dict(s) for s in self.augmentation]
        except (ValueError, KeyError, TypeError) as exc:
            out.append(f"augmentation: {exc}")
        return out

    def validate(self, levels: int | None = None) -> "TrainConfig":
        problems = self.problems(levels)
        if problems:
            raise ConfigError("; ".join(problems))
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        d["augmentation"] = [
            s.to_dict() if isinstance(s, TransformSpec) else s for s in self.augmentation
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"unknown TrainConfig keys: {unknown}")
        d = dict(d)
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(lam=self.loss_lambda, include_background=self.include_background)

    def epochs_for(self, level: int, levels: int) -> int:
        return int(self.epochs_per_level[levels - level])


class PlateauSchedule:
    """Reduce-on-plateau with ``lr = initial * factor**reductions`` exactly."""

    def __init__(self, initial: float, factor: float, patience: int, mode: str = "min"):
        self.initial = initial
        self.factor = factor
        self.patience = patience
        self.mode = mode
        self.best: float | None = None
        self.bad_epochs = 0
        self.reductions = 0

    @property
    def lr(self) -> float:
        return self.initial * self.factor**self.reductions

    def _improved(self, value: float) -> bool:
        if self.best is None:
            return True
        return value < self.best if self.mode == "min" else value > self.best

    def step(self, value: float) -> bool:
        """Record one epoch's metric; True if the rate was just reduced."""
        if self._improved(value):
            self.best = float(value)
            self.bad_epochs = 0
            return False
        self.bad_epochs += 1
        if self.bad_epochs >= self.patience:
            self.reductions += 1
            self.bad_epochs = 0
            return True
        return False

    def state_dict(self) -> dict:
        return {"best": self.best, "bad_epochs": self.bad_epochs, "reductions": self.reductions}

    def load_state_dict(self, d: dict) -> None:
        self.best = d["best"]
        self.bad_epochs = int(d["bad_epochs"])
        self.reductions = int(d["reductions"])


@dataclass
class TrainingSample:
    sample_id: str
    dataset_id: str
    volume: Volume
    labels: LabelVolume


def samples_from_manifest(manifest: DatasetManifest, splits: Sequence[str]) -> list[TrainingSample]:
    out = []
    for r in manifest.select(splits):
        vol_path = manifest.resolve(r.volume_path)
        lab_path = manifest.resolve(r.label_path)
        if lab_path is None:
            raise ConfigError(f"{r.volume_path}: labels required for training/validation")
        v = reorient_canonical(cached_load(vol_path))
        lab = reorient_canonical(cached_load(lab_path, labels=True))
        out.append(TrainingSample(str(r.volume_path), r.dataset_id, v, lab))
    return out


def epoch_seed(global_seed: int, level: int, epoch: int) -> int:
    return int(np.random.SeedSequence([int(global_seed), int(level), int(epoch)])
               .generate_state(1, dtype=np.uint32)[0])


def balanced_order(dataset_ids: Sequence[str], count: int, rng: np.random.Generator) -> list[int]:
    """Sample indices with equal counts per dataset (within one), in random order.

    Each dataset is walked through fresh permutations of its own samples, so no
    sample repeats before all of its dataset's samples were used.
    """
    groups: dict[str, list[int]] = {}
    for i, ds in enumerate(dataset_ids):
        groups.setdefault(ds, []).append(i)
    names = sorted(groups)
    base, extra = divmod(count, len(names))
    bonus = set(rng.choice(len(names), size=extra, replace=False).tolist()) if extra else set()
    picked: list[int] = []
    for j, name in enumerate(names):
        need = base + (1 if j in bonus else 0)
        idx = groups[name]
        while need > 0:
            perm = rng.permutation(idx)[:need]
            picked.extend(int(i) for i in perm)
            need -= len(perm)
    return [picked[i] for i in rng.permutation(len(picked))]


def gradient_norms(model: LODNetwork) -> dict[int, float]:
    """L2 norm of the current gradients per level (0 for levels without gradients)."""
    out = {}
    for lvl in range(1, model.cfg.levels + 1):
        sq = 0.0
        for _, p in model.named_level_parameters(lvl):
            if p.grad is not None:
                sq += float((p.grad.detach().double() ** 2).sum())
        out[lvl] = sq**0.5
    return out


def _param_key(model: LODNetwork):
    return {p: model.export_name(n) for n, p in model.named_parameters()}


def _optimizer_state(opt: torch.optim.Optimizer, model: LODNetwork) -> dict:
    names = _param_key(model)
    out = {}
    for p, st in opt.state.items():
        out[names[p]] = {
            k: (v.detach().cpu().numpy().copy() if torch.is_tensor(v) else np.asarray(v))
            for k, v in st.items()
        }
    return out


def _load_optimizer_state(opt: torch.optim.Optimizer, model: LODNetwork, saved: dict) -> None:
    names = _param_key(model)
    for group in opt.param_groups:
        for p in group["params"]:
            slots = saved.get(names[p])
            if slots is None:
                continue
            opt.state[p] = {
                k: torch.as_tensor(np.array(v), dtype=p.dtype if k != "step" else torch.float32)
                for k, v in slots.items()
            }


METRIC_FIELDS = ("epoch", "level", "lr", "train_loss", "val_loss")


class Trainer:
    """Train an LOD network bottom-up on in-memory samples.

    ``output_dir`` receives ``level{l}.ckpt`` after each level,
    ``final.ckpt`` at the end, a rolling ``resume.ckpt`` after every epoch and
    ``metrics.csv`` with one row per epoch. With ``output_dir=None`` nothing
    is written (useful for experiments and tests).
    """

    def __init__(self, net_cfg: LODConfig, train_cfg: TrainConfig,
                 train: Sequence[TrainingSample], val: Sequence[TrainingSample] = (),
                 output_dir=None, model: LODNetwork | None = None):
        self.net_cfg = net_cfg.validate()
        self.cfg = train_cfg.validate(net_cfg.levels)
        if not train:
            raise ConfigError("no training samples")
        self.train_samples = list(train)
        # Without a validation split the schedule and best-weight choice fall
        # back to the training samples.
        self.val_samples = list(val) or self.train_samples
        self.output_dir = Path(output_dir) if output_dir is not None else None
        self.model = model if model is not None else LODNetwork(net_cfg, seed=train_cfg.global_seed)
        self.pipeline = Pipeline([TransformSpec.from_dict(s) for s in self.cfg.augmentation])
        self.history: list[dict] = []
        self.last_grad_norms: dict[int, float] = {}
        self._cache: dict = {}
        # position: the next (level, epoch) to run
        self.level = net_cfg.levels
        self.epoch = 0
        self.schedule = self._new_schedule()
        self.optimizer = self._new_optimizer(self.level)
        self.best_metric: float | None = None
        self.best_params: dict[str, np.ndarray] = {}
        self.done = False

    # -- setup ------------------------------------------------------------

    def _new_schedule(self) -> PlateauSchedule:
        mode = "min" if self.cfg.plateau_metric == "val_loss" else "max"
        return PlateauSchedule(self.cfg.initial_lr, self.cfg.plateau_factor,
                               self.cfg.plateau_patience, mode)

    def _new_optimizer(self, level: int) -> torch.optim.Adam:
        params = [p for _, p in self.model.named_level_parameters(level)]
        return torch.optim.Adam(params, lr=self.cfg.initial_lr, betas=tuple(self.cfg.adam_betas),
                                eps=self.cfg.adam_eps)

    def _check_order(self, level: int) -> None:
        unfrozen = [lvl for lvl in range(level + 1, self.net_cfg.levels + 1)
                    if lvl not in self.model.frozen_levels]
        if unfrozen:
            raise ContractError(
                f"cannot train level {level}: coarser level(s) {unfrozen} are not frozen"
            )

    # -- data -------------------------------------------------------------

    def _arrays(self, sample: TrainingSample, seed) -> tuple[np.ndarray, np.ndarray]:
        v, lab = sample.volume, sample.labels
        if seed is not None:
            v, lab = self.pipeline(v, lab, seed=seed)
        side = self.net_cfg.input_side
        x = pad_crop_to_cube(z_score(v), side).data
        y = pad_crop_to_cube(lab, side).data
        return x, y

    def _target(self, labels: np.ndarray, level: int) -> np.ndarray:
        factor = self.net_cfg.down_factor ** (level - 1)
        pooled = majority_pool(labels, factor, self.net_cfg.num_classes) if factor > 1 else labels
        return pooled

    def _prepared(self, sample: TrainingSample, level: int, seed=None):
        """(input cube, pooled target labels); cached when not augmented."""
        key = (id(sample), level)
        if seed is None and key in self._cache:
            return self._cache[key]
        x, y = self._arrays(sample, seed)
        out = (x.astype(np.float32), self._target(y, level).astype(np.int64))
        if seed is None:
            self._cache[key] = out
        return out

    def _batch(self, samples, level, epoch, augment):
        def prep(s):
            seed = (sample_seed(self.cfg.global_seed, s.sample_id, epoch, level)
                    if augment else None)
            return self._prepared(s, level, seed)

        if self.cfg.workers > 1 and len(samples) > 1:
            with ThreadPoolExecutor(self.cfg.workers) as pool:
                items = list(pool.map(prep, samples))  # map keeps input order
        else:
            items = [prep(s) for s in samples]
        x = torch.from_numpy(np.stack([a for a, _ in items]))
        labels = torch.from_numpy(np.stack([b for _, b in items]))
        y = torch.nn.functional.one_hot(labels, self.net_cfg.num_classes)
        y = y.permute(0, 4, 1, 2, 3).float()
        return x, y, labels

    # -- epochs -----------------------------------------------------------

    def _train_epoch(self, level: int, epoch: int) -> float:
        seed = epoch_seed(self.cfg.global_seed, level, epoch)
        torch.manual_seed(seed)
        rng = np.random.default_rng(seed)
        count = self.cfg.samples_per_epoch or len(self.train_samples)
        order = balanced_order([s.dataset_id for s in self.train_samples], count, rng)
        augment = not self.pipeline.is_identity
        self.model.train()
        losses = []
        bs = self.cfg.batch_size
        for start in range(0, len(order), bs):
            batch = [self.train_samples[i] for i in order[start:start + bs]]
            x, y, _ = self._batch(batch, level, epoch, augment)
            self.optimizer.zero_grad(set_to_none=True)
            probs = self.model(x, level=level)
            loss = mixed_loss(y, probs, self.cfg.loss)
            loss.backward()
            self.last_grad_norms = gradient_norms(self.model)
            self.optimizer.step()
            losses.append(float(loss.detach()))
        return float(np.mean(losses))

    @torch.no_grad()
    def validate(self, level: int) -> tuple[float, np.ndarray]:
        """(mean loss, mean per-class Dice) on the validation samples at ``level``."""
        self.model.eval()
        losses, dices = [], []
        for s in self.val_samples:
            x, y, labels = self._batch([s], level, 0, augment=False)
            probs = self.model(x, level=level)
            losses.append(float(mixed_loss(y, probs, self.cfg.loss)))
            pred = probs.argmax(dim=1).numpy()
            dices.append(dice_per_class(pred, labels.numpy(), self.net_cfg.num_classes))
        return float(np.mean(losses)), np.mean(dices, axis=0)

    def _level_snapshot(self, level: int) -> dict[str, np.ndarray]:
        prefix = f"level{level}/"
        return {k: v for k, v in self.model.export_state().items() if k.startswith(prefix)}

    def run_epoch(self) -> dict:
        level, epoch = self.level, self.epoch
        if epoch == 0:
            self._check_order(level)
        lr = self.schedule.lr
        for g in self.optimizer.param_groups:
            g["lr"] = lr
        train_loss = self._train_epoch(level, epoch)
        val_loss, dice = self.validate(level)
        metric = val_loss if self.cfg.plateau_metric == "val_loss" else float(dice[1:].mean())
        better = (self.best_metric is None
                  or (metric < self.best_metric if self.schedule.mode == "min"
                      else metric > self.best_metric))
        if better:
            self.best_metric = metric
            self.best_params = self._level_snapshot(level)
        self.schedule.step(metric)
        row = {"epoch": epoch, "level": level, "lr": lr, "train_loss": train_loss,
               "val_loss": val_loss}
        row.update({f"dice_{c}": float(d) for c, d in enumerate(dice)})
        self.history.append(row)
        self._append_metrics(row)
        log.info("level %d epoch %d lr %.3g train %.4f val %.4f fg-dice %.4f",
                 level, epoch, lr, train_loss, val_loss, float(dice[1:].mean()))
        self.epoch += 1
        return row

    def _finish_level(self) -> None:
        level = self.level
        if self.best_params:
            self.model.import_state(self.best_params, levels=[level])
        self.model.freeze_level(level)
        if self.output_dir is not None:
            ckpt_io.save_model(self.model, self.output_dir / f"level{level}.ckpt")
        if level == 1:
            self.done = True
            if self.output_dir is not None:
                # carries the finished train state so resuming from it is a no-op
                ckpt_io.save_model(self.model, self.output_dir / "final.ckpt",
                                   train_state=self.state())
                self.save_resume(self.output_dir / "resume.ckpt")
            return
        self.level -= 1
        self.epoch = 0
        self.schedule = self._new_schedule()
        self.optimizer = self._new_optimizer(self.level)
        self.best_metric = None
        self.best_params = {}

    def fit(self, max_epochs: int | None = None) -> LODNetwork:
        """Train remaining levels; ``max_epochs`` stops early (as if interrupted)."""
        ran = 0
        while not self.done:
            if self.epoch >= self.cfg.epochs_for(self.level, self.net_cfg.levels):
                self._finish_level()
                continue
            if max_epochs is not None and ran >= max_epochs:
                break
            self.run_epoch()
            ran += 1
            if self.output_dir is not None:
                self.save_resume(self.output_dir / "resume.ckpt")
        return self.model

    def train_level(self, level: int) -> dict:
        """Run every epoch of ``level`` (it must be the next level due)."""
        self._check_order(level)
        if level != self.level or self.done:
            raise ContractError(f"level {level} is not next in bottom-up order (next: {self.level})")
        while self.epoch < self.cfg.epochs_for(level, self.net_cfg.levels):
            self.run_epoch()
        self._finish_level()
        return self.state()

    # -- persistence ------------------------------------------------------

    def _append_metrics(self, row: dict) -> None:
        if self.output_dir is None:
            return
        path = self.output_dir / "metrics.csv"
        fields = list(METRIC_FIELDS) + [f"dice_{c}" for c in range(self.net_cfg.num_classes)]
        path.parent.mkdir(parents=True, exist_ok=True)
        new = not path.exists()
        with open(path, "a", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
            if new:
                w.writeheader()
            w.writerow({k: (f"{v:.8g}" if isinstance(v, float) else v) for k, v in row.items()})

    def state(self) -> dict:
        return {
            "level": self.level,
            "epoch": self.epoch,
            "done": self.done,
            "lr": self.schedule.lr,
            "schedule": self.schedule.state_dict(),
            "best_metric": self.best_metric,
            "frozen": sorted(self.model.frozen_levels),
            "history": self.history,
            "train_config": self.cfg.to_dict(),
            "epoch_seed_next": epoch_seed(self.cfg.global_seed, self.level, self.epoch),
        }

    def save_resume(self, path) -> Path:
        return ckpt_io.save_model(
            self.model, path, train_state=self.state(),
            optimizer=_optimizer_state(self.optimizer, self.model), best=self.best_params,
        )

    @classmethod
    def resume(cls, path, train: Sequence[TrainingSample], val: Sequence[TrainingSample] = (),
               output_dir=None) -> "Trainer":
        """Rebuild a trainer from ``resume.ckpt`` (or any checkpoint with train state).

        The checkpoint is fully read and validated before anything is built.
        """
        ck = ckpt_io.load(path)
        st = ck.train_state
        if not st:
            raise ckpt_io.CheckpointError(f"{path} carries no training state")
        cfg = TrainConfig.from_dict(st["train_config"])
        model = ck.build_model(seed=None)
        trainer = cls(ck.config, cfg, train, val, output_dir=output_dir, model=model)
        trainer.level = int(st["level"])
        trainer.epoch = int(st["epoch"])
        trainer.done = bool(st["done"])
        trainer.history = list(st["history"])
        trainer.schedule.load_state_dict(st["schedule"])
        trainer.best_metric = st["best_metric"]
        trainer.best_params = dict(ck.best)
        trainer.optimizer = trainer._new_optimizer(trainer.level)
        _load_optimizer_state(trainer.optimizer, model, ck.optimizer)
        return trainer


def bottom_up_train(net_cfg: LODConfig, train_cfg: TrainConfig, train, val=(),
                    output_dir=None) -> LODNetwork:
    return Trainer(net_cfg, train_cfg, train, val, output_dir=output_dir).fit()


def resume(path, train, val=(), output_dir=None) -> Trainer:
    return Trainer.resume(path, train, val, output_dir=output_dir)
