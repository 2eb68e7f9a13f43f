"""Command-line entry point: ``lodseg <command> [options]``.

Commands: phantom, train, segment, evaluate, select-augmentations, report.
Exit codes: 0 success, 1 validation error, 2 partial batch failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import re
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import torch

from . import __version__
from . import checkpoint as ckpt_io
from . import config as cfgmod
from .augmentation import TransformSpec, plot_curves, probe_robustness, select_transforms, write_curves
from .evaluator import (
    Segmenter,
    evaluate,
    gap_report,
    plot_dataset_strip,
    plot_sites_curve,
    read_records,
    sites_curve,
    write_records,
    write_table,
)
from .network import ConfigError, parameter_count
from .phantom import PhantomError, generate_roster
from .trainer import Trainer, samples_from_manifest
from .volume_io import (
    DatasetManifest,
    ManifestError,
    ManifestRecord,
    load_volume,
    reorient_canonical,
    save_labels,
    save_volume,
)

log = logging.getLogger("lodseg")

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL = 0, 1, 2


class ValidationError(Exception):
    pass


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# -- shared plumbing ----------------------------------------------------------


def _load_config(args) -> cfgmod.ExperimentConfig:
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides += [f"training.global_seed={args.seed}", f"phantom.seed={args.seed}"]
    try:
        cfg = cfgmod.load(args.config, overrides)
    except (ConfigError, OSError) as exc:
        raise ValidationError(str(exc)) from exc
    cfg.training.workers = args.workers
    cfg.training.deterministic = bool(args.deterministic)
    return cfg


def _prepare_output(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise ValidationError(f"output {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()) and not force:
        raise ValidationError(f"output directory {out} is not empty (use --force)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _provenance(out: Path, args, cfg: cfgmod.ExperimentConfig | None, seed=None) -> None:
    run = {
        "command": args.command,
        "argv": sys.argv[1:],
        "version": version_string(),
        "seed": seed if seed is not None else (cfg.training.global_seed if cfg else None),
        "config_source": None if cfg is None else cfg.source,
        "torch": torch.__version__,
        "numpy": np.__version__,
    }
    (out / "run.json").write_text(json.dumps(run, indent=1, sort_keys=True) + "\n")
    if cfg is not None:
        cfg.write(out / "effective_config.yaml")


def _read_manifest(cfg: cfgmod.ExperimentConfig, explicit=None) -> DatasetManifest:
    path = explicit or cfg.manifest
    if not path:
        raise ValidationError("no manifest given (set 'manifest' in the config or pass --manifest)")
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"manifest {path} does not exist")
    try:
        manifest = DatasetManifest.read(path)
    except (ManifestError, KeyError) as exc:
        raise ValidationError(f"manifest {path}: {exc}") from exc
    missing = [r.volume_path for r in manifest.records if not manifest.resolve(r.volume_path).exists()]
    if missing:
        raise ValidationError(f"manifest lists {len(missing)} missing volume(s), e.g. {missing[0]}")
    return manifest


def _load_model(path):
    try:
        return ckpt_io.load_model(path)
    except (ckpt_io.CheckpointError, FileNotFoundError) as exc:
        raise ValidationError(f"model {path}: {exc}") from exc


# -- commands ------------------------------------------------------------------


def cmd_phantom(args) -> int:
    cfg = _load_config(args)
    roster = cfg.phantom
    out = _prepare_output(args.output, args.force)
    (out / "volumes").mkdir(exist_ok=True)
    (out / "labels").mkdir(exist_ok=True)
    records = []
    for subj, split in generate_roster(roster):
        vol = f"volumes/{subj.subject_id}.nii.gz"
        lab = f"labels/{subj.subject_id}.nii.gz"
        save_volume(subj.volume, out / vol)
        save_labels(subj.labels, out / lab)
        records.append(ManifestRecord(vol, lab, subj.site_id, split))
    DatasetManifest(records, root=out).write(out / "manifest.csv")
    sites = [p.to_dict() for p in roster.site_profiles()]
    (out / "sites.json").write_text(json.dumps(sites, indent=1, sort_keys=True) + "\n")
    _provenance(out, args, cfg, seed=roster.seed)
    print(f"wrote {len(records)} phantom pairs and {out / 'manifest.csv'}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    manifest = _read_manifest(cfg, args.manifest)
    if not manifest.select(["train"]):
        raise ValidationError("manifest has no train records")
    out = Path(args.output)
    resume_path = out / "resume.ckpt"
    resuming = args.resume and resume_path.exists()
    if not resuming:
        out = _prepare_output(out, args.force)
    train = samples_from_manifest(manifest, ["train"])
    val = samples_from_manifest(manifest, ["val"])
    _provenance(out, args, cfg)
    log.info("network has %d parameters", parameter_count(cfg.network))
    if resuming:
        trainer = Trainer.resume(resume_path, train, val, output_dir=out)
    else:
        trainer = Trainer(cfg.network, cfg.training, train, val, output_dir=out)
    trainer.fit(max_epochs=args.max_epochs)
    print(f"{'finished' if trainer.done else 'paused'} at level {trainer.level}, "
          f"epoch {trainer.epoch}; outputs in {out}")
    return EXIT_OK


def _label_name(path: Path) -> str:
    return re.sub(r"\.nii(\.gz)?$", "", path.name) + "_labels.nii.gz"


def cmd_segment(args) -> int:
    model = _load_model(args.model)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    seg = Segmenter(model)
    failures = 0
    timings = []
    for inp in args.inputs:
        inp = Path(inp)
        t0 = time.perf_counter()
        try:
            v = load_volume(inp)
            labels = seg(v)
            save_labels(labels, out / _label_name(inp))
        except (OSError, ValueError, RuntimeError) as exc:
            failures += 1
            log.error("%s: %s", inp, exc)
            timings.append({"input": str(inp), "seconds": None, "error": str(exc)})
            continue
        dt = time.perf_counter() - t0
        log.info("%s segmented in %.2f s", inp, dt)
        timings.append({"input": str(inp), "seconds": round(dt, 4), "error": ""})
    _provenance(out, args, None, seed=None)
    (out / "timings.json").write_text(json.dumps(timings, indent=1) + "\n")
    print(f"segmented {len(args.inputs) - failures}/{len(args.inputs)} volume(s)")
    return EXIT_PARTIAL if failures else EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_config(args)
    manifest = _read_manifest(cfg, args.manifest)
    model = _load_model(args.model)
    splits = args.splits.split(",") if args.splits else cfg.evaluation["splits"]
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    records = evaluate(model, manifest, splits, level=int(cfg.evaluation.get("level", 1)))
    write_records(records, out / "records.csv", model.cfg.num_classes)
    _provenance(out, args, cfg)
    ok = [r for r in records if r.ok]
    print(f"evaluated {len(ok)}/{len(records)} volume(s)")
    if ok:
        print(f"mean foreground Dice {np.mean([r.mean_fg for r in ok]):.4f}")
        plot_dataset_strip(records, out / "dice_by_dataset.png")
    try:
        rep = gap_report(records, bonferroni=int(cfg.evaluation.get("bonferroni", 1)))
    except ValueError:
        rep = None
    if rep is not None:
        (out / "gap.json").write_text(json.dumps(rep.__dict__, indent=1) + "\n")
        print(f"INT {rep.int_mean:.4f} EXT {rep.ext_mean:.4f} gap {rep.gap:.4f} p {rep.p_value:.3g}")
    return EXIT_PARTIAL if len(ok) < len(records) else EXIT_OK


def cmd_select(args) -> int:
    cfg = _load_config(args)
    manifest = _read_manifest(cfg, args.manifest)
    model = _load_model(args.model)
    sweeps = cfg.selection.get("sweeps") or {}
    if not sweeps:
        raise ValidationError("selection.sweeps is empty")
    val = samples_from_manifest(manifest, ["val"])
    if not val:
        raise ValidationError("manifest has no val records to probe")
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    seg = Segmenter(model)
    pairs = [(s.volume, s.labels) for s in val]
    curves = [probe_robustness(seg, pairs, TransformSpec(name), sweep,
                               seed=int(cfg.selection.get("seed", 0)),
                               num_classes=model.cfg.num_classes)
              for name, sweep in sweeps.items()]
    threshold = float(cfg.selection.get("drop_threshold", 0.01))
    selected = select_transforms(curves, threshold)
    write_curves(curves, out / "curves.csv")
    summary = {"drop_threshold": threshold, "selected": selected,
               "max_drop": {c.transform: c.max_drop for c in curves}}
    (out / "selection.json").write_text(json.dumps(summary, indent=1) + "\n")
    plot_curves(curves, out / "curves.png")
    _provenance(out, args, cfg)
    print("selected: " + (", ".join(selected) if selected else "(none)"))
    return EXIT_OK


def cmd_report(args) -> int:
    src = Path(args.records)
    files = sorted(src.glob("records_k*.csv")) if src.is_dir() else [src]
    if not files:
        raise ValidationError(f"no records_k*.csv files under {src}")
    by_k = {}
    for f in files:
        m = re.search(r"records_k(\d+)\.csv$", f.name)
        by_k[int(m.group(1)) if m else 0] = read_records(f)
    rows = sites_curve(by_k)
    out = Path(args.output) if args.output else (src if src.is_dir() else src.parent)
    out.mkdir(parents=True, exist_ok=True)
    write_table(rows, out / "sites_curve.csv")
    if len(rows) > 1:
        plot_sites_curve(rows, out / "sites_curve.png")
    print(f"{'k':>3} {'INT':>8} {'EXT':>8} {'gap':>8} {'p':>9}")
    for r in rows:
        print(f"{r['k']:>3} {r['int_dice']:8.4f} {r['ext_dice']:8.4f} {r['gap']:8.4f} "
              f"{r['p_value']:9.3g}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment config (default: bundled full-scale)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. training.initial_lr=1e-3")
    common.add_argument("--output", help="output directory")
    common.add_argument("--workers", type=int, default=os.cpu_count() or 1,
                        help="parallel data workers (default: core count)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--deterministic", action="store_true",
                        help="force deterministic torch kernels")
    common.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="lodseg", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=version_string())
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("phantom", parents=[common], help="generate a synthetic multi-site dataset")
    sp.set_defaults(func=cmd_phantom, needs_output=True)

    sp = sub.add_parser("train", parents=[common], help="bottom-up training from a manifest")
    sp.add_argument("--manifest")
    sp.add_argument("--resume", action="store_true", help="continue from OUTPUT/resume.ckpt")
    sp.add_argument("--max-epochs", type=int, help="stop after this many epochs (resumable)")
    sp.set_defaults(func=cmd_train, needs_output=True)

    sp = sub.add_parser("segment", parents=[common], help="segment NIfTI volumes")
    sp.add_argument("--model", required=True)
    sp.add_argument("inputs", nargs="+")
    sp.set_defaults(func=cmd_segment, needs_output=True)

    sp = sub.add_parser("evaluate", parents=[common], help="per-volume Dice on manifest splits")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest")
    sp.add_argument("--splits", help="comma-separated splits (default from config)")
    sp.set_defaults(func=cmd_evaluate, needs_output=True)

    sp = sub.add_parser("select-augmentations", parents=[common],
                        help="probe robustness on the val split and pick transforms")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest")
    sp.set_defaults(func=cmd_select, needs_output=True)

    sp = sub.add_parser("report", parents=[common], help="(k, INT, EXT) table from records_k*.csv")
    sp.add_argument("records", help="directory with records_k*.csv or a single records file")
    sp.set_defaults(func=cmd_report, needs_output=False)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.needs_output and not args.output:
        print("error: --output is required", file=sys.stderr)
        return EXIT_INVALID
    if args.deterministic:
        torch.use_deterministic_algorithms(True)
    try:
        return args.func(args)
    except (ValidationError, ConfigError, PhantomError, ManifestError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
