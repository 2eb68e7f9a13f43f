"""End-to-end acceptance checks, one PASS/FAIL line per numbered criterion.

The experiment-backed criteria (5-9) train small phantom models on the CPU;
expect the whole module to take on the order of an hour.
"""
import time

import numpy as np
import pytest
import torch

from lodseg import config as cfgmod
from lodseg import checkpoint as ckpt_io
from lodseg.cli import main as cli_main
from lodseg.evaluator import Segmenter, write_records
from lodseg.experiments import (
    AugmentationExperiment,
    MemorizationRun,
    SitesExperiment,
    mean_fg,
    memorization_samples,
    run_augmentation_experiment,
    run_memorization,
    run_sites_experiment,
)
from lodseg.losses import LossConfig, cross_entropy, dice_loss, dice_per_class, mixed_loss, mixed_loss_grad
from lodseg.network import LODConfig, LODNetwork, build, level_output, majority_pool, parameter_count
from lodseg.phantom import RosterConfig, SiteProfile, SubjectGeometry, generate_subject, render_subject
from lodseg.trainer import TrainConfig, TrainingSample, bottom_up_train
from lodseg.volume_io import Volume, one_hot, pad_crop_to_cube, reorient, undo_pad_crop, z_score

pytestmark = pytest.mark.slow


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# -- fast, property-style criteria ------------------------------------------------


def test_c01_loss_identities(criterion):
    def run():
        rng = np.random.default_rng(0)
        worst_d = worst_ce = 0.0
        for _ in range(100):
            y = one_hot(rng.integers(0, 8, (8, 8, 8)), 8).astype(np.float64)
            worst_d = max(worst_d, dice_loss(y, y))
            worst_ce = max(worst_ce, cross_entropy(y, y))
        return worst_d, worst_ce

    (d, ce), secs = _timed(run)
    ok = d <= 1e-6 and ce <= 1e-6 and secs < 60
    criterion(1, "loss identities", ok, f"dice {d:.2e}, ce {ce:.2e}, {secs:.1f}s")
    assert ok


def test_c02_gradient_check(criterion):
    def run():
        rng = np.random.default_rng(1)
        worst = 0.0
        for lam in (0.0, 0.5, 1.0):
            cfg = LossConfig(lam=lam)
            y = one_hot(rng.integers(0, 3, (4, 4, 4)), 3).astype(np.float64)
            logits = rng.normal(size=(3, 4, 4, 4))
            F = np.exp(logits) / np.exp(logits).sum(0)
            g = mixed_loss_grad(y, F, cfg)
            h = 1e-6
            for _ in range(20):
                idx = tuple(int(rng.integers(0, s)) for s in F.shape)
                Fp, Fm = F.copy(), F.copy()
                Fp[idx] += h
                Fm[idx] -= h
                fd = (mixed_loss(y, Fp, cfg) - mixed_loss(y, Fm, cfg)) / (2 * h)
                worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-12))
        return worst

    worst, secs = _timed(run)
    ok = worst < 1e-4 and secs < 60
    criterion(2, "gradient check", ok, f"max rel err {worst:.2e}, {secs:.1f}s")
    assert ok


def test_c03_softmax_normalization(criterion):
    cfgs = [
        LODConfig(levels=1, input_side=16, channels_per_level=[[4, 8, 16]]),
        LODConfig(levels=2, down_factor=2, input_side=32, channels_per_level=[[4, 8], [6, 12, 24]]),
        LODConfig(levels=3, down_factor=2, input_side=32,
                  channels_per_level=[[4, 8], [4, 8], [8, 16]], convs_per_block=1),
    ]

    def run():
        worst = 0.0
        for i, cfg in enumerate(cfgs):
            model = build(cfg, seed=i).eval()
            x = torch.randn(2, 1, cfg.input_side, cfg.input_side, cfg.input_side)
            with torch.no_grad():
                for probs in model(x, return_all=True).values():
                    worst = max(worst, float((probs.sum(1) - 1).abs().max()))
        return worst

    worst, secs = _timed(run)
    ok = worst <= 1e-5 and secs < 120
    criterion(3, "softmax normalization (L=1,2,3)", ok, f"max |sum-1| {worst:.1e}, {secs:.1f}s")
    assert ok


def test_c04_freeze_invariance(criterion, tmp_path):
    def run():
        net = LODConfig(levels=2, down_factor=2, input_side=32, channels_per_level=[[4, 8], [4, 8]],
                        convs_per_block=1, dropout_rate=0.1)
        site = SiteProfile.sample("a", 0)
        samples = []
        for j in range(3):
            lab = generate_subject(SubjectGeometry.random(j), 32, source_id=f"s{j}")
            samples.append(TrainingSample(f"s{j}", "a", render_subject(lab, site), lab))
        bottom_up_train(net, TrainConfig(epochs_per_level=[3, 3], initial_lr=1e-3), samples,
                        output_dir=tmp_path)
        coarse = ckpt_io.load(tmp_path / "level2.ckpt").level_params(2)
        final = ckpt_io.load(tmp_path / "final.ckpt").params
        return [k for k, v in coarse.items() if v.tobytes() != final[k].tobytes()], len(coarse)

    (changed, n), secs = _timed(run)
    ok = not changed and n > 0 and secs < 600
    criterion(4, "freeze invariance", ok, f"{n} coarse tensors, {len(changed)} changed, {secs:.1f}s")
    assert ok


# -- memorization -----------------------------------------------------------------


@pytest.fixture(scope="module")
def memorization():
    run = MemorizationRun()
    (trainer, records), secs = _timed(lambda: run_memorization(run))
    return run, trainer, records, secs


def test_c05_memorization(criterion, memorization):
    run, trainer, records, secs = memorization
    epochs = len(trainer.history)
    score = mean_fg(records)
    ok = score >= 0.95 and epochs <= 200 and secs < 1200
    criterion(5, "memorization smoke test", ok,
              f"mean fg Dice {score:.4f} after {epochs} epochs, {secs:.0f}s")
    assert ok


def test_coarse_level_alone_segments_held_out(memorization):
    """Level-L weights on a fresh model (level 1 untrained) segment an unseen phantom."""
    run, trainer, _, _ = memorization
    fresh = LODNetwork(run.net, seed=123)
    coarse = {k: v for k, v in trainer.model.export_state().items() if k.startswith("level2/")}
    fresh.import_state(coarse, levels=[2])
    roster = RosterConfig(n_sites=1, ext_sites=0, grid_side=run.grid_side, seed=run.seed)
    site = roster.site_profiles()[0]
    lab = generate_subject(SubjectGeometry.random(999), run.grid_side, source_id="held-out")
    x = z_score(render_subject(lab, site)).data
    pred = level_output(fresh, x, 2).argmax(0)
    gt = majority_pool(lab.data, run.net.down_factor, run.net.num_classes)
    held_out_ids = {s.sample_id for s in memorization_samples(run)}
    assert "held-out" not in held_out_ids
    dice = dice_per_class(pred, gt, 8)[1:].mean()
    assert dice > 0.8, dice


# -- multi-site generalization ----------------------------------------------------


@pytest.fixture(scope="module")
def sites(tmp_path_factory):
    result = run_sites_experiment(SitesExperiment(), keep_models=True)
    out = tmp_path_factory.mktemp("sites")
    for k, recs in result.records.items():
        write_records(recs, out / f"records_k{k}.csv")
    return result, out


def test_c06_gap_shrinks_with_sites(criterion, sites):
    result, _ = sites
    gaps = result.gaps()
    ks = [r["k"] for r in result.rows]
    monotone = all(b <= a + 0.01 for a, b in zip(gaps, gaps[1:]))
    halved = gaps[-1] < 0.5 * gaps[0]
    ok = ks == [1, 2, 4, 8] and monotone and halved and result.seconds < 7200
    detail = ", ".join(f"k={k}: {g:+.4f}" for k, g in zip(ks, gaps)) + f"; {result.seconds:.0f}s"
    criterion(6, "INT/EXT gap shrinks with site count", ok, detail)
    assert ok


def test_c07_single_vs_multi_site_significance(criterion, sites):
    result, _ = sites
    p = {r["k"]: r["p_value"] for r in result.rows}
    ok = p[1] < 0.01 and p[8] > 0.05
    criterion(7, "single-site gap significant, multi-site not", ok,
              f"p(k=1) {p[1]:.3g}, p(k=8) {p[8]:.3g}")
    assert ok


def test_report_command_tabulates_sites(sites, capsys):
    _, out = sites
    assert cli_main(["report", str(out)]) == 0
    lines = (out / "sites_curve.csv").read_text().splitlines()
    assert lines[0] == "k,int_dice,ext_dice,gap,p_value" and len(lines) == 5
    assert (out / "sites_curve.png").exists()


def test_segmenting_64_cube_takes_seconds(sites):
    result, _ = sites
    lab = generate_subject(SubjectGeometry.random(5), 64, source_id="t")
    v = render_subject(lab, SiteProfile.sample("t", 1))
    seg = Segmenter(result.models[1])
    _, secs = _timed(lambda: seg(v))
    assert secs < 10, secs


# -- augmentation -----------------------------------------------------------------


@pytest.fixture(scope="module")
def augmentation():
    return run_augmentation_experiment(AugmentationExperiment())


def test_c08_augmentation_halves_drop(criterion, augmentation):
    res = augmentation
    parts, ok = [], res.seconds < 3600
    for name in ("gaussian", "ghosting"):
        plain, aug = res.curve("plain", name), res.curve("augmented", name)
        ok &= aug.drop_at_max <= 0.5 * plain.drop_at_max
        parts.append(f"{name}: plain {plain.drop_at_max:.4f} aug {aug.drop_at_max:.4f}")
    criterion(8, "augmentation halves robustness drop", ok, "; ".join(parts) + f"; {res.seconds:.0f}s")
    assert ok


def test_c09_selection_protocol(criterion, augmentation):
    sel = augmentation.selected
    ok = bool(sel) and "gaussian" in sel and "ghosting" in sel and "identity" not in sel
    drops = ", ".join(f"{c.transform} {c.max_drop:.4f}" for c in augmentation.plain)
    criterion(9, "augmentation selection", ok, f"selected {sel}; max drops {drops}")
    assert ok


def test_gaussian_sweep_degrades_plain_model(augmentation):
    curve = augmentation.curve("plain", "gaussian")
    slope = np.polyfit(curve.sweep, curve.dice, 1)[0]
    assert slope < 0 and curve.dice[-1] < curve.baseline


# -- configuration and preprocessing ---------------------------------------------


def test_c10_parameter_count(criterion):
    n = parameter_count(cfgmod.load().network)
    built = sum(p.numel() for p in LODNetwork(cfgmod.load().network).parameters())
    ok = n == built == 337_719
    criterion(10, "parameter count of shipped default", ok, f"{n:,}")
    assert ok


def test_c11_preprocessing_properties(criterion):
    def run():
        rng = np.random.default_rng(11)
        failures = []
        orients = [("L", "I", "A"), ("R", "A", "S"), ("L", "P", "S"), ("A", "S", "R")]
        for i in range(20):
            shape = tuple(int(s) for s in rng.integers(5, 24, 3))
            data = rng.normal(rng.uniform(-50, 50), rng.uniform(0.5, 30), shape).astype(np.float32)
            v = Volume(data, orients[i % 4], (1.0, 1.0, 1.0), f"r{i}")
            z = z_score(v).data.astype(np.float64)
            if abs(z.mean()) >= 1e-5 or abs(z.std() - 1) >= 1e-4:
                failures.append(f"z-score {i}")
            target = orients[(i + 1) % 4]
            once = reorient(v, target)
            if not np.array_equal(reorient(once, target).data, once.data):
                failures.append(f"reorient {i}")
            if not np.array_equal(reorient(once, v.orientation).data, v.data):
                failures.append(f"reorient back {i}")
            side = int(rng.integers(4, 28))
            cube = pad_crop_to_cube(v, side)
            if max(shape) <= side and not np.array_equal(undo_pad_crop(cube.data, shape), v.data):
                failures.append(f"pad/crop {i}")
        return failures

    failures, secs = _timed(run)
    ok = not failures and secs < 60
    criterion(11, "preprocessing properties", ok, f"{len(failures)} failures, {secs:.1f}s")
    assert ok, failures


def test_c12_shape_arithmetic(criterion):
    cfg = LODConfig(levels=2, down_factor=4, input_side=256,
                    channels_per_level=[[12, 16, 59], [4, 8, 12, 32]])
    side = cfg.level_side(2)
    ok = side == 64 and cfg.level_side(1) == 256
    criterion(12, "coarse-level grid at 256 / d=4", ok, f"{side}^3")
    assert ok
