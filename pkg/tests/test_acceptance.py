"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line."""

import json
import math
import time

import numpy as np
import pytest

import gradcases
from oracles import flood_fill_partition

from spatwheal.cli import main
from spatwheal.dataset import load_corpus, rasterize_polygon
from spatwheal.detector import GridSpec, PrickLayout, connected_components, fit_rigid_transform
from spatwheal.metrics import (CLINICAL_AREA_MM2, accuracy_curve, clinical_filter, default_iou_thresholds,
                               dice, iou)
from spatwheal.pipeline import evaluate_model
from spatwheal.saliency import image_scores, input_gradients
from spatwheal.synth import SynthConfig, generate_case, generate_corpus
from spatwheal.trainer import TrainConfig, stratified_split, train
from spatwheal.unet import UNetConfig, build

# stated floors, then the reference run's achieved values with 10% slack; the stricter one applies
REFERENCE = {"dice": 0.991, "gap": 0.115, "acc50": 1.0}
DICE_FLOOR = max(0.60, 0.9 * REFERENCE["dice"])
GAP_FLOOR = max(0.05, 0.9 * REFERENCE["gap"])
ACC50_FLOOR = max(0.70, 0.9 * REFERENCE["acc50"])


def test_1_gradient_oracle(criterion):
    t0 = time.perf_counter()
    worst = max(gradcases.check(name, seed) for name in gradcases.CASES for seed in range(10))
    dt = time.perf_counter() - t0
    ok = worst <= gradcases.TOL and dt < 60
    criterion(1, "gradient oracle", ok,
              f"{len(gradcases.CASES)} ops x 10 seeds, max rel err {worst:.2e}, {dt:.1f}s")
    assert ok


def test_2_ccl_oracle(criterion):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    bad = 0
    for i in range(500):
        h, w = rng.integers(1, 65, 2)
        mask = rng.random((h, w)) < rng.uniform(0.1, 0.9)
        conn = 4 if i % 2 else 8
        ours = {frozenset(map(tuple, r.pixels.tolist())) for r in connected_components(mask, conn)}
        bad += ours != flood_fill_partition(mask, conn)
    dt = time.perf_counter() - t0
    ok = bad == 0 and dt < 30
    criterion(2, "CCL vs flood fill", ok, f"{500 - bad}/500 identical, {dt:.1f}s")
    assert ok


def test_3_transform_recovery(criterion):
    cfg = SynthConfig()
    dims = (cfg.height, cfg.width)
    steps = GridSpec().steps
    t0 = time.perf_counter()
    hits = 0
    for i in range(50):
        sc = generate_case(cfg, 5000 + i)
        regions = connected_components(sc.to_case().gt_mask())
        t, _ = fit_rigid_transform(regions, PrickLayout(), GridSpec(), dims, cfg.mm_per_pixel)
        err = np.abs(np.array([t.tx, t.ty, t.theta]) - np.array(sc.transform))
        hits += bool(np.all(err <= np.array(steps) + 1e-9))
    dt = time.perf_counter() - t0
    ok = hits >= 48 and dt < 120
    criterion(3, "transform recovery", ok, f"{hits}/50 within one grid step, {dt:.1f}s")
    assert ok


def test_4_metric_oracles(criterion):
    a = np.zeros((4, 4), bool)
    a[:2] = True
    b = np.zeros((4, 4), bool)
    b[1:3] = True
    fixtures = [
        dice(a, b) == 0.5,
        iou(a, b) == 4 / 12,
        dice(a, a) == 1.0,
        dice(np.zeros((2, 2), bool), np.zeros((2, 2), bool)) == 1.0,
        iou(None, a) == 0.0,
        accuracy_curve([0.5, 0.6, 0.9, 0.0], [0.5, 0.6]) == [(0.5, 0.5), (0.6, 0.25)],
    ]
    rng = np.random.default_rng(4)
    ts = default_iou_thresholds()
    monotone = 0
    for _ in range(100):
        accs = [x for _, x in accuracy_curve(rng.random(rng.integers(1, 40)), ts)]
        monotone += all(x >= y for x, y in zip(accs, accs[1:]))
    ordered = 0
    for _ in range(100):
        p, g = rng.random((16, 16)) < rng.random(), rng.random((16, 16)) < rng.random()
        p[0, 0] = True
        ordered += iou(p, g) <= dice(p, g) + 1e-12
    ok = all(fixtures) and monotone == 100 and ordered == 100
    criterion(4, "metric oracles", ok,
              f"fixtures {sum(fixtures)}/{len(fixtures)}, monotone {monotone}/100, IoU<=Dice {ordered}/100")
    assert ok


@pytest.mark.slow
def test_5_synthetic_benchmark(criterion, tmp_path):
    t0 = time.perf_counter()
    generate_corpus(SynthConfig(), 100, 42, tmp_path / "corpus")
    cases = load_corpus(tmp_path / "corpus")
    base = dict(epochs=16, height=192, width=128, hidden_features=16, num_groups=8, seed=0, split_ratio=0.8)
    tr, va = stratified_split(cases, base["split_ratio"], base["seed"])
    reports = {}
    for mode in ("spat32", "fullLight1"):
        model, _ = train(tr, TrainConfig(mode=mode, **base))
        reports[mode], _, _ = evaluate_model(model, va)
    dt = time.perf_counter() - t0
    d32, d1 = reports["spat32"].dice, reports["fullLight1"].dice
    acc = reports["spat32"].accuracy_at(0.5)
    checks = {"a": d32 >= DICE_FLOOR, "b": d32 - d1 >= GAP_FLOOR, "c": acc is not None and acc >= ACC50_FLOOR}
    ok = all(checks.values()) and len(tr) == 80 and len(va) == 20 and dt < 30 * 60
    criterion(5, "synthetic benchmark", ok,
              f"{len(tr)}/{len(va)} split, spat32 Dice {d32:.3f}, fullLight1 Dice {d1:.3f}, gap {d32 - d1:.3f}, "
              f"spat32 acc@0.5 {acc if acc is None else round(acc, 3)} on {reports['spat32'].n_wheals} wheals, "
              f"{dt / 60:.1f} min; locked floors {DICE_FLOOR:.3f}/{GAP_FLOOR:.3f}/{ACC50_FLOOR:.2f}")
    assert ok, checks


def test_6_saliency(criterion):
    t0 = time.perf_counter()
    cfg = UNetConfig.for_mode("spat32", hidden_features=8, num_groups=4, height=16, width=16, depth=2)
    sums_ok = dead_ok = perm_ok = True
    for seed in range(5):
        rng = np.random.default_rng(seed)
        m = build(cfg, seed)
        dead = int(rng.integers(32))
        m.params["enc0.conv1.weight"].data[:, 3 * dead:3 * dead + 3] = 0.0
        g = input_gradients(m, rng.random((96, 16, 16)).astype(np.float32),
                            (rng.random((16, 16)) > 0.5).astype(np.float32))
        s = image_scores(g)
        sums_ok &= abs(s.sum() - 1.0) <= 1e-6
        dead_ok &= s[dead] == 0.0
        perm = rng.permutation(32)
        gp = g.reshape(32, 3, 16, 16)[perm].reshape(96, 16, 16)
        perm_ok &= np.allclose(image_scores(gp), s[perm], rtol=1e-12, atol=0)
    dt = time.perf_counter() - t0
    ok = sums_ok and dead_ok and perm_ok and dt < 60
    criterion(6, "saliency", ok, f"sum-to-one {sums_ok}, dead image zero {dead_ok}, "
                                 f"permutation equivariant {perm_ok} over 5 seeds, {dt:.1f}s")
    assert ok


def test_7_clinical_filter(criterion):
    cfg = SynthConfig(presence_prob=1.0, diameter_mm=(4.5, 4.5), aspect=(1.0, 1.0), irregularity=0.0)
    sc = generate_case(cfg, 0)
    areas = [rasterize_polygon(p, (cfg.height, cfg.width)).sum() * cfg.mm_per_pixel ** 2
             for p in sc.polygons.values()]
    worst = max(abs(a - CLINICAL_AREA_MM2) / CLINICAL_AREA_MM2 for a in areas)
    px = CLINICAL_AREA_MM2 / 0.0625           # 254.4 px at 0.25 mm/px
    kept = clinical_filter([math.floor(px), math.ceil(px), 1000, 0], 0.25)
    ok = worst <= 0.05 and kept == [1, 2]
    criterion(7, "clinical filter", ok,
              f"4.5 mm discs within {100 * worst:.2f}% of 15.9 mm^2, fixture keeps {kept}")
    assert ok


def test_8_determinism(criterion, tmp_path):
    cfg = tmp_path / "synth.json"
    cfg.write_text(json.dumps(SynthConfig(height=96, width=64, mm_per_pixel=0.5).to_dict()))
    reports = []
    for run in ("a", "b"):
        d = tmp_path / run
        assert main(["synth", "--n", "6", "--seed", "8", "--config", str(cfg), "--out", str(d / "data")]) == 0
        assert main(["train", "--dataset", str(d / "data"), "--mode", "spat32", "--epochs", "2", "--size", "48x32",
                     "--hidden-features", "8", "--split-ratio", "0.5", "--out", str(d / "model")]) == 0
        assert main(["eval", "--dataset", str(d / "data"), "--model", str(d / "model"), "--no-overlays",
                     "--out", str(d / "eval")]) == 0
        reports.append((d / "eval" / "report_spat32.json").read_bytes())
    ok = reports[0] == reports[1]
    criterion(8, "determinism", ok, f"eval reports {'byte-identical' if ok else 'differ'} ({len(reports[0])} bytes)")
    assert ok
