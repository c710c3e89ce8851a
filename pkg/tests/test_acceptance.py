"""Numbered end-to-end acceptance criteria.

Each test prints one `criterion N: PASS/FAIL - detail` line (bypassing
capture) and asserts with the same message. Criteria 7 and 8 share one
expensive session fixture; criterion 5 trains the reference detector
inline. Budgets stated in the asserts are wall-clock seconds.
"""

import hashlib
import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from cft import boxes as bx, condense as cd, detector as det, metrics as mt
from cft import synth
from cft import trace as tr
from cft.cli import main as cli_main
from cft.io import read_jsonl
from cft.metrics import LossWeights
from oracles import (loop_aggregate_heatmap, loop_concentration,
                     loop_peak_layer, mc_iou_giou)

DATA_DIR = Path(tr.__file__).parent / "data"


def _report(capsys, n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    with capsys.disabled():
        print(f"\n{line}", flush=True)
    assert ok, line


@pytest.fixture(autouse=True)
def _no_ambient_config(monkeypatch):
    monkeypatch.delenv("CFT_CONFIG", raising=False)


# -- 1: concentration closed forms -------------------------------------------------


def _random_region(rng, grid):
    hp, wp = grid
    if rng.random() < 0.5:
        r0 = int(rng.integers(0, hp)); r1 = int(rng.integers(r0, hp)) + 1
        c0 = int(rng.integers(0, wp)); c1 = int(rng.integers(c0, wp)) + 1
        patches = frozenset(r * wp + c for r in range(r0, r1)
                            for c in range(c0, c1))
    else:
        k = int(rng.integers(1, hp * wp + 1))
        patches = frozenset(int(i) for i in
                            rng.choice(hp * wp, size=k, replace=False))
    return mt.Region(patches=patches, grid=grid)


def test_criterion_01_concentration_exactness(capsys):
    t0 = time.monotonic()
    rng = np.random.default_rng(1)
    worst_uniform = worst_confined = 0.0
    for _ in range(500):
        grid = (int(rng.integers(2, 41)), int(rng.integers(2, 41)))
        region = _random_region(rng, grid)
        c = float(rng.uniform(0.1, 5.0))

        uniform = mt.HeatMap.full(np.full(grid, c))
        worst_uniform = max(worst_uniform,
                            abs(mt.concentration(uniform, region) - 1.0))

        vals = np.zeros(grid)
        vals.reshape(-1)[list(region.patches)] = c
        confined = mt.HeatMap.full(vals)
        want = grid[0] * grid[1] / len(region)
        worst_confined = max(worst_confined,
                             abs(mt.concentration(confined, region) - want))
    dt = time.monotonic() - t0
    ok = worst_uniform <= 1e-6 and worst_confined <= 1e-6 and dt < 5.0
    _report(capsys, 1, ok,
            f"500 configs, |s-1| max {worst_uniform:.2e}, "
            f"confined max {worst_confined:.2e}, {dt:.2f}s")


# -- 2: brute-force attention oracles ----------------------------------------------


def test_criterion_02_bruteforce_agreement(capsys):
    t0 = time.monotonic()
    rng = np.random.default_rng(2)
    worst_heat = worst_conc = 0.0
    peak_all = True
    for _ in range(100):
        while True:
            L = int(rng.integers(1, 37)); H = int(rng.integers(1, 9))
            Q = int(rng.integers(1, 17))
            hp = int(rng.integers(1, 33)); wp = int(rng.integers(1, 33))
            if L * H * Q * hp * wp <= 600_000:
                break
        w = rng.random((L, H, Q, hp * wp)) + 1e-3
        w /= w.sum(axis=-1, keepdims=True)
        at = mt.AttentionTensor(weights=w, grid=(hp, wp))
        qids = sorted(int(i) for i in rng.choice(
            Q, size=int(rng.integers(1, Q + 1)), replace=False))
        layer = int(rng.integers(0, L))

        got = mt.aggregate_heatmap(at, layer, qids)
        want = loop_aggregate_heatmap(w, layer, qids, (hp, wp))
        worst_heat = max(worst_heat, float(np.max(np.abs(got.values - want))))

        region = _random_region(rng, (hp, wp))
        s_got = mt.concentration(got, region)
        s_want = loop_concentration(want, np.ones((hp, wp), bool),
                                    sorted(region.patches))
        worst_conc = max(worst_conc, abs(s_got - s_want))

        peak_all &= (mt.peak_layer(at, region, qids)
                     == loop_peak_layer(w, sorted(region.patches), qids,
                                        (hp, wp)))
    dt = time.monotonic() - t0
    ok = worst_heat <= 1e-7 and worst_conc <= 1e-7 and peak_all and dt < 60.0
    _report(capsys, 2, ok,
            f"100 tensors, heatmap max {worst_heat:.2e}, concentration max "
            f"{worst_conc:.2e}, peak layers {'all equal' if peak_all else 'MISMATCH'}, "
            f"{dt:.1f}s")


# -- 3: Monte-Carlo geometry oracle ------------------------------------------------


def _random_box(rng):
    x1, x2 = np.sort(rng.uniform(0, 1, 2)); y1, y2 = np.sort(rng.uniform(0, 1, 2))
    if x2 - x1 < 1e-3:
        x2 = min(1.0, x1 + 1e-3)
    if y2 - y1 < 1e-3:
        y2 = min(1.0, y1 + 1e-3)
    return bx.BoxNorm(float(x1), float(y1), float(x2), float(y2))


def test_criterion_03_geometry_oracle(capsys):
    t0 = time.monotonic()
    rng = np.random.default_rng(11)
    worst_iou = worst_giou = 0.0
    bounds_ok = True
    for k in range(1000):
        a, b = _random_box(rng), _random_box(rng)
        i, g = bx.iou(a, b), bx.giou(a, b)
        mi, mg = mc_iou_giou(a.as_tuple(), b.as_tuple(), seed=k)
        worst_iou = max(worst_iou, abs(i - mi))
        worst_giou = max(worst_giou, abs(g - mg))
        bounds_ok &= (-1.0 <= g <= 1.0) and g <= i + 1e-12
    dt = time.monotonic() - t0
    ok = worst_iou <= 1e-3 and worst_giou <= 1e-3 and bounds_ok and dt < 120.0
    _report(capsys, 3, ok,
            f"1000 pairs vs 1e6-sample MC, IoU max {worst_iou:.2e}, GIoU max "
            f"{worst_giou:.2e}, bounds {'ok' if bounds_ok else 'VIOLATED'}, {dt:.1f}s")


# -- 4: full-detector gradient check -----------------------------------------------


def test_criterion_04_gradient_integrity(capsys):
    t0 = time.monotonic()
    rep = det.gradcheck_detector_grouped(seed=0, coords_per_group=200)
    dt = time.monotonic() - t0
    ok = rep.passed and rep.max_rel_err <= 1e-4 and rep.skipped == 0 and dt < 600.0
    _report(capsys, 4, ok,
            f"max rel err {rep.max_rel_err:.2e} over {rep.checked} coordinates "
            f"in {len(det.param_groups(det.init_params(0)))} groups, {dt:.1f}s")


# -- 5: detector learning vs recorded oracle baseline ------------------------------


def test_criterion_05_detector_learning(capsys):
    t0 = time.monotonic()
    data = synth.gen_dataset(5500, 42, synth.SynthConfig(),
                             fractions=(5000 / 5500, 0.0, 500 / 5500))
    train = [s for s in data if s.split == "train"]
    test = [s for s in data if s.split == "test"]
    clean = synth.gen_dataset(500, 43,
                              synth.SynthConfig(noise_level=0.0,
                                                distractor_count=0),
                              fractions=(0.0, 0.0, 1.0))
    oracle_held = float(np.mean(
        [bx.iou(synth.threshold_box_oracle(s.heatmap), s.box) for s in test]))
    oracle_clean = float(np.mean(
        [bx.iou(synth.threshold_box_oracle(s.heatmap), s.box) for s in clean]))

    with open(DATA_DIR / "baselines.json") as f:
        recorded = json.load(f)["threshold_box_oracle"]
    drift = max(abs(oracle_held - recorded["default_config_mean_iou"]),
                abs(oracle_clean - recorded["clean_config_mean_iou"]))

    state, _ = det.train(train, det.DetectorHyper(steps=4000, batch_size=16),
                         seed=0)
    held_iou = det.evaluate(state.params, test).mean_iou
    clean_iou = det.evaluate(state.params, clean).mean_iou
    dt = time.monotonic() - t0
    ok = (held_iou >= oracle_held + 0.05 and clean_iou >= 0.75
          and drift <= 5e-5 and dt < 1800.0)
    _report(capsys, 5, ok,
            f"held-out IoU {held_iou:.4f} vs oracle {oracle_held:.4f}+0.05, "
            f"clean IoU {clean_iou:.4f} (>=0.75), baseline drift {drift:.1e}, "
            f"{dt:.0f}s")


# -- 6: single-sample overfit and determinism --------------------------------------


def test_criterion_06_overfit_sanity(capsys):
    t0 = time.monotonic()
    sample = synth.gen_sample(6, 0, synth.SynthConfig())
    hyper = det.DetectorHyper(steps=500, batch_size=1)
    _, log_a = det.train([sample], hyper, seed=0)
    _, log_b = det.train([sample], hyper, seed=0)
    totals_a = [row.total for row in log_a]
    totals_b = [row.total for row in log_b]
    best = min(totals_a)
    dt = time.monotonic() - t0
    ok = best < 0.05 and totals_a == totals_b
    _report(capsys, 6, ok,
            f"min loss {best:.4f} within {len(totals_a)} steps, identical "
            f"rerun logs: {totals_a == totals_b}, {dt:.0f}s")


# -- 7 and 8 share one condensed model ----------------------------------------------


@dataclass
class _CondensedWorld:
    model: cd.MockAttnModel
    report: cd.CondenseReport
    control: cd.CondenseReport
    held: list
    designated: int
    elapsed: float


@pytest.fixture(scope="session")
def condensed():
    t0 = time.monotonic()
    train_boxes = cd.sample_lab_boxes(2000, seed=800)
    held = cd.sample_lab_boxes(1000, seed=901)

    model = cd.MockAttnModel(seed=0)
    emits = [model.emit(b) for b in held[:200]]
    regions = [mt.box_to_region(b, model.grid) for b in held[:200]]
    designated = cd.select_designated_layer(emits, regions)

    report = cd.train_condense(model, train_boxes, designated,
                               LossWeights(alpha=0.003), cd.CondenseHyper(),
                               0, held)
    control_model = cd.MockAttnModel(seed=0)
    control = cd.train_condense(control_model, train_boxes, designated,
                                LossWeights(alpha=0.0), cd.CondenseHyper(),
                                0, held)
    return _CondensedWorld(model=model, report=report, control=control,
                           held=held, designated=designated,
                           elapsed=time.monotonic() - t0)


def _two_proportion_p(x1, n1, x2, n2):
    pooled = (x1 + x2) / (n1 + n2)
    se = math.sqrt(pooled * (1.0 - pooled) * (1.0 / n1 + 1.0 / n2))
    if se == 0.0:
        return 1.0
    z = (x1 / n1 - x2 / n2) / se
    return math.erfc(abs(z) / math.sqrt(2.0))


def test_criterion_07_condensation_shift(capsys, condensed):
    rep, ctl = condensed.report, condensed.control
    n = len(condensed.held)
    p_control = _two_proportion_p(round(ctl.baseline_share * n), n,
                                  round(ctl.post_share * n), n)
    ok = (0.10 <= rep.baseline_share <= 0.30
          and rep.post_share >= max(2.0 * rep.baseline_share, 0.5)
          and p_control > 0.01
          and condensed.elapsed < 900.0)
    _report(capsys, 7, ok,
            f"layer {condensed.designated}, baseline {rep.baseline_share:.3f} "
            f"in [0.10,0.30], post {rep.post_share:.3f} >= "
            f"max(2x, 0.5), alpha=0 control p {p_control:.3f} > 0.01, "
            f"{condensed.elapsed:.0f}s")


# -- 8: single layer vs layer windows ----------------------------------------------


@dataclass
class _Shim:
    sample_id: str
    heatmap: mt.HeatMap
    box: bx.BoxNorm


def _representation_set(model, boxes, layers, tag):
    out = []
    for i, b in enumerate(boxes):
        at = model.emit(b)
        heat = (mt.aggregate_heatmap(at, layers[0]) if len(layers) == 1
                else mt.aggregate_window(at, layers))
        out.append(_Shim(f"{tag}{i}", heat, b))
    return out


def test_criterion_08_window_ablation(capsys, condensed):
    t0 = time.monotonic()
    d = condensed.designated
    variants = {"single": [d], "win3": [d - 1, d, d + 1],
                "win5": list(range(d - 2, d + 3))}
    train_boxes = cd.sample_lab_boxes(2500, seed=1000)
    means = {}
    for name, layers in variants.items():
        train_set = _representation_set(condensed.model, train_boxes, layers, "t")
        eval_set = _representation_set(condensed.model, condensed.held, layers, "e")
        state, _ = det.train(train_set,
                             det.DetectorHyper(steps=1200, batch_size=16),
                             seed=0)
        means[name] = det.evaluate(state.params, eval_set).mean_iou
    dt = time.monotonic() - t0
    ok = means["single"] >= means["win3"] and means["single"] >= means["win5"]
    _report(capsys, 8, ok,
            f"mean IoU single {means['single']:.4f} >= win3 {means['win3']:.4f} "
            f"and >= win5 {means['win5']:.4f}, {dt:.0f}s")


# -- 9: golden corpus ---------------------------------------------------------------


def test_criterion_09_golden_corpus(capsys):
    t0 = time.monotonic()
    rows = read_jsonl(DATA_DIR / "golden_corpus.jsonl")
    agree = roundtrip = 0
    for row in rows:
        t = tr.parse_trace(row["response"])
        rep = tr.VALIDATORS[row["validator"]](t, row["guidance"])
        if (rep.verdict == row["expect"]
                and sorted(set(rep.rule_ids())) == row["expect_rules"]):
            agree += 1
        once = tr.serialize_trace(t)
        if tr.serialize_trace(tr.parse_trace(once)) == once:
            roundtrip += 1
    dt = time.monotonic() - t0
    ok = (len(rows) >= 30 and agree == len(rows) and roundtrip == len(rows)
          and dt < 1.0)
    _report(capsys, 9, ok,
            f"{agree}/{len(rows)} verdicts agree, {roundtrip}/{len(rows)} "
            f"round-trip fixed points, {dt:.3f}s")


# -- 10: strict threshold boundary ---------------------------------------------------


def test_criterion_10_threshold_boundary(capsys):
    a = bx.BoxNorm(0.0, 0.0, 1.0, 0.1)
    b = bx.BoxNorm(0.0, 0.0, 1.0, 1.0)
    boundary_iou = bx.iou(a, b)
    eps_a = bx.BoxNorm(0.0, 0.0, 1.0, float(np.nextafter(0.1, 0.0)))
    checks = [
        boundary_iou == 0.1,
        bx.classify_grounding_error(a, b, tau=0.1) is False,
        bx.classify_grounding_error(a, b) is False,
        bx.classify_grounding_error(eps_a, b, tau=0.1) is True,
        bx.classify_grounding_error(b, b, tau=0.1) is False,
        bx.classify_grounding_error(bx.BoxNorm(0.0, 0.0, 0.01, 0.01),
                                    bx.BoxNorm(0.9, 0.9, 1.0, 1.0),
                                    tau=0.1) is True,
    ]
    _report(capsys, 10, all(checks),
            f"IoU at boundary {boundary_iou!r}, strict-inequality checks "
            f"{sum(checks)}/{len(checks)}")


# -- 11: byte-identical reruns -------------------------------------------------------


WORLD = ["--set", "synth.layer_count=8", "--set", "synth.modal_layer=5",
         "--set", "synth.grid=[16,16]"]


def _dir_hashes(root: Path) -> dict[str, str]:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != ".lock":
            out[str(p.relative_to(root))] = hashlib.sha256(
                p.read_bytes()).hexdigest()
    return out


def test_criterion_11_reproducibility(capsys, tmp_path):
    t0 = time.monotonic()
    corpus = str(DATA_DIR / "golden_corpus.jsonl")

    def synth_gen(d):
        return ["synth", "gen", "--n", "6", "--with-attention",
                "--out-dir", d, *WORLD]

    ds = [tmp_path / "ds1", tmp_path / "ds2"]
    ck = [tmp_path / "ck1", tmp_path / "ck2"]
    scenarios = {
        "synth gen": synth_gen,
        "attn stats": lambda d: ["attn", "stats", "--data", str(ds[0]),
                                 "--out-dir", d, *WORLD],
        "detector train": lambda d: ["detector", "train", "--data", str(ds[0]),
                                     "--out-dir", d, *WORLD,
                                     "--set", "detector.steps=8",
                                     "--set", "detector.checkpoint_every=4"],
        "condense train": lambda d: ["condense", "train", "--out-dir", d,
                                     *WORLD,
                                     "--set", "condense.steps=20",
                                     "--set", "condense.train_n=60",
                                     "--set", "condense.eval_n=60",
                                     "--set", "condense.epoch_len=10",
                                     "--set", "condense.designated_layer=5"],
        "trace pairs": lambda d: ["trace", "pairs", "--corpus", corpus,
                                  "--out-dir", d],
        "pipeline run": lambda d: ["pipeline", "run", "--out-dir", d, *WORLD,
                                   "--checkpoint",
                                   str(ck[0] / "checkpoint.ckpt"),
                                   "--set", "condense.designated_layer=5"],
    }
    identical = []
    for name, argv in scenarios.items():
        dirs = ds if name == "synth gen" else ck if name == "detector train" \
            else [tmp_path / f"{name.replace(' ', '_')}{i}" for i in (1, 2)]
        hashes = []
        for d in dirs:
            assert cli_main(argv(str(d))) == 0, name
            hashes.append(_dir_hashes(d))
        identical.append(bool(hashes[0]) and hashes[0] == hashes[1])
    dt = time.monotonic() - t0
    ok = all(identical)
    _report(capsys, 11, ok,
            f"{sum(identical)}/{len(identical)} subcommand reruns "
            f"byte-identical (excluding lock), {dt:.0f}s")
