"""End-to-end acceptance checks.

Each test prints one PASS/FAIL line on the real stdout so the verdicts stay
visible under pytest's output capture. The toy experiment fixture runs the
full pipeline once per session at the quick preset (about nine CPU-minutes);
the reproducibility check runs a micro-scale pipeline twice.
"""

import sys
import time

import numpy as np
import pytest
from scipy import ndimage

from atlasaug import synth, toydata
from atlasaug.fields import warp_linear_raw
from atlasaug.models import (AppearanceModel, SpatialModel,
                             predict_appearance, predict_displacement)
from atlasaug.pipeline import ExperimentConfig, Workspace
from atlasaug.segment import dice
from atlasaug.synth import SynthesisPlan, Synthesizer, distinct_plan_count
from atlasaug.toydata import ToyGenParams

import acceptance_log
import gradsuite


def verdict(ok: bool, line: str) -> None:
    text = f"{'PASS' if ok else 'FAIL'}: {line}"
    acceptance_log.lines.append(text)
    print(text, file=sys.__stdout__, flush=True)
    assert ok, line


@pytest.fixture(scope="session")
def toy_run(tmp_path_factory):
    """One full pipeline run at the quick preset; shared by several checks."""
    ws = Workspace(tmp_path_factory.mktemp("acceptance") / "ws",
                   ExperimentConfig.quick())
    report = ws.run_all()
    return ws, report


# ---------------------------------------------------------------------------
# 1. gradients


def test_gradient_suite_accuracy_and_runtime():
    start = time.time()
    worst = gradsuite.run_suite(probes=25, tol=1e-3)
    elapsed = time.time() - start
    bad = {k: v for k, v in worst.items() if v >= 1e-3}
    verdict(not bad and elapsed < 60.0,
            f"gradient suite: {len(worst)} operators x 25 probes, worst rel err "
            f"{max(worst.values()):.2e} (< 1e-3), {elapsed:.1f}s (< 60s)")


# ---------------------------------------------------------------------------
# 2. untrained transforms are identities


def test_untrained_models_are_exact_identities(toy_run):
    ws, _ = toy_run
    atlas, atlas_labels, unlabeled, *_ = ws.load_corpus()
    spatial = SpatialModel.create(widths=(8, 16, 16), seed=1)
    appearance = AppearanceModel.create(widths=(8, 16, 16), seed=2)

    u = predict_displacement(spatial.forward_net, atlas, unlabeled[0])
    psi = predict_appearance(appearance, atlas, unlabeled[0])
    zero_field = not u.components.any()
    zero_delta = not psi.any()

    ex = Synthesizer(atlas, atlas_labels, spatial, appearance,
                     unlabeled).synthesize(SynthesisPlan("indep", 0, 1))
    image_exact = ex.image.tobytes() == atlas.astype(np.float32).tobytes()
    labels_exact = ex.labels.tobytes() == atlas_labels.tobytes()
    verdict(zero_field and zero_delta and image_exact and labels_exact,
            "untrained models: zero field, zero delta, identity synthesis "
            "reproduces the atlas pair bit-exactly")


# ---------------------------------------------------------------------------
# 3. label consistency of synthesis


def test_label_consistency_of_synthesis(toy_run):
    ws, _ = toy_run
    atlas, atlas_labels, unlabeled, *_ = ws.load_corpus()
    spatial, appearance = ws.load_models()
    sy = Synthesizer(atlas, atlas_labels, spatial, appearance, unlabeled)
    plans = synth.enumerate_plans("indep", len(unlabeled), seed=99, count=50)
    struct = np.ones((3, 3), dtype=bool)
    checked = 0
    for plan in plans:
        ex = sy.synthesize(plan)
        phi = sy.phi(plan.spatial_target_index)
        for lab in np.unique(atlas_labels):
            indicator = (atlas_labels == lab).astype(np.float32)
            support = warp_linear_raw(indicator, phi) > 0.5
            region = ex.labels == lab
            disagree = support ^ region
            # fringe: voxels within one step of the warped region boundary
            fringe = (ndimage.binary_dilation(region, struct)
                      & ~ndimage.binary_erosion(region, struct))
            if (disagree & ~fringe).any():
                verdict(False, f"label consistency: plan {plan} label {lab} "
                               "disagrees beyond the 1-voxel fringe")
        checked += 1
    verdict(checked == 50,
            "label consistency: 50 synthesized examples, warped indicator "
            "supports match warped labels up to a 1-voxel fringe")


# ---------------------------------------------------------------------------
# 4. toy experiment orderings and plan combinatorics


def test_toy_dice_orderings(toy_run):
    _, report = toy_run
    m = {name: report.summary["methods"][name]["mean_dice"]
         for name in report.summary["methods"]}
    gaps_ok = (m["ours-indep"] - m["SAS-aug"] >= 0.01
               and m["SAS-aug"] - m["SAS"] >= 0.01
               and m["ours-indep"] - m["atlas-only"] >= 0.01)
    verdict(gaps_ok,
            "mean Dice ordering ours-indep > SAS-aug > SAS and > atlas-only "
            f"with gaps >= 0.01 (ours-indep {m['ours-indep']:.4f}, "
            f"SAS-aug {m['SAS-aug']:.4f}, SAS {m['SAS']:.4f}, "
            f"atlas-only {m['atlas-only']:.4f})")


def test_ours_indep_beats_sas_per_subject(toy_run):
    _, report = toy_run
    ours = report.summary["methods"]["ours-indep"]["per_subject_mean_dice"]
    sas = report.summary["methods"]["SAS"]["per_subject_mean_dice"]
    wins = sum(a > b for a, b in zip(ours, sas))
    verdict(wins == len(ours),
            f"ours-indep beats SAS on every test subject ({wins}/{len(ours)})")


def test_plan_combinatorics():
    count = distinct_plan_count("indep", 100)
    sample = synth.enumerate_plans("indep", 100, seed=0, count=10000)
    pairings = {(p.spatial_target_index, p.appearance_target_index)
                for p in sample}
    verdict(count >= 10000 and len(pairings) >= 100,
            f"independent sampling over 100 unlabeled subjects: {count} "
            f"distinct plans, {len(pairings)} pairings drawn in 10000 samples")


# ---------------------------------------------------------------------------
# 5. supervised upper bound


def test_supervised_is_upper_bound(toy_run):
    _, report = toy_run
    m = {name: report.summary["methods"][name]["mean_dice"]
         for name in report.summary["methods"]}
    others = {k: v for k, v in m.items() if k != "supervised"}
    verdict(all(m["supervised"] >= v for v in others.values()),
            f"supervised mean Dice {m['supervised']:.4f} >= every other "
            f"method (best other {max(others.values()):.4f})")


# ---------------------------------------------------------------------------
# 6. byte-identical reruns


def micro_config():
    cfg = ExperimentConfig()
    cfg.toy = ToyGenParams(size=32, warp_amplitude=2.0, warp_spacing=8)
    cfg.n_train, cfg.n_val, cfg.n_test = 3, 1, 2
    cfg.widths = (4, 8, 8)
    cfg.seg_widths = (4, 8, 8)
    cfg.spatial_steps = 10
    cfg.appearance_steps = 10
    cfg.seg_max_epochs = 2
    cfg.seg_patience = 2
    cfg.seg_iters_per_epoch = 2
    cfg.seg_batch_size = 4
    return cfg


def test_identical_runs_are_byte_identical(tmp_path):
    outputs = []
    for name in ("first", "second"):
        ws = Workspace(tmp_path / name, micro_config())
        ws.run_all()
        outputs.append({f.name: f.read_bytes()
                        for f in sorted(ws.report_dir.iterdir())})
    same = outputs[0] == outputs[1]
    names = sorted(outputs[0])
    verdict(same and "metrics.csv" in names and "summary.json" in names,
            f"two identical-config runs produced byte-identical metric files "
            f"({', '.join(names)})")


# ---------------------------------------------------------------------------
# 7. dice unit oracle


def test_dice_unit_oracle():
    exact = dice(np.array([1, 1]), np.array([1, 1]), 1)
    disjoint = dice(np.array([1, 0]), np.array([0, 1]), 1)
    half = dice(np.array([1, 1, 1, 1, 0, 0]), np.array([1, 1, 0, 0, 1, 1]), 1)
    verdict((exact, disjoint, half) == (1.0, 0.0, 0.5),
            f"dice oracle: {exact} / {disjoint} / {half} == 1.0 / 0.0 / 0.5")
