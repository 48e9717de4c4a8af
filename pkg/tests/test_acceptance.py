"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line.  Criteria 7-9 train real models and take several minutes;
their scales are pinned below (calibrated on a 2-core worker).
"""

import json
import math
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

import geomatch
from geomatch.evaluation import (
    evaluate_grid_loss,
    evaluate_model,
    run_ablation,
    train_eval_split,
    write_ablation_report,
)
from geomatch.geometry import (
    TransformParams,
    compose_apply,
    cross2,
    make_grid,
    map_points,
)
from geomatch.loss import (
    GaussianWeightConfig,
    gaussian_weights,
    grid_loss,
    weighted_grid_loss,
)
from geomatch.matching import FeatureMap, cosine_correlation, pearson_correlation
from geomatch.model import RegressorSpec, TrainConfig, train
from geomatch.gradcheck import MODULES, run_gradcheck
from geomatch.synth import (
    GenConfig,
    generate_corpus,
    generate_dataset,
    quad_is_convex,
    read_dataset,
)

ARTIFACT_DIR = Path(__file__).resolve().parent / "_acceptance_artifacts"

# Desk-scale experiment pins (criteria 7-9), calibrated before release.
C7_TRAIN = dict(count=2000, image_size=64, max_perturb_frac=0.25, seed=1)
C7_EVAL = dict(count=300, image_size=64, max_perturb_frac=0.25, seed=2)
C7_CONFIG = TrainConfig(epochs=30, lr=2e-3, batch_size=16, seed=0)
C7_PCK_THRESHOLD = 0.8
C7_BUDGET_S = 600.0

C8_DATA = dict(count=1000, image_size=64, max_perturb_frac=0.25, seed=3)
C9_DATA = dict(count=1200, image_size=48, max_perturb_frac=0.25, seed=41)
C89_CONFIG = TrainConfig(epochs=30, lr=2e-3, batch_size=16)
C89_SEEDS = (0, 1, 2, 3, 4)


def _report(criterion: str, passed: bool, detail: str) -> None:
    status = "PASS" if passed else "FAIL"
    print(f"[acceptance] criterion {criterion}: {status} ({detail})")


def random_homography(rng, spread=0.3):
    delta = np.concatenate(
        [rng.uniform(-spread, spread, 6), rng.uniform(-0.15, 0.15, 2), rng.uniform(-0.2, 0.2, 1)]
    )
    return TransformParams.homography(np.eye(3).ravel() + delta)


def random_affine(rng, spread=0.3):
    return TransformParams.affine(
        np.array([1.0, 0, 0, 0, 1.0, 0]) + rng.uniform(-spread, spread, 6)
    )


class TestCriterion1Gradients:
    def test_gradient_suite(self):
        start = time.perf_counter()
        results = run_gradcheck(MODULES)
        elapsed = time.perf_counter() - start
        worst = {r.name: r.max_rel_err for r in results}
        ok = all(r.passed for r in results) and elapsed < 60.0
        _report(
            "1",
            ok,
            f"{len(results)} checks, worst rel err "
            f"{max(worst.values()):.2e}, {elapsed:.1f}s",
        )
        assert elapsed < 60.0
        for r in results:
            assert r.max_rel_err < r.tolerance, f"{r.name}: {r.max_rel_err:.3e}"


class TestCriterion2Pearson:
    def test_shift_scale_invariance_and_equivalence(self):
        rng = np.random.default_rng(20)
        worst_inv = 0.0
        worst_eq = 0.0
        for _ in range(1000 // 16):  # 16 descriptor pairs per feature-map pair
            fa = FeatureMap(rng.normal(size=(4, 4, 8)))
            fb = FeatureMap(rng.normal(size=(4, 4, 8)))
            base = pearson_correlation(fa, fb).data
            a = rng.uniform(0.2, 5.0)
            b = rng.uniform(-3.0, 3.0)
            shifted = FeatureMap(a * fb.data + b)
            worst_inv = max(
                worst_inv, np.abs(pearson_correlation(fa, shifted).data - base).max()
            )
            centered_a = FeatureMap(fa.data - fa.data.mean(axis=2, keepdims=True))
            centered_b = FeatureMap(fb.data - fb.data.mean(axis=2, keepdims=True))
            worst_eq = max(
                worst_eq,
                np.abs(cosine_correlation(centered_a, centered_b).data - base).max(),
            )
        ok = worst_inv < 1e-12 and worst_eq < 1e-12
        _report("2", ok, f"invariance {worst_inv:.2e}, equivalence {worst_eq:.2e}")
        assert worst_inv < 1e-12
        assert worst_eq < 1e-12

    def test_cosine_shift_counterexample(self):
        x = FeatureMap(np.array([[[1.0, 0.0]]]))
        shifted = FeatureMap(x.data + 1.0)
        same = cosine_correlation(x, x).data[0, 0, 0]
        moved = cosine_correlation(x, shifted).data[0, 0, 0]
        gap = abs(moved - same)
        _report("2 (cosine shift)", gap > 1e-3, f"cosine changed by {gap:.4f} under shift")
        assert abs(same - 1.0) < 1e-12
        assert gap > 1e-3


class TestCriterion3ProjectiveEquivalence:
    def test_scaled_homographies(self):
        rng = np.random.default_rng(30)
        grid = make_grid(20)
        w = gaussian_weights(grid, GaussianWeightConfig())
        worst_grid_dev = 0.0
        worst_loss_dev = 0.0
        for _ in range(1000):
            t = random_homography(rng)
            base_pts = map_points(t, grid.points)
            gt = random_homography(rng)
            base_g = grid_loss(t, gt, grid)
            base_w = weighted_grid_loss(t, gt, grid, w)
            for lam in (-3.0, 0.01, 7.0):
                scaled = TransformParams.homography(lam * t.values)
                worst_grid_dev = max(
                    worst_grid_dev, np.abs(map_points(scaled, grid.points) - base_pts).max()
                )
                worst_loss_dev = max(
                    worst_loss_dev,
                    abs(grid_loss(scaled, gt, grid) - base_g),
                    abs(weighted_grid_loss(scaled, gt, grid, w) - base_w),
                )
        ok = worst_grid_dev < 1e-12 and worst_loss_dev < 1e-10
        _report("3", ok, f"grid dev {worst_grid_dev:.2e}, loss dev {worst_loss_dev:.2e}")
        assert worst_grid_dev < 1e-12
        assert worst_loss_dev < 1e-10


class TestCriterion4DataGeneration:
    def test_thousand_samples(self, tmp_path):
        corpus = tmp_path / "corpus"
        generate_corpus(corpus, 32, 48, seed=77)
        cfg = GenConfig(count=1000, image_size=48, max_perturb_frac=0.25, seed=123)
        generate_dataset(corpus, tmp_path / "d1", cfg)
        samples = read_dataset(tmp_path / "d1")
        assert len(samples) == 1000
        worst_resid = 0.0
        for s in samples:
            worst_resid = max(
                worst_resid,
                np.abs(map_points(s.h_gt, s.corners_src) - s.corners_dst).max(),
            )
            assert quad_is_convex(s.corners_dst)
        generate_dataset(corpus, tmp_path / "d2", cfg)
        identical = (tmp_path / "d1" / "manifest.jsonl").read_bytes() == (
            tmp_path / "d2" / "manifest.jsonl"
        ).read_bytes()
        ok = worst_resid < 1e-9 and identical
        _report("4", ok, f"worst corner residual {worst_resid:.2e}, regen identical {identical}")
        assert worst_resid < 1e-9
        assert identical


class TestCriterion5GaussianWeights:
    def test_values_and_zero_set(self):
        cfg = GaussianWeightConfig(sigma=1.0, gamma=0.5)
        g5 = make_grid(5)
        w5 = gaussian_weights(g5, cfg)
        idx_center = np.flatnonzero(np.all(g5.points == [0.0, 0.0], axis=1))[0]
        idx_half = np.flatnonzero(np.all(g5.points == [0.5, 0.5], axis=1))[0]
        corner = np.flatnonzero(np.all(g5.points == [1.0, 1.0], axis=1))[0]
        vals_ok = (
            w5[idx_center] == 1.0
            and abs(w5[idx_half] - math.exp(-0.25)) < 1e-15
            and w5[corner] == 0.0
        )
        g20 = make_grid(20)
        w20 = gaussian_weights(g20, cfg)
        r2 = np.sum(g20.points**2, axis=1)
        zero_set_ok = np.array_equal(w20 == 0.0, r2 > 2.0 * math.log(2.0))
        _report(
            "5",
            vals_ok and zero_set_ok,
            f"w(0,0)=1, w(.5,.5)={w5[idx_half]:.6f}, zero set exact on 20x20: {zero_set_ok}",
        )
        assert vals_ok
        assert zero_set_ok


@pytest.fixture(scope="module")
def desk64_training(tmp_path_factory):
    """Criterion 7 data: 2000-sample training set plus a held-out set."""
    root = tmp_path_factory.mktemp("desk64")
    generate_corpus(root / "corpus", 64, 64, seed=100)
    generate_dataset(root / "corpus", root / "train", GenConfig(**C7_TRAIN))
    generate_dataset(root / "corpus", root / "eval", GenConfig(**C7_EVAL))
    return read_dataset(root / "train"), read_dataset(root / "eval")


@pytest.fixture(scope="module")
def desk64_ablation(tmp_path_factory):
    """Criterion 8 data: 1000 samples at the criterion-7 scale."""
    root = tmp_path_factory.mktemp("abl64")
    generate_corpus(root / "corpus", 64, 64, seed=100)
    generate_dataset(root / "corpus", root / "data", GenConfig(**C8_DATA))
    return read_dataset(root / "data")


@pytest.fixture(scope="module")
def desk48_composition(tmp_path_factory):
    """Criterion 9 data: the two-stage refinement experiment set."""
    root = tmp_path_factory.mktemp("comp48")
    generate_corpus(root / "corpus", 48, 48, seed=300)
    generate_dataset(root / "corpus", root / "data", GenConfig(**C9_DATA))
    return read_dataset(root / "data")


class TestCriterion6Naturalness:
    def test_collinearity_and_cross_ratios(self):
        rng = np.random.default_rng(60)
        worst_col = 0.0
        worst_cr = 0.0
        for _ in range(100):
            t1 = random_homography(rng)  # stage 1
            t2 = random_affine(rng)  # stage 2; composed map is t2(t1(.))
            base = rng.uniform(-0.5, 0.5, 2)
            direction = rng.uniform(-1.0, 1.0, 2)
            direction /= np.linalg.norm(direction)
            pts = base + np.outer([0.0, 0.3, 0.55, 0.9], direction)
            out = compose_apply(t2, t1, pts)
            worst_col = max(worst_col, abs(cross2(out[1] - out[0], out[2] - out[0])))

            def cross_ratio(p):
                d = p[1:] - p[0]
                u = d[-1] / np.linalg.norm(d[-1])
                s = np.concatenate([[0.0], d @ u])
                return ((s[2] - s[0]) * (s[3] - s[1])) / ((s[2] - s[1]) * (s[3] - s[0]))

            worst_cr = max(worst_cr, abs(cross_ratio(pts) - cross_ratio(out)))
        ok = worst_col < 1e-9 and worst_cr < 1e-9
        _report("6", ok, f"collinearity {worst_col:.2e}, cross-ratio {worst_cr:.2e}")
        assert worst_col < 1e-9
        assert worst_cr < 1e-9


class TestCriterion7DeskScaleTraining:
    def test_full_config_reaches_pck(self, desk64_training):
        train_set, eval_set = desk64_training
        start = time.perf_counter()
        ckpt = geomatch.train(train_set, C7_CONFIG)
        train_s = time.perf_counter() - start
        result = evaluate_model(eval_set, ckpt, alpha=0.1)
        elapsed = time.perf_counter() - start

        ARTIFACT_DIR.mkdir(exist_ok=True)
        manifest = {
            "criterion": 7,
            "config": {
                "train_set": C7_TRAIN,
                "eval_set": C7_EVAL,
                "loss": C7_CONFIG.loss,
                "corr": C7_CONFIG.corr,
                "epochs": C7_CONFIG.epochs,
                "lr": C7_CONFIG.lr,
                "batch_size": C7_CONFIG.batch_size,
                "seed": C7_CONFIG.seed,
            },
            "threshold_pck": C7_PCK_THRESHOLD,
            "calibrated_pck": result.pck,
            "n_failures": result.n_failures,
            "train_wall_clock_s": round(train_s, 1),
            "total_wall_clock_s": round(elapsed, 1),
        }
        (ARTIFACT_DIR / "criterion7_manifest.json").write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n"
        )
        ok = result.pck >= C7_PCK_THRESHOLD and elapsed < C7_BUDGET_S
        _report(
            "7",
            ok,
            f"held-out PCK@0.1 = {result.pck:.4f} (threshold {C7_PCK_THRESHOLD}), "
            f"{elapsed:.0f}s of {C7_BUDGET_S:.0f}s budget",
        )
        assert elapsed < C7_BUDGET_S
        assert result.pck >= C7_PCK_THRESHOLD


class TestCriterion8AblationDirection:
    def test_table_direction(self, desk64_ablation):
        report = run_ablation(desk64_ablation, C89_SEEDS, C89_CONFIG)
        ARTIFACT_DIR.mkdir(exist_ok=True)
        write_ablation_report(report, ARTIFACT_DIR)
        med = report.medians()
        per = {c: report.config_pcks(c) for c in med}
        full = per["pearson+9+weighted"]
        assert len(full) == len(C89_SEEDS), "full configuration must not fail"

        verdicts = {}
        for variant in ("cosine+9+weighted", "pearson+9+mse"):
            vals = per[variant]
            violations = sum(1 for a, b in zip(full, vals) if a < b)
            verdicts[variant] = violations
            print(
                f"[acceptance] criterion 8: full {med['pearson+9+weighted']:.4f} vs "
                f"{variant} {med[variant]:.4f} (per-seed violations {violations}/5)"
            )
        # Report-only orderings (the 9-vs-8 and weighted-vs-grid directions).
        for a, b, label in (
            ("pearson+9+weighted", "pearson+8+weighted", "9 vs 8 parameters"),
            ("pearson+9+weighted", "pearson+9+grid", "weighted vs plain grid loss"),
        ):
            direction = ">=" if med[a] >= med[b] else "<"
            print(
                f"[acceptance] criterion 8 (report only): {label}: "
                f"{med[a]:.4f} {direction} {med[b]:.4f}"
            )
        ok = all(v < 4 for v in verdicts.values())
        _report(
            "8",
            ok,
            "; ".join(f"vs {k}: {v}/5 violations" for k, v in verdicts.items()),
        )
        for variant, violations in verdicts.items():
            assert violations < 4, (
                f"full config lost to {variant} in {violations}/5 seeds"
            )


class TestCriterion9CompositionDirection:
    def test_two_stage_tps_at_least_as_good(self, desk48_composition):
        train_set, eval_set = train_eval_split(desk48_composition)
        singles, composed, pck_single, pck_composed = [], [], [], []
        for seed in C89_SEEDS:
            cfg = replace(C89_CONFIG, seed=seed)
            ck1 = train(train_set, cfg)
            residual = geomatch.make_residual_samples(train_set, ck1)
            ck2 = train(
                residual,
                replace(cfg, loss="grid"),
                regressor=RegressorSpec(mode="tps"),
            )
            singles.append(float(np.mean(evaluate_grid_loss(eval_set, ck1))))
            composed.append(float(np.mean(evaluate_grid_loss(eval_set, ck1, ckpt2=ck2))))
            pck_single.append(evaluate_model(eval_set, ck1).pck)
            pck_composed.append(evaluate_model(eval_set, ck1, ckpt2=ck2).pck)
            print(
                f"[acceptance] criterion 9 seed {seed}: grid loss "
                f"{singles[-1]:.4f} -> {composed[-1]:.4f}, PCK "
                f"{pck_single[-1]:.3f} -> {pck_composed[-1]:.3f}"
            )
        med_single = float(np.median(singles))
        med_composed = float(np.median(composed))
        ok = med_composed <= med_single
        _report(
            "9",
            ok,
            f"median held-out grid loss: homography+TPS {med_composed:.4f} vs "
            f"single {med_single:.4f}; median PCK {np.median(pck_composed):.3f} vs "
            f"{np.median(pck_single):.3f}",
        )
        ARTIFACT_DIR.mkdir(exist_ok=True)
        (ARTIFACT_DIR / "criterion9_report.json").write_text(
            json.dumps(
                {
                    "seeds": list(C89_SEEDS),
                    "grid_loss_single": singles,
                    "grid_loss_two_stage": composed,
                    "pck_single": pck_single,
                    "pck_two_stage": pck_composed,
                },
                indent=2,
            )
            + "\n"
        )
        assert med_composed <= med_single
