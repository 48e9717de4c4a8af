"""PCK metric, model evaluation on synthetic datasets, and the ablation harness.

Keypoints for synthetic data are the evaluation grid itself: the 20x20
normalized grid mapped to pixel coordinates through the predicted and the
ground-truth transforms.  A keypoint counts as correct when the prediction
lands within alpha * max(height, width) pixels of the ground truth.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import GeomatchError
from .geometry import make_grid, map_points, map_points_clamped
from .model import (
    ExtractorSpec,
    ModelCheckpoint,
    RegressorSpec,
    TrainConfig,
    forward_pipeline,
    train,
    two_stage_match,
)
from .synth import HomographySample

# The five ablation rows: correlation kind, parametrization mode, loss kind.
ABLATION_CONFIGS: tuple[tuple[str, str, str, str], ...] = (
    ("pearson+9+weighted", "pearson", "homo", "weighted"),
    ("cosine+9+weighted", "cosine", "homo", "weighted"),
    ("pearson+8+weighted", "pearson", "homo8", "weighted"),
    ("pearson+9+grid", "pearson", "homo", "grid"),
    ("pearson+9+mse", "pearson", "homo", "mse"),
)


@dataclass(frozen=True)
class PCKResult:
    """Aggregate fraction of correctly matched keypoints."""

    pck: float
    alpha: float
    n_keypoints: int
    per_sample: tuple[float, ...]
    n_failures: int = 0

    def to_dict(self) -> dict:
        return {
            "pck": self.pck,
            "alpha": self.alpha,
            "n_keypoints": self.n_keypoints,
            "n_failures": self.n_failures,
            "per_sample": list(self.per_sample),
        }


def pck(pred, gt, alpha: float, ref_dim: float) -> float:
    """Fraction of points with ||pred - gt||_2 <= alpha * ref_dim (pixels)."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ValueError(f"pred/gt must be matching (N, 2) arrays; got {pred.shape} vs {gt.shape}")
    if len(pred) == 0:
        raise ValueError("pck needs at least one keypoint")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if not ref_dim > 0:
        raise ValueError("ref_dim must be positive")
    dist = np.linalg.norm(pred - gt, axis=1)
    return float(np.mean(dist <= alpha * ref_dim))


def grid_to_pixels(pts: np.ndarray, height: int, width: int) -> np.ndarray:
    """Normalized [-1,1] coordinates to pixel coordinates (align corners)."""
    out = np.empty_like(pts)
    out[:, 0] = (pts[:, 0] + 1.0) * 0.5 * (width - 1)
    out[:, 1] = (pts[:, 1] + 1.0) * 0.5 * (height - 1)
    return out


def _predict_points(
    sample: HomographySample,
    ckpt: ModelCheckpoint,
    ckpt2: ModelCheckpoint | None,
    grid_pts: np.ndarray,
) -> np.ndarray:
    if ckpt.oracle:
        return map_points(sample.h_gt, grid_pts)
    if ckpt2 is not None:
        result = two_stage_match(sample.source, sample.warped, ckpt, ckpt2)
        return result.apply(grid_pts)
    theta = forward_pipeline(sample.source, sample.warped, ckpt)
    return map_points(theta, grid_pts)


def evaluate_model(
    samples: Sequence[HomographySample],
    ckpt: ModelCheckpoint,
    alpha: float = 0.1,
    ckpt2: ModelCheckpoint | None = None,
    grid_n: int = 20,
) -> PCKResult:
    """PCK over a dataset; pipeline failures count as zero-PCK samples."""
    if len(samples) == 0:
        raise ValueError("evaluate_model needs a non-empty dataset")
    grid_pts = make_grid(grid_n).points
    per_sample = []
    failures = 0
    for sample in samples:
        height, width = sample.source.height, sample.source.width
        ref_dim = float(max(height, width))
        gt_pts = map_points_clamped(sample.h_gt, grid_pts)
        try:
            pred_pts = _predict_points(sample, ckpt, ckpt2, grid_pts)
            score = pck(
                grid_to_pixels(pred_pts, height, width),
                grid_to_pixels(gt_pts, height, width),
                alpha,
                ref_dim,
            )
        except GeomatchError:
            failures += 1
            score = 0.0
        per_sample.append(score)
    return PCKResult(
        pck=float(np.mean(per_sample)),
        alpha=alpha,
        n_keypoints=len(samples) * len(grid_pts),
        per_sample=tuple(per_sample),
        n_failures=failures,
    )


def evaluate_grid_loss(
    samples: Sequence[HomographySample],
    ckpt: ModelCheckpoint,
    ckpt2: ModelCheckpoint | None = None,
    grid_n: int = 20,
) -> list[float]:
    """Per-sample mean squared grid deviation of the predicted point map
    (inf for samples whose pipeline fails)."""
    grid_pts = make_grid(grid_n).points
    out = []
    for sample in samples:
        gt_pts = map_points_clamped(sample.h_gt, grid_pts)
        try:
            pred_pts = _predict_points(sample, ckpt, ckpt2, grid_pts)
            out.append(float(np.mean(np.sum((pred_pts - gt_pts) ** 2, axis=1))))
        except GeomatchError:
            out.append(float("inf"))
    return out


# ---------------------------------------------------------------------------
# Ablation harness
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AblationRow:
    config: str
    seed: int
    pck: float  # nan when the run failed
    runtime_s: float
    error: str | None = None
    per_sample: tuple[float, ...] = ()


@dataclass(frozen=True)
class AblationReport:
    """One row per configuration x seed, plus per-config medians."""

    rows: tuple[AblationRow, ...]
    alpha: float

    def config_pcks(self, config: str) -> list[float]:
        return [r.pck for r in self.rows if r.config == config and not math.isnan(r.pck)]

    def medians(self) -> dict[str, float]:
        out = {}
        for label in {r.config for r in self.rows}:
            vals = self.config_pcks(label)
            out[label] = float(np.median(vals)) if vals else float("nan")
        return out

    def sorted_configs(self) -> list[str]:
        med = self.medians()
        labels = sorted(med)
        return sorted(labels, key=lambda c: (-(med[c] if not math.isnan(med[c]) else -1.0), c))


def train_eval_split(
    samples: Sequence[HomographySample], holdout_every: int = 5
) -> tuple[list[HomographySample], list[HomographySample]]:
    """Deterministic id-based split: every k-th id is held out."""
    train_set = [s for s in samples if s.sample_id % holdout_every != 0]
    heldout = [s for s in samples if s.sample_id % holdout_every == 0]
    return train_set, heldout


def run_ablation(
    samples: Sequence[HomographySample],
    seeds: Sequence[int],
    base_config: TrainConfig,
    extractor: ExtractorSpec | None = None,
    conv_channels: int = 32,
    alpha: float = 0.1,
) -> AblationReport:
    """Train and score the five standard configurations for every seed.

    All configurations see the identical id-based train/held-out split; a
    diverging run is recorded as a failed row and the harness continues.
    """
    if len(seeds) < 3:
        raise ValueError("run_ablation needs at least 3 seeds")
    train_set, heldout = train_eval_split(samples)
    if not train_set or not heldout:
        raise ValueError("dataset too small to split into train and held-out parts")

    rows = []
    for seed in seeds:
        for label, corr, mode, loss_kind in ABLATION_CONFIGS:
            cfg = replace(base_config, seed=int(seed), corr=corr, loss=loss_kind)
            regressor = RegressorSpec(mode=mode, conv_channels=conv_channels)
            start = time.perf_counter()
            try:
                ckpt = train(train_set, cfg, extractor=extractor, regressor=regressor)
                result = evaluate_model(heldout, ckpt, alpha=alpha)
                rows.append(
                    AblationRow(
                        config=label,
                        seed=int(seed),
                        pck=result.pck,
                        runtime_s=time.perf_counter() - start,
                        per_sample=result.per_sample,
                    )
                )
            except GeomatchError as exc:
                rows.append(
                    AblationRow(
                        config=label,
                        seed=int(seed),
                        pck=float("nan"),
                        runtime_s=time.perf_counter() - start,
                        error=str(exc),
                    )
                )
    return AblationReport(rows=tuple(rows), alpha=alpha)


def write_ablation_report(report: AblationReport, out_dir) -> dict[str, Path]:
    """Emit ablation.csv (summary) and ablation.json (full detail)."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    order = report.sorted_configs()
    csv_path = root / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "seed", "pck", "runtime_s"])
        for label in order:
            for row in report.rows:
                if row.config == label:
                    writer.writerow(
                        [row.config, row.seed, f"{row.pck:.6f}", f"{row.runtime_s:.3f}"]
                    )
    json_path = root / "ablation.json"

    def _num(v: float):
        return None if math.isnan(v) else v

    detail = {
        "alpha": report.alpha,
        "medians": {k: _num(v) for k, v in report.medians().items()},
        "config_order": order,
        "rows": [
            {
                "config": r.config,
                "seed": r.seed,
                "pck": _num(r.pck),
                "runtime_s": r.runtime_s,
                "error": r.error,
                "per_sample": list(r.per_sample),
            }
            for r in report.rows
        ],
    }
    json_path.write_text(json.dumps(detail, indent=2, sort_keys=True) + "\n")
    return {"csv": csv_path, "json": json_path}
