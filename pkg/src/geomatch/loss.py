"""Training objectives over transformed point grids.

* ``grid_loss``           mean squared Euclidean deviation between the two
                          transforms' images of a fixed grid
* ``weighted_grid_loss``  the same deviations under per-point Gaussian
                          weights, summed (no 1/N), with points far from the
                          weight centre cut to exactly zero
* ``param_mse_loss``      mean squared difference of canonical parameter
                          vectors (ablation baseline)

All three are differentiable with respect to the estimated parameters; the
torch cores accept batched parameter tensors and are reused by the trainer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import DegenerateObjectiveError
from .geometry import (
    H9_EPS,
    Grid,
    TransformKind,
    TransformParams,
    map_points_torch,
)


@dataclass(frozen=True)
class GaussianWeightConfig:
    """Width, cutoff and centre of the per-grid-point weighting."""

    sigma: float = 1.0
    gamma: float = 0.5
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


def gaussian_weights(grid: Grid, cfg: GaussianWeightConfig) -> np.ndarray:
    """w_i = exp(-((x_i-x_c)^2 + (y_i-y_c)^2) / (2 sigma^2)), zeroed below gamma."""
    d2 = np.sum((grid.points - np.asarray(cfg.center)) ** 2, axis=1)
    w = np.exp(-d2 / (2.0 * cfg.sigma**2))
    w[w < cfg.gamma] = 0.0
    return w


# ---------------------------------------------------------------------------
# Torch cores (batched over leading parameter dims)
# ---------------------------------------------------------------------------


def grid_loss_torch(
    kind_hat: TransformKind,
    vals_hat: torch.Tensor,
    kind_gt: TransformKind,
    vals_gt: torch.Tensor,
    pts: torch.Tensor,
) -> torch.Tensor:
    a = map_points_torch(kind_hat, vals_hat, pts, clamp_denominator=True)
    b = map_points_torch(kind_gt, vals_gt, pts, clamp_denominator=True)
    return ((a - b) ** 2).sum(-1).mean(-1)


def weighted_grid_loss_torch(
    kind_hat: TransformKind,
    vals_hat: torch.Tensor,
    kind_gt: TransformKind,
    vals_gt: torch.Tensor,
    pts: torch.Tensor,
    weights: torch.Tensor,
    normalize_weights: bool = False,
) -> torch.Tensor:
    a = map_points_torch(kind_hat, vals_hat, pts, clamp_denominator=True)
    b = map_points_torch(kind_gt, vals_gt, pts, clamp_denominator=True)
    total = (((a - b) ** 2).sum(-1) * weights).sum(-1)
    if normalize_weights:
        total = total / weights.sum()
    return total


def canonical_homography_torch(values: torch.Tensor) -> torch.Tensor:
    """Differentiable h9=1 canonicalization with Frobenius fallback."""
    h9 = values[..., 8:9]
    use_h9 = h9.abs() > H9_EPS
    safe = torch.where(use_h9, h9, torch.ones_like(h9))
    by_h9 = values / safe
    norm = torch.linalg.vector_norm(values, dim=-1, keepdim=True)
    sign = torch.where(h9 >= 0, torch.ones_like(h9), -torch.ones_like(h9))
    by_fro = values * (3.0 / norm) * sign
    return torch.where(use_h9, by_h9, by_fro)


def param_mse_torch(
    kind: TransformKind, vals_hat: torch.Tensor, vals_gt: torch.Tensor
) -> torch.Tensor:
    if kind is TransformKind.HOMOGRAPHY:
        vals_hat = canonical_homography_torch(vals_hat)
        vals_gt = canonical_homography_torch(vals_gt)
    return ((vals_hat - vals_gt) ** 2).mean(-1)


# ---------------------------------------------------------------------------
# Public scalar API
# ---------------------------------------------------------------------------


def grid_loss(theta_hat: TransformParams, theta_gt: TransformParams, grid: Grid) -> float:
    """(1/N) sum of squared distances between the two transformed grids."""
    pts = torch.from_numpy(grid.points)
    out = grid_loss_torch(
        theta_hat.kind,
        torch.from_numpy(theta_hat.values),
        theta_gt.kind,
        torch.from_numpy(theta_gt.values),
        pts,
    )
    return float(out)


def weighted_grid_loss(
    theta_hat: TransformParams,
    theta_gt: TransformParams,
    grid: Grid,
    weights: np.ndarray,
    normalize_weights: bool = False,
) -> float:
    """sum_i w_i * d(T_hat(g_i), T_gt(g_i))^2 (optionally divided by sum w)."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    if w.shape != (len(grid.points),):
        raise ValueError(
            f"weights length {w.shape} does not match grid of {len(grid.points)} points"
        )
    if np.any(w < 0):
        raise ValueError("weights must be non-negative")
    if not np.any(w > 0):
        raise DegenerateObjectiveError("all grid weights are zero")
    out = weighted_grid_loss_torch(
        theta_hat.kind,
        torch.from_numpy(theta_hat.values),
        theta_gt.kind,
        torch.from_numpy(theta_gt.values),
        torch.from_numpy(grid.points),
        torch.from_numpy(w),
        normalize_weights=normalize_weights,
    )
    return float(out)


def param_mse_loss(theta_hat: TransformParams, theta_gt: TransformParams) -> float:
    """Mean squared parameter difference after canonicalization."""
    if theta_hat.kind is not theta_gt.kind:
        raise ValueError(
            f"parameter MSE needs matching kinds; got {theta_hat.kind.value} vs "
            f"{theta_gt.kind.value}"
        )
    out = param_mse_torch(
        theta_hat.kind,
        torch.from_numpy(theta_hat.values),
        torch.from_numpy(theta_gt.values),
    )
    return float(out)


# ---------------------------------------------------------------------------
# Analytic gradients with respect to theta_hat
# ---------------------------------------------------------------------------


def _grad(fn, theta_hat: TransformParams) -> np.ndarray:
    v = torch.from_numpy(theta_hat.values.copy()).requires_grad_(True)
    fn(v).backward()
    return v.grad.numpy()


def grid_loss_grad(
    theta_hat: TransformParams, theta_gt: TransformParams, grid: Grid
) -> np.ndarray:
    pts = torch.from_numpy(grid.points)
    gt = torch.from_numpy(theta_gt.values)
    return _grad(
        lambda v: grid_loss_torch(theta_hat.kind, v, theta_gt.kind, gt, pts), theta_hat
    )


def weighted_grid_loss_grad(
    theta_hat: TransformParams,
    theta_gt: TransformParams,
    grid: Grid,
    weights: np.ndarray,
    normalize_weights: bool = False,
) -> np.ndarray:
    pts = torch.from_numpy(grid.points)
    gt = torch.from_numpy(theta_gt.values)
    w = torch.from_numpy(np.asarray(weights, dtype=np.float64))
    return _grad(
        lambda v: weighted_grid_loss_torch(
            theta_hat.kind, v, theta_gt.kind, gt, pts, w, normalize_weights
        ),
        theta_hat,
    )


def param_mse_loss_grad(theta_hat: TransformParams, theta_gt: TransformParams) -> np.ndarray:
    gt = torch.from_numpy(theta_gt.values)
    return _grad(lambda v: param_mse_torch(theta_hat.kind, v, gt), theta_hat)
