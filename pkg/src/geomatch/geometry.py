"""Parametric 2-D transforms over normalized [-1,1] coordinates.

Three families share one flat-vector parametrization:

* affine      -- 6 values (a11, a12, tx, a21, a22, ty), row-major 2x3 matrix
* homography  -- 9 values (h1..h9), row-major 3x3 matrix; the overall scale is
                 free, so the last entry is an arbitrary real number
* tps         -- 18 values: x-offsets then y-offsets of a fixed 3x3 control
                 lattice on [-1,1]^2, interpolated with the radial kernel
                 U(r) = r^2 log r^2

Points are float64 arrays of shape (N, 2).  The point-mapping core is written
in torch so gradients with respect to the parameter vector are available to
the training stack; the public API converts at the edges and stays numpy.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch

from .errors import (
    DegenerateCornersError,
    H9NearZeroError,
    NumericalError,
    ProjectiveSingularityError,
)

# Guard for the projective division w' = h7*x + h8*y + h9.
PROJECTIVE_EPS = 1e-8
# Below this |h9| the h9=1 rescaling is numerically meaningless.
H9_EPS = 1e-6

TPS_CONTROL_N = 9  # fixed 3x3 lattice


class TransformKind(enum.Enum):
    AFFINE = "affine"
    HOMOGRAPHY = "homography"
    TPS = "tps"


PARAM_COUNT = {
    TransformKind.AFFINE: 6,
    TransformKind.HOMOGRAPHY: 9,
    TransformKind.TPS: 2 * TPS_CONTROL_N,
}

_IDENTITY_VALUES = {
    TransformKind.AFFINE: np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
    TransformKind.HOMOGRAPHY: np.eye(3).ravel(),
    TransformKind.TPS: np.zeros(2 * TPS_CONTROL_N),
}


def cross2(a, b) -> np.ndarray:
    """z-component of the cross product of 2-D vectors (broadcasting)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]


def as_points(pts) -> np.ndarray:
    """Coerce to a float64 (N, 2) array and reject non-finite input."""
    arr = np.asarray(pts, dtype=np.float64)
    if arr.ndim == 1 and arr.shape == (2,):
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError(f"points must have shape (N, 2); got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("points must be finite")
    return arr


@dataclass(frozen=True)
class TransformParams:
    """A transform family tag plus its flat parameter vector."""

    kind: TransformKind
    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        object.__setattr__(self, "values", vals)
        expected = PARAM_COUNT[self.kind]
        if vals.shape != (expected,):
            raise ValueError(
                f"{self.kind.value} transform needs {expected} values; got {vals.shape}"
            )
        if not np.all(np.isfinite(vals)):
            raise ValueError("transform parameters must be finite")
        if self.kind is TransformKind.HOMOGRAPHY and np.linalg.norm(vals) == 0.0:
            raise ValueError("homography parameter vector must be nonzero")

    @staticmethod
    def identity(kind: TransformKind) -> "TransformParams":
        return TransformParams(kind, _IDENTITY_VALUES[kind].copy())

    @staticmethod
    def affine(values) -> "TransformParams":
        return TransformParams(TransformKind.AFFINE, values)

    @staticmethod
    def homography(values) -> "TransformParams":
        return TransformParams(TransformKind.HOMOGRAPHY, values)

    @staticmethod
    def tps(values) -> "TransformParams":
        return TransformParams(TransformKind.TPS, values)


@dataclass(frozen=True)
class Grid:
    """Row-major lattice of evaluation points in [-1,1]^2 (x varies fastest)."""

    points: np.ndarray
    n_per_axis: int

    def __post_init__(self):
        pts = as_points(self.points)
        object.__setattr__(self, "points", pts)
        if len(pts) != self.n_per_axis**2:
            raise ValueError("grid must hold n_per_axis^2 points")


def make_grid(n_per_axis: int) -> Grid:
    """Evenly spaced n x n grid spanning [-1,1] inclusive of the endpoints."""
    if n_per_axis < 2:
        raise ValueError("n_per_axis must be >= 2")
    coords = np.linspace(-1.0, 1.0, n_per_axis)
    xx, yy = np.meshgrid(coords, coords)  # rows = y, columns = x
    return Grid(np.stack([xx.ravel(), yy.ravel()], axis=1), n_per_axis)


# ---------------------------------------------------------------------------
# Thin-plate spline basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TpsBasis:
    """Fixed control lattice plus the precomputed interpolation solve.

    ``solve_matrix`` maps K control-point target values to the K radial
    weights followed by the 3 affine coefficients (a0, ax, ay).
    """

    control_points: np.ndarray  # (K, 2)
    solve_matrix: np.ndarray  # (K + 3, K)


def _tps_kernel_np(r2: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r2)
    mask = r2 > 0
    out[mask] = r2[mask] * np.log(r2[mask])
    return out


def _build_tps_basis() -> TpsBasis:
    ctrl = make_grid(3).points
    diff = ctrl[:, None, :] - ctrl[None, :, :]
    k_mat = _tps_kernel_np(np.sum(diff**2, axis=2))
    p_mat = np.concatenate([np.ones((TPS_CONTROL_N, 1)), ctrl], axis=1)
    l_mat = np.zeros((TPS_CONTROL_N + 3, TPS_CONTROL_N + 3))
    l_mat[:TPS_CONTROL_N, :TPS_CONTROL_N] = k_mat
    l_mat[:TPS_CONTROL_N, TPS_CONTROL_N:] = p_mat
    l_mat[TPS_CONTROL_N:, :TPS_CONTROL_N] = p_mat.T
    if abs(np.linalg.det(l_mat)) < 1e-12:
        raise NumericalError("TPS control lattice produced a singular kernel system")
    solve = np.linalg.inv(l_mat)[:, :TPS_CONTROL_N]
    return TpsBasis(control_points=ctrl, solve_matrix=solve)


TPS_BASIS = _build_tps_basis()

_TPS_TORCH_CACHE: dict[torch.dtype, tuple[torch.Tensor, torch.Tensor]] = {}


def _tps_constants(dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    if dtype not in _TPS_TORCH_CACHE:
        _TPS_TORCH_CACHE[dtype] = (
            torch.from_numpy(TPS_BASIS.control_points).to(dtype),
            torch.from_numpy(TPS_BASIS.solve_matrix).to(dtype),
        )
    return _TPS_TORCH_CACHE[dtype]


# ---------------------------------------------------------------------------
# Torch point-mapping core (batched over leading parameter dimensions)
# ---------------------------------------------------------------------------


def _tps_eval_basis(pts: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """Per-point row [U(r_1)..U(r_K), 1, x, y] of shape (N, K + 3)."""
    ctrl, _ = _tps_constants(dtype)
    diff = pts[:, None, :] - ctrl[None, :, :]
    r2 = (diff**2).sum(-1)
    safe = torch.where(r2 > 0, r2, torch.ones_like(r2))
    u = torch.where(r2 > 0, r2 * torch.log(safe), torch.zeros_like(r2))
    ones = torch.ones(pts.shape[0], 1, dtype=dtype)
    return torch.cat([u, ones, pts], dim=1)


def map_points_torch(
    kind: TransformKind,
    values: torch.Tensor,
    pts: torch.Tensor,
    clamp_denominator: bool = True,
) -> torch.Tensor:
    """Apply the transform; ``values`` may carry leading batch dimensions.

    values: (..., P); pts: (N, 2) -> (..., N, 2).  The homography branch
    clamps |w'| to PROJECTIVE_EPS when asked, keeping the map (and its
    gradient) finite near the projective horizon.
    """
    x, y = pts[:, 0], pts[:, 1]
    v = values
    if kind is TransformKind.AFFINE:
        out_x = v[..., 0:1] * x + v[..., 1:2] * y + v[..., 2:3]
        out_y = v[..., 3:4] * x + v[..., 4:5] * y + v[..., 5:6]
        return torch.stack([out_x, out_y], dim=-1)
    if kind is TransformKind.HOMOGRAPHY:
        num_x = v[..., 0:1] * x + v[..., 1:2] * y + v[..., 2:3]
        num_y = v[..., 3:4] * x + v[..., 4:5] * y + v[..., 5:6]
        den = v[..., 6:7] * x + v[..., 7:8] * y + v[..., 8:9]
        if clamp_denominator:
            sign = torch.where(den >= 0, torch.ones_like(den), -torch.ones_like(den))
            den = sign * torch.clamp(den.abs(), min=PROJECTIVE_EPS)
        return torch.stack([num_x / den, num_y / den], dim=-1)
    if kind is TransformKind.TPS:
        basis = _tps_eval_basis(pts, values.dtype)  # (N, K+3)
        _, solve = _tps_constants(values.dtype)  # (K+3, K)
        vx = values[..., :TPS_CONTROL_N]
        vy = values[..., TPS_CONTROL_N:]
        coef_x = vx @ solve.T  # (..., K+3)
        coef_y = vy @ solve.T
        disp_x = coef_x @ basis.T  # (..., N)
        disp_y = coef_y @ basis.T
        return pts + torch.stack([disp_x, disp_y], dim=-1)
    raise ValueError(f"unknown transform kind {kind!r}")


def homography_denominators(t: TransformParams, pts: np.ndarray) -> np.ndarray:
    """w' = h7*x + h8*y + h9 for each point (homography only)."""
    v = t.values
    return v[6] * pts[:, 0] + v[7] * pts[:, 1] + v[8]


def map_points(t: TransformParams, pts) -> np.ndarray:
    """Apply ``t`` to points; raises on a vanishing projective denominator."""
    arr = as_points(pts)
    if t.kind is TransformKind.HOMOGRAPHY:
        den = homography_denominators(t, arr)
        bad = np.abs(den) < PROJECTIVE_EPS
        if np.any(bad):
            idx = int(np.argmax(bad))
            raise ProjectiveSingularityError(idx, arr[idx], den[idx])
    out = map_points_torch(
        t.kind, torch.from_numpy(t.values), torch.from_numpy(arr), clamp_denominator=True
    )
    return out.numpy()


def map_points_clamped(t: TransformParams, pts) -> np.ndarray:
    """Like :func:`map_points` but clamps near-singular denominators instead
    of raising (the convention used inside losses and image warping)."""
    arr = as_points(pts)
    out = map_points_torch(
        t.kind, torch.from_numpy(t.values), torch.from_numpy(arr), clamp_denominator=True
    )
    return out.numpy()


def map_points_jacobian(t: TransformParams, pts) -> np.ndarray:
    """d map_points / d values as an (N, 2, P) array."""
    arr = as_points(pts)
    pts_t = torch.from_numpy(arr)

    def f(v):
        return map_points_torch(t.kind, v, pts_t, clamp_denominator=True)

    jac = torch.autograd.functional.jacobian(f, torch.from_numpy(t.values))
    return jac.numpy()


# ---------------------------------------------------------------------------
# Matrix helpers, normalization, fitting
# ---------------------------------------------------------------------------


def as_matrix(t: TransformParams) -> np.ndarray:
    """3x3 homogeneous matrix for affine/homography transforms."""
    if t.kind is TransformKind.AFFINE:
        m = np.eye(3)
        m[:2, :] = t.values.reshape(2, 3)
        return m
    if t.kind is TransformKind.HOMOGRAPHY:
        return t.values.reshape(3, 3).copy()
    raise ValueError("TPS has no matrix form")


def normalize_homography(t: TransformParams, mode: str = "h9_one") -> TransformParams:
    """Rescale the 9 parameters to a canonical representative.

    ``h9_one``: scale so h9 == 1 (requires |h9| > 1e-6, otherwise raises
    :class:`H9NearZeroError`).  ``frobenius``: scale so the Frobenius norm is
    3 and h9 >= 0.
    """
    if t.kind is not TransformKind.HOMOGRAPHY:
        raise ValueError("normalize_homography expects a homography")
    v = t.values
    if mode == "h9_one":
        if abs(v[8]) <= H9_EPS:
            raise H9NearZeroError(f"|h9| = {abs(v[8]):.3e} too small for h9=1 rescaling")
        return TransformParams.homography(v / v[8])
    if mode == "frobenius":
        out = v * (3.0 / np.linalg.norm(v))
        if out[8] < 0:
            out = -out
        elif out[8] == 0:
            nz = out[np.nonzero(out)[0]]
            if len(nz) and nz[0] < 0:
                out = -out
        return TransformParams.homography(out)
    raise ValueError(f"unknown normalization mode {mode!r}")


def canonical_homography(t: TransformParams) -> TransformParams:
    """h9=1 canonical form with Frobenius fallback when h9 is near zero."""
    try:
        return normalize_homography(t, "h9_one")
    except H9NearZeroError:
        return normalize_homography(t, "frobenius")


def _collinear_triple(pts: np.ndarray, tol: float = 1e-9) -> bool:
    scale = max(np.ptp(pts[:, 0]), np.ptp(pts[:, 1]), 1e-30)
    for i in range(4):
        for j in range(i + 1, 4):
            for k in range(j + 1, 4):
                if abs(cross2(pts[j] - pts[i], pts[k] - pts[i])) < tol * scale**2:
                    return True
    return False


def fit_homography_dlt(src, dst) -> TransformParams:
    """Exact homography through 4 correspondences via the 8x9 null space.

    Returns the canonical representative; raises
    :class:`DegenerateCornersError` for collinear/rank-deficient input.
    """
    s = as_points(src)
    d = as_points(dst)
    if s.shape != (4, 2) or d.shape != (4, 2):
        raise ValueError("fit_homography_dlt expects exactly 4 source and 4 target points")
    if _collinear_triple(s):
        raise DegenerateCornersError("three source points are collinear")
    if _collinear_triple(d):
        raise DegenerateCornersError("three target points are collinear")

    a = np.zeros((8, 9))
    for i in range(4):
        x, y = s[i]
        u, v = d[i]
        a[2 * i, 0:3] = (x, y, 1.0)
        a[2 * i, 6:9] = (-u * x, -u * y, -u)
        a[2 * i + 1, 3:6] = (x, y, 1.0)
        a[2 * i + 1, 6:9] = (-v * x, -v * y, -v)
    _, sing, vt = np.linalg.svd(a)
    # The 8x9 system always has a null direction; a second vanishing singular
    # value means the null space is not unique (degenerate configuration).
    if sing[-1] < 1e-10 * max(sing[0], 1.0):
        raise DegenerateCornersError("DLT system is rank deficient (degenerate corners)")
    h = vt[-1]
    return canonical_homography(TransformParams.homography(h))


def invert_params(t: TransformParams) -> TransformParams:
    """Closed-form inverse for affine/homography transforms."""
    if t.kind is TransformKind.TPS:
        raise ValueError("TPS has no closed-form inverse; use preimage_points")
    m = as_matrix(t)
    det = np.linalg.det(m)
    if abs(det) < 1e-12:
        raise NumericalError(f"transform matrix is singular (det = {det:.3e})")
    inv = np.linalg.inv(m)
    if t.kind is TransformKind.AFFINE:
        return TransformParams.affine(inv[:2, :].ravel())
    return canonical_homography(TransformParams.homography(inv.ravel()))


def _tps_point_jacobian(t: TransformParams, pts: np.ndarray) -> np.ndarray:
    """d T(p) / d p for a TPS transform; shape (N, 2, 2)."""
    ctrl = TPS_BASIS.control_points
    solve = TPS_BASIS.solve_matrix
    coef_x = solve @ t.values[:TPS_CONTROL_N]  # (K+3,)
    coef_y = solve @ t.values[TPS_CONTROL_N:]
    diff = pts[:, None, :] - ctrl[None, :, :]  # (N, K, 2)
    r2 = np.sum(diff**2, axis=2)
    with np.errstate(divide="ignore"):
        g = np.where(r2 > 0, 2.0 * (np.log(np.where(r2 > 0, r2, 1.0)) + 1.0), 0.0)
    # dU/dp = 2 (log r^2 + 1) (p - c_k)
    du = g[:, :, None] * diff  # (N, K, 2)
    wx, wy = coef_x[:TPS_CONTROL_N], coef_y[:TPS_CONTROL_N]
    jac = np.zeros((len(pts), 2, 2))
    jac[:, 0, 0] = 1.0 + coef_x[TPS_CONTROL_N + 1] + du[:, :, 0] @ wx
    jac[:, 0, 1] = coef_x[TPS_CONTROL_N + 2] + du[:, :, 1] @ wx
    jac[:, 1, 0] = coef_y[TPS_CONTROL_N + 1] + du[:, :, 0] @ wy
    jac[:, 1, 1] = 1.0 + coef_y[TPS_CONTROL_N + 2] + du[:, :, 1] @ wy
    return jac


def preimage_points(t: TransformParams, pts, max_iter: int = 50, tol: float = 1e-10) -> np.ndarray:
    """Solve T(q) = p for q.

    Exact for affine/homography; damped Newton iteration (with the analytic
    point Jacobian) for TPS, which is ample for the mild warps produced by
    the regression stack.
    """
    arr = as_points(pts)
    if t.kind is not TransformKind.TPS:
        return map_points(invert_params(t), arr)
    q = arr.copy()
    for _ in range(max_iter):
        residual = map_points(t, q) - arr
        err = np.abs(residual).max()
        if err < tol:
            return q
        jac = _tps_point_jacobian(t, q)
        step = np.linalg.solve(jac, residual[..., None])[..., 0]
        q = q - step
    residual = np.abs(map_points(t, q) - arr).max()
    if residual > 1e-6:
        raise NumericalError(f"TPS preimage iteration stalled (residual {residual:.3e})")
    return q


def compose_apply(outer: TransformParams, inner: TransformParams, pts) -> np.ndarray:
    """outer(inner(pts)) -- sequential application of two transforms."""
    return map_points(outer, map_points(inner, pts))


def compose_params(outer: TransformParams, inner: TransformParams) -> TransformParams:
    """Single-matrix composition for affine/homography pairs."""
    if TransformKind.TPS in (outer.kind, inner.kind):
        raise ValueError("TPS compositions have no single-matrix form")
    m = as_matrix(outer) @ as_matrix(inner)
    if outer.kind is TransformKind.AFFINE and inner.kind is TransformKind.AFFINE:
        return TransformParams.affine(m[:2, :].ravel())
    return canonical_homography(TransformParams.homography(m.ravel()))
