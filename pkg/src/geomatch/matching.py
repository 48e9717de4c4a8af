"""Dense descriptor correlation volumes.

Given feature maps A and B of shape (h, w, d), the correlation map has shape
(h, w, h*w): entry (i, j, k) scores the descriptor of B at cell (i, j)
against the descriptor of A at flat index k, where k = j_k * h + i_k
(column-major over A's cells, zero-based).

Two scores are provided: plain cosine similarity and Pearson correlation,
which additionally centres each descriptor by the mean of its own channels
and is therefore invariant to per-descriptor shifts and positive rescaling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, DegenerateDescriptorError

NORM_EPS = 1e-12  # strict-mode degeneracy thresholds
VAR_EPS = 1e-12


@dataclass(frozen=True)
class FeatureMap:
    """Dense descriptor field, row-major channel-last, d >= 2."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError(f"feature map must be (h, w, d); got {arr.shape}")
        if arr.shape[2] < 2:
            raise ValueError("feature maps need d >= 2 channels")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature map values must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def d(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class CorrelationMap:
    """Match-score volume of shape (h, w, h*w) with scores in [-1, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != arr.shape[0] * arr.shape[1]:
            raise ValueError(f"correlation map must be (h, w, h*w); got {arr.shape}")
        object.__setattr__(self, "data", arr)

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def k_dim(self) -> int:
        return self.data.shape[2]


def correlation_torch(
    fa: torch.Tensor, fb: torch.Tensor, kind: str, eps: float = 0.0
) -> torch.Tensor:
    """Correlation volume core; supports a leading batch dimension.

    fa, fb: (..., h, w, d) -> (..., h, w, h*w).  ``eps`` smooths the
    denominator (sqrt(sumsq + eps^2)) so the training path stays finite on
    degenerate descriptors; the strict public API passes 0.
    """
    h, w, d = fa.shape[-3:]
    batch = fa.shape[:-3]
    # A's cells flattened column-major: k = j * h + i.
    fa_flat = fa.transpose(-3, -2).reshape(*batch, w * h, d)
    fb_flat = fb.reshape(*batch, h * w, d)
    if kind == "pearson":
        fa_flat = fa_flat - fa_flat.mean(dim=-1, keepdim=True)
        fb_flat = fb_flat - fb_flat.mean(dim=-1, keepdim=True)
    elif kind != "cosine":
        raise ValueError(f"unknown correlation kind {kind!r}")
    num = fb_flat @ fa_flat.transpose(-2, -1)  # (..., h*w, h*w)
    if eps > 0:
        na = torch.sqrt((fa_flat**2).sum(-1) + eps * eps)
        nb = torch.sqrt((fb_flat**2).sum(-1) + eps * eps)
    else:
        na = torch.linalg.vector_norm(fa_flat, dim=-1)
        nb = torch.linalg.vector_norm(fb_flat, dim=-1)
    scores = num / (nb.unsqueeze(-1) * na.unsqueeze(-2))
    return scores.reshape(*batch, h, w, h * w)


def _check_pair(fa: FeatureMap, fb: FeatureMap) -> None:
    if fa.data.shape != fb.data.shape:
        raise ValueError(
            f"feature maps must share (h, w, d); got {fa.data.shape} vs {fb.data.shape}"
        )


def _first_failing_cell(mask: np.ndarray) -> tuple[int, int]:
    idx = int(np.argmax(mask))
    return idx // mask.shape[1], idx % mask.shape[1]


def cosine_correlation(fa: FeatureMap, fb: FeatureMap) -> CorrelationMap:
    """Cosine similarity of every B descriptor against every A descriptor."""
    _check_pair(fa, fb)
    for name, fm in (("A", fa), ("B", fb)):
        norms = np.linalg.norm(fm.data, axis=2)
        bad = norms <= NORM_EPS
        if np.any(bad):
            i, j = _first_failing_cell(bad)
            raise DegenerateDescriptorError(name, i, j, f"norm {norms[i, j]:.3e} ~ 0")
    out = correlation_torch(torch.from_numpy(fa.data), torch.from_numpy(fb.data), "cosine")
    return CorrelationMap(out.numpy())


def pearson_correlation(fa: FeatureMap, fb: FeatureMap) -> CorrelationMap:
    """Pearson correlation of descriptor pairs (per-descriptor channel means)."""
    _check_pair(fa, fb)
    for name, fm in (("A", fa), ("B", fb)):
        var = np.var(fm.data, axis=2)
        bad = var < VAR_EPS
        if np.any(bad):
            i, j = _first_failing_cell(bad)
            raise DegenerateDescriptorError(name, i, j, f"variance {var[i, j]:.3e} ~ 0")
    out = correlation_torch(torch.from_numpy(fa.data), torch.from_numpy(fb.data), "pearson")
    return CorrelationMap(out.numpy())


def correlate(fa: FeatureMap, fb: FeatureMap, kind: str) -> CorrelationMap:
    if kind == "pearson":
        return pearson_correlation(fa, fb)
    if kind == "cosine":
        return cosine_correlation(fa, fb)
    raise ValueError(f"unknown correlation kind {kind!r}")


# ---------------------------------------------------------------------------
# FeatureMap binary interchange: <name>.f32 blob + <name>.json sidecar
# ---------------------------------------------------------------------------


def save_feature_map(fm: FeatureMap, blob_path) -> None:
    """Write a little-endian float32 blob with a JSON shape sidecar."""
    p = Path(blob_path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_bytes(fm.data.astype("<f4").tobytes())
    sidecar = {"h": fm.h, "w": fm.w, "d": fm.d, "order": "row-major-channel-last"}
    p.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True) + "\n")


def load_feature_map(blob_path) -> FeatureMap:
    p = Path(blob_path)
    sidecar_path = p.with_suffix(".json")
    if not p.exists():
        raise DataError(f"feature blob not found: {p}")
    if not sidecar_path.exists():
        raise DataError(f"feature sidecar not found: {sidecar_path}")
    try:
        meta = json.loads(sidecar_path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed sidecar {sidecar_path}: {exc}") from exc
    for key in ("h", "w", "d"):
        if key not in meta:
            raise DataError(f"sidecar {sidecar_path} missing field {key!r}")
    if meta.get("order") != "row-major-channel-last":
        raise DataError(f"unsupported layout {meta.get('order')!r}")
    raw = np.frombuffer(p.read_bytes(), dtype="<f4")
    shape = (meta["h"], meta["w"], meta["d"])
    if raw.size != int(np.prod(shape)):
        raise DataError(
            f"blob {p} holds {raw.size} floats, sidecar promises {int(np.prod(shape))}"
        )
    return FeatureMap(raw.reshape(shape).astype(np.float64))
