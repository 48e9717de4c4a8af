"""Synthetic training data: toy images and corner-perturbation homographies.

Each sample pairs a source image with a warped copy and the exact homography
between them: the four image corners are displaced by independent uniform
offsets bounded by the perturbation fraction, the homography is fitted
through the corner correspondences, and the warped image is rendered by
inverse mapping.  Per-sample RNG streams are derived from (seed, sample id)
so results do not depend on generation order.

Dataset layout on disk:

    manifest.jsonl          one JSON record per sample
    images/src_<id>.png     source image
    images/warp_<id>.png    warped image
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import DataError, DegenerateCornersError, GenerationError, NumericalError
from .geometry import (
    TransformParams,
    cross2,
    fit_homography_dlt,
    homography_denominators,
    invert_params,
    make_grid,
)
from .warp import Image, load_image, save_image, warp_image

# Normalized image corners in loop order (TL, TR, BR, BL).
CORNERS = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])

MANIFEST_NAME = "manifest.jsonl"
_MAX_DRAWS = 100
_SINGULARITY_GRID = make_grid(20)
_MIN_GRID_DENOMINATOR = 1e-3


@dataclass(frozen=True)
class GenConfig:
    """Corner-perturbation dataset parameters."""

    count: int
    image_size: int = 64
    max_perturb_frac: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.max_perturb_frac <= 0.5:
            raise ValueError("max_perturb_frac must lie in (0, 0.5]")
        if self.count < 0:
            raise ValueError("count must be non-negative")
        if self.image_size < 16:
            raise ValueError("image_size must be >= 16")
        if self.seed < 0:
            raise ValueError("seed must be a non-negative integer")


@dataclass(frozen=True)
class HomographySample:
    """(source, ground-truth homography, warped) training triple."""

    sample_id: int
    source: Image
    warped: Image
    h_gt: TransformParams
    corners_src: np.ndarray
    corners_dst: np.ndarray


def sample_rng(seed: int, sample_id: int) -> np.random.Generator:
    """Independent per-sample stream; stable under reordering/parallelism."""
    return np.random.default_rng(np.random.SeedSequence([seed, sample_id]))


# ---------------------------------------------------------------------------
# Toy imagery
# ---------------------------------------------------------------------------


def _smooth_edge(dist: np.ndarray, pixel: float) -> np.ndarray:
    """Coverage alpha for a signed distance (negative = inside), 1px feather."""
    return np.clip(0.5 - dist / pixel, 0.0, 1.0)


def gen_toy_image(rng: np.random.Generator, size: int) -> Image:
    """Deterministic RGB image: wavy background plus 3-8 soft primitives."""
    if size < 16:
        raise ValueError("size must be >= 16")
    coords = np.linspace(-1.0, 1.0, size)
    xx, yy = np.meshgrid(coords, coords)
    pixel = 2.0 / (size - 1)

    img = np.empty((size, size, 3))
    img[:] = rng.uniform(0.25, 0.75, size=3)
    for _ in range(int(rng.integers(2, 5))):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        freq = 2.0 * np.pi / rng.uniform(0.4, 2.0)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        amp = rng.uniform(0.04, 0.12)
        chan = rng.uniform(0.3, 1.0, size=3)
        wave = np.sin(freq * (np.cos(angle) * xx + np.sin(angle) * yy) + phase)
        img += amp * wave[:, :, None] * chan

    for _ in range(int(rng.integers(3, 9))):
        shape = rng.integers(0, 3)
        color = rng.uniform(0.0, 1.0, size=3)
        if shape == 0:  # rotated rectangle
            center = rng.uniform(-0.6, 0.6, size=2)
            half = rng.uniform(0.08, 0.35, size=2)
            theta = rng.uniform(0.0, np.pi)
            c, s = np.cos(theta), np.sin(theta)
            rx = c * (xx - center[0]) + s * (yy - center[1])
            ry = -s * (xx - center[0]) + c * (yy - center[1])
            qx = np.abs(rx) - half[0]
            qy = np.abs(ry) - half[1]
            dist = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0)) + np.minimum(
                np.maximum(qx, qy), 0.0
            )
        elif shape == 1:  # ellipse (approximate signed distance)
            center = rng.uniform(-0.6, 0.6, size=2)
            radii = rng.uniform(0.08, 0.35, size=2)
            k = np.hypot((xx - center[0]) / radii[0], (yy - center[1]) / radii[1])
            dist = (k - 1.0) * radii.min()
        else:  # line segment with thickness (capsule)
            a = rng.uniform(-0.8, 0.8, size=2)
            b = rng.uniform(-0.8, 0.8, size=2)
            thickness = rng.uniform(0.02, 0.07)
            ab = b - a
            denom = max(float(ab @ ab), 1e-12)
            t = np.clip(((xx - a[0]) * ab[0] + (yy - a[1]) * ab[1]) / denom, 0.0, 1.0)
            dist = np.hypot(xx - (a[0] + t * ab[0]), yy - (a[1] + t * ab[1])) - thickness
        alpha = _smooth_edge(dist, pixel)[:, :, None]
        img = img * (1.0 - alpha) + color * alpha

    return Image(np.clip(img, 0.0, 1.0))


# ---------------------------------------------------------------------------
# Corner perturbation and sample assembly
# ---------------------------------------------------------------------------


def quad_is_convex(quad: np.ndarray, tol: float = 1e-12) -> bool:
    """Strict convexity of a 4-point loop via consistent edge cross products."""
    crosses = []
    for i in range(4):
        e1 = quad[(i + 1) % 4] - quad[i]
        e2 = quad[(i + 2) % 4] - quad[(i + 1) % 4]
        crosses.append(cross2(e1, e2))
    crosses = np.asarray(crosses)
    return bool(np.all(crosses > tol) or np.all(crosses < -tol))


def perturb_corners(
    rng: np.random.Generator, max_perturb_frac: float
) -> tuple[np.ndarray, np.ndarray]:
    """Displace each corner by uniform offsets within the perturbation bound.

    The full image extent is 2 in normalized units, so a fraction f allows
    per-component offsets in [-2f, 2f].  Non-convex draws are rejected.
    """
    bound = 2.0 * max_perturb_frac
    for _ in range(_MAX_DRAWS):
        offsets = rng.uniform(-bound, bound, size=(4, 2))
        dst = CORNERS + offsets
        if quad_is_convex(dst):
            return CORNERS.copy(), dst
    raise GenerationError(
        f"no convex corner perturbation found in {_MAX_DRAWS} draws "
        f"(max_perturb_frac={max_perturb_frac})"
    )


def make_sample(img: Image, rng: np.random.Generator, cfg: GenConfig, sample_id: int = 0) -> HomographySample:
    """Draw corners, fit the exact homography and render the warped image.

    Draws are rejected (and retried) on degenerate corner fits or when the
    homography's projective denominator dips below 1e-3 anywhere on the
    20x20 evaluation grid.
    """
    for _ in range(_MAX_DRAWS):
        src, dst = perturb_corners(rng, cfg.max_perturb_frac)
        try:
            h_gt = fit_homography_dlt(src, dst)
        except DegenerateCornersError:
            continue
        den = homography_denominators(h_gt, _SINGULARITY_GRID.points)
        if np.min(np.abs(den)) <= _MIN_GRID_DENOMINATOR:
            continue
        try:
            h_inv = invert_params(h_gt)
        except NumericalError:
            continue
        warped = warp_image(img, h_inv, img.height, img.width)
        return HomographySample(
            sample_id=sample_id,
            source=img,
            warped=warped,
            h_gt=h_gt,
            corners_src=src,
            corners_dst=dst,
        )
    raise GenerationError(f"no usable homography sample in {_MAX_DRAWS} draws")


# ---------------------------------------------------------------------------
# Dataset I/O
# ---------------------------------------------------------------------------


def _fmt(x: float) -> str:
    # 17 significant digits: lossless float64 round trip.
    return format(float(x), ".17g")


def _fmt_points(pts: np.ndarray) -> str:
    return ", ".join(f"[{_fmt(x)}, {_fmt(y)}]" for x, y in pts)


def _manifest_line(sample: HomographySample, src_rel: str, warp_rel: str) -> str:
    return (
        f'{{"id": {sample.sample_id}, "source": "{src_rel}", "warped": "{warp_rel}", '
        f'"h": [{", ".join(_fmt(v) for v in sample.h_gt.values)}], '
        f'"corners_src": [{_fmt_points(sample.corners_src)}], '
        f'"corners_dst": [{_fmt_points(sample.corners_dst)}]}}'
    )


def write_dataset(samples: Iterable[HomographySample], out_dir) -> int:
    """Write PNG pairs plus a JSON Lines manifest; returns the sample count."""
    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    count = 0
    with open(root / MANIFEST_NAME, "w") as fh:
        for sample in samples:
            src_rel = f"images/src_{sample.sample_id:05d}.png"
            warp_rel = f"images/warp_{sample.sample_id:05d}.png"
            save_image(sample.source, root / src_rel)
            save_image(sample.warped, root / warp_rel)
            fh.write(_manifest_line(sample, src_rel, warp_rel) + "\n")
            count += 1
    return count


def _parse_record(record: dict, lineno: int, root: Path) -> HomographySample:
    for key in ("id", "source", "warped", "h", "corners_src", "corners_dst"):
        if key not in record:
            raise DataError(f"manifest line {lineno}: missing field {key!r}")
    h = record["h"]
    if not isinstance(h, list) or len(h) != 9:
        raise DataError(
            f"manifest line {lineno}: 'h' must hold 9 numbers, got {len(h) if isinstance(h, list) else type(h).__name__}"
        )
    corners_src = np.asarray(record["corners_src"], dtype=np.float64)
    corners_dst = np.asarray(record["corners_dst"], dtype=np.float64)
    if corners_src.shape != (4, 2) or corners_dst.shape != (4, 2):
        raise DataError(f"manifest line {lineno}: corners must be 4 [x, y] pairs")
    return HomographySample(
        sample_id=int(record["id"]),
        source=load_image(root / record["source"]),
        warped=load_image(root / record["warped"]),
        h_gt=TransformParams.homography(np.asarray(h, dtype=np.float64)),
        corners_src=corners_src,
        corners_dst=corners_dst,
    )


def iter_dataset(data_dir) -> Iterator[HomographySample]:
    """Stream samples from a dataset directory (missing manifest = empty)."""
    root = Path(data_dir)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        return
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"manifest line {lineno}: malformed JSON ({exc.msg})") from exc
            yield _parse_record(record, lineno, root)


def read_dataset(data_dir) -> list[HomographySample]:
    return list(iter_dataset(data_dir))


# ---------------------------------------------------------------------------
# Corpus / dataset orchestration (used by the CLI)
# ---------------------------------------------------------------------------


def generate_corpus(out_dir, count: int, size: int, seed: int) -> list[Path]:
    """Write ``count`` toy PNGs, each from its own (seed, index) RNG stream."""
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(count):
        img = gen_toy_image(sample_rng(seed, i), size)
        path = root / f"img_{i:05d}.png"
        save_image(img, path)
        paths.append(path)
    return paths


def list_corpus(corpus_dir) -> list[Path]:
    root = Path(corpus_dir)
    if not root.is_dir():
        raise DataError(f"corpus directory not found: {root}")
    paths = sorted(root.glob("*.png"))
    if not paths:
        raise DataError(f"corpus directory holds no PNG images: {root}")
    return paths


def generate_dataset(corpus_dir, out_dir, cfg: GenConfig) -> int:
    """Cycle corpus images through make_sample and write the dataset."""
    paths = list_corpus(corpus_dir)

    def produce() -> Iterator[HomographySample]:
        for i in range(cfg.count):
            img = load_image(paths[i % len(paths)])
            if img.height != cfg.image_size or img.width != cfg.image_size:
                raise DataError(
                    f"corpus image {paths[i % len(paths)].name} is "
                    f"{img.width}x{img.height}, expected {cfg.image_size}"
                )
            yield make_sample(img, sample_rng(cfg.seed, i), cfg, sample_id=i)

    return write_dataset(produce(), out_dir)
