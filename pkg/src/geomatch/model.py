"""Trainable matching pipeline: extractor -> correlation -> regressor.

The extractor is a small stack of stride-2 3x3 conv + ReLU stages shared
between both images.  The correlation volume of the two feature maps feeds a
one-conv + one-linear regressor whose output, plus a constant offset, is the
transform parameter vector.  The final linear layer starts at zero so the
untrained pipeline regresses the identity transform.

Training minimizes one of the grid losses (or parameter MSE) between the
regressed parameters and the stored ground truth with Adam; everything is
deterministic given the seed.  Checkpoints are a versioned binary container:
JSON header plus little-endian float32 tensor payload.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import DataError, TrainingDivergedError
from .geometry import TransformKind, TransformParams, compose_apply, invert_params, make_grid
from .loss import (
    GaussianWeightConfig,
    gaussian_weights,
    grid_loss_torch,
    param_mse_torch,
    weighted_grid_loss_torch,
)
from .matching import correlation_torch
from .warp import Image, warp_image

CHECKPOINT_MAGIC = b"GMCKPT01"
CHECKPOINT_VERSION = 1

MODE_FREE_PARAMS = {"affine": 6, "homo": 9, "homo8": 8, "tps": 18}
MODE_KIND = {
    "affine": TransformKind.AFFINE,
    "homo": TransformKind.HOMOGRAPHY,
    "homo8": TransformKind.HOMOGRAPHY,
    "tps": TransformKind.TPS,
}


def identity_offset(mode: str) -> np.ndarray:
    """Parameter vector of the identity transform in the given mode."""
    if mode == "affine":
        return np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], dtype=np.float64)
    if mode == "homo":
        return np.eye(3).ravel()
    if mode == "homo8":
        return np.eye(3).ravel()[:8]
    if mode == "tps":
        return np.zeros(18)
    raise ValueError(f"unknown transform mode {mode!r}")


@dataclass(frozen=True)
class ExtractorSpec:
    """Conv-stage widths (3x3 kernels, stride 2, ReLU) plus optional weights."""

    channels: tuple[int, ...] = (8, 16, 16)
    in_channels: int = 3
    weights: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if not self.channels or any(c < 1 for c in self.channels):
            raise ValueError("extractor needs at least one positive-width stage")

    def feature_hw(self, input_size: int) -> int:
        hw = input_size
        for _ in self.channels:
            hw = (hw + 1) // 2
        return hw


@dataclass(frozen=True)
class RegressorSpec:
    """Correlation-volume conv stage + linear head emitting the parameters."""

    mode: str = "homo"
    conv_channels: int = 32
    output_offset: np.ndarray | None = None
    weights: dict[str, np.ndarray] | None = None

    def __post_init__(self):
        if self.mode not in MODE_FREE_PARAMS:
            raise ValueError(f"unknown transform mode {self.mode!r}")
        offset = self.output_offset
        if offset is None:
            offset = identity_offset(self.mode)
        offset = np.asarray(offset, dtype=np.float64).ravel()
        if offset.shape != (MODE_FREE_PARAMS[self.mode],):
            raise ValueError(
                f"output offset for mode {self.mode!r} needs "
                f"{MODE_FREE_PARAMS[self.mode]} values; got {offset.shape}"
            )
        object.__setattr__(self, "output_offset", offset)

    @property
    def kind(self) -> TransformKind:
        return MODE_KIND[self.mode]

    @property
    def free_params(self) -> int:
        return MODE_FREE_PARAMS[self.mode]


@dataclass(frozen=True)
class TrainConfig:
    """Optimization and objective settings (Adam, mini-batch, fixed seed)."""

    loss: str = "weighted"  # weighted | grid | mse
    corr: str = "pearson"  # pearson | cosine
    lr: float = 1e-3
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    sigma: float = 1.0
    gamma: float = 0.5
    grid_n: int = 20
    normalize_weights: bool = False
    corr_eps: float = 1e-6

    def __post_init__(self):
        if self.loss not in ("weighted", "grid", "mse"):
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if self.corr not in ("pearson", "cosine"):
            raise ValueError(f"unknown correlation kind {self.corr!r}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")


@dataclass(frozen=True)
class ModelCheckpoint:
    """Trained weights plus the configs that produced them."""

    extractor: ExtractorSpec
    regressor: RegressorSpec
    train_config: TrainConfig
    input_size: int
    loss_trace: tuple[float, ...] = ()
    format_version: int = CHECKPOINT_VERSION
    oracle: bool = False


def make_oracle_checkpoint() -> ModelCheckpoint:
    """Evaluation fixture: predicts each sample's stored ground truth."""
    return ModelCheckpoint(
        extractor=ExtractorSpec(weights={}),
        regressor=RegressorSpec(mode="homo", weights={}),
        train_config=TrainConfig(),
        input_size=0,
        oracle=True,
    )


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


class PipelineNet(torch.nn.Module):
    """Siamese extractor + correlation + regressor, emitting full parameters."""

    def __init__(
        self,
        extractor: ExtractorSpec,
        regressor: RegressorSpec,
        input_size: int,
        corr_kind: str,
        corr_eps: float,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.extractor_spec = extractor
        self.regressor_spec = regressor
        self.input_size = int(input_size)
        self.corr_kind = corr_kind
        self.corr_eps = float(corr_eps)

        feat_hw = extractor.feature_hw(input_size)
        if feat_hw < 4:
            raise ValueError(
                f"extractor reduces {input_size}px input to {feat_hw}x{feat_hw}; "
                "need at least 4x4 feature cells"
            )
        self.feat_hw = feat_hw
        k_dim = feat_hw * feat_hw

        convs = []
        in_ch = extractor.in_channels
        for out_ch in extractor.channels:
            convs.append(torch.nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1))
            in_ch = out_ch
        self.extract = torch.nn.ModuleList(convs)

        self.reg_conv = torch.nn.Conv2d(k_dim, regressor.conv_channels, 3, stride=2, padding=1)
        reg_hw = (feat_hw + 1) // 2
        self.fc = torch.nn.Linear(reg_hw * reg_hw * regressor.conv_channels, regressor.free_params)
        self.register_buffer(
            "output_offset", torch.from_numpy(regressor.output_offset.copy()).to(dtype)
        )
        self.to(dtype)

    def features(self, img: torch.Tensor) -> torch.Tensor:
        out = img
        for conv in self.extract:
            out = torch.relu(conv(out))
        return out

    def forward(self, img_a: torch.Tensor, img_b: torch.Tensor) -> torch.Tensor:
        fa = self.features(img_a).permute(0, 2, 3, 1)  # (B, h, w, d)
        fb = self.features(img_b).permute(0, 2, 3, 1)
        corr = correlation_torch(fa, fb, self.corr_kind, eps=self.corr_eps)
        vol = corr.permute(0, 3, 1, 2)  # (B, h*w, h, w)
        hidden = torch.relu(self.reg_conv(vol))
        raw = self.fc(hidden.reshape(hidden.shape[0], -1))
        params = raw + self.output_offset
        if self.regressor_spec.mode == "homo8":
            ones = torch.ones(params.shape[0], 1, dtype=params.dtype)
            params = torch.cat([params, ones], dim=1)
        return params

    def label_kind(self) -> TransformKind:
        return self.regressor_spec.kind


def init_weights(net: PipelineNet, seed: int) -> None:
    """He-style init for conv stages, zeros for the final linear layer."""
    gen = torch.Generator().manual_seed(seed)
    dtype = net.fc.weight.dtype
    with torch.no_grad():
        for conv in list(net.extract) + [net.reg_conv]:
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            std = (2.0 / fan_in) ** 0.5
            conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen, dtype=dtype) * std)
            conv.bias.copy_(
                (torch.rand(conv.bias.shape, generator=gen, dtype=dtype) - 0.5) * 0.2
            )
        net.fc.weight.zero_()
        net.fc.bias.zero_()


def _split_weights(net: PipelineNet) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    ext, reg = {}, {}
    for name, tensor in net.state_dict().items():
        if name == "output_offset":
            continue
        arr = tensor.detach().cpu().numpy().astype(np.float32)
        (ext if name.startswith("extract.") else reg)[name] = arr
    return ext, reg


def build_net(ckpt: ModelCheckpoint, dtype: torch.dtype = torch.float32) -> PipelineNet:
    """Reconstruct the network from checkpointed weights (float32 exact)."""
    if ckpt.oracle:
        raise DataError("oracle checkpoint carries no network weights")
    if ckpt.extractor.weights is None or ckpt.regressor.weights is None:
        raise DataError("checkpoint is missing weight tensors")
    net = PipelineNet(
        ckpt.extractor,
        ckpt.regressor,
        ckpt.input_size,
        ckpt.train_config.corr,
        ckpt.train_config.corr_eps,
        dtype=dtype,
    )
    state = {}
    for name, arr in {**ckpt.extractor.weights, **ckpt.regressor.weights}.items():
        state[name] = torch.from_numpy(np.ascontiguousarray(arr)).to(dtype)
    state["output_offset"] = torch.from_numpy(ckpt.regressor.output_offset).to(dtype)
    net.load_state_dict(state)
    net.eval()
    return net


# ---------------------------------------------------------------------------
# Standalone forward ops
# ---------------------------------------------------------------------------


def _image_batch(images: Sequence[Image]) -> torch.Tensor:
    arrs = [np.transpose(img.data, (2, 0, 1)).astype(np.float32) for img in images]
    return torch.from_numpy(np.stack(arrs))


def extract_features(img: Image, spec: ExtractorSpec):
    """Run the conv stages alone; returns a FeatureMap (h, w, d)."""
    from .matching import FeatureMap

    if spec.weights is None:
        raise DataError("extractor spec carries no weights; initialize or train first")
    convs = []
    in_ch = spec.in_channels
    for out_ch in spec.channels:
        convs.append(torch.nn.Conv2d(in_ch, out_ch, 3, stride=2, padding=1))
        in_ch = out_ch
    stack = torch.nn.ModuleList(convs)
    state = {
        name.split(".", 1)[1]: torch.from_numpy(np.ascontiguousarray(arr)).float()
        for name, arr in spec.weights.items()
    }
    stack.load_state_dict(state)
    with torch.no_grad():
        out = _image_batch([img])
        for conv in stack:
            out = torch.relu(conv(out))
    return FeatureMap(out[0].permute(1, 2, 0).numpy().astype(np.float64))


def regress(corr, spec: RegressorSpec) -> TransformParams:
    """Apply the regressor head to a correlation volume."""
    if spec.weights is None:
        raise DataError("regressor spec carries no weights; initialize or train first")
    k_dim = corr.k_dim
    conv = torch.nn.Conv2d(k_dim, spec.conv_channels, 3, stride=2, padding=1)
    reg_hw = (corr.h + 1) // 2
    fc = torch.nn.Linear(reg_hw * reg_hw * spec.conv_channels, spec.free_params)
    conv.load_state_dict(
        {
            "weight": torch.from_numpy(np.ascontiguousarray(spec.weights["reg_conv.weight"])).float(),
            "bias": torch.from_numpy(np.ascontiguousarray(spec.weights["reg_conv.bias"])).float(),
        }
    )
    fc.load_state_dict(
        {
            "weight": torch.from_numpy(np.ascontiguousarray(spec.weights["fc.weight"])).float(),
            "bias": torch.from_numpy(np.ascontiguousarray(spec.weights["fc.bias"])).float(),
        }
    )
    with torch.no_grad():
        vol = torch.from_numpy(corr.data[None]).float().permute(0, 3, 1, 2)
        hidden = torch.relu(conv(vol))
        raw = fc(hidden.reshape(1, -1))[0].numpy().astype(np.float64)
    params = raw + spec.output_offset
    if spec.mode == "homo8":
        params = np.concatenate([params, [1.0]])
    return TransformParams(spec.kind, params)


def forward_pipeline(img_a: Image, img_b: Image, ckpt: ModelCheckpoint) -> TransformParams:
    """Extract, correlate and regress the transform for one image pair."""
    if ckpt.oracle:
        raise DataError("oracle checkpoint cannot run forward_pipeline")
    for name, img in (("A", img_a), ("B", img_b)):
        if img.height != ckpt.input_size or img.width != ckpt.input_size:
            raise DataError(
                f"image {name} is {img.width}x{img.height}; checkpoint expects "
                f"{ckpt.input_size}x{ckpt.input_size}"
            )
    net = build_net(ckpt)
    with torch.no_grad():
        params = net(_image_batch([img_a]), _image_batch([img_b]))[0].numpy()
    return TransformParams(net.label_kind(), params.astype(np.float64))


@dataclass(frozen=True)
class TwoStageResult:
    """Ordered transform pair; the composed point map is t2(t1(p))."""

    t1: TransformParams
    t2: TransformParams

    @property
    def stages(self) -> tuple[TransformParams, TransformParams]:
        return (self.t1, self.t2)

    def apply(self, pts) -> np.ndarray:
        return compose_apply(self.t2, self.t1, pts)


def two_stage_match(
    img_a: Image, img_b: Image, ckpt1: ModelCheckpoint, ckpt2: ModelCheckpoint
) -> TwoStageResult:
    """Stage-1 estimate, warp A into rough alignment, stage-2 refinement."""
    t1 = forward_pipeline(img_a, img_b, ckpt1)
    a_aligned = warp_image(img_a, invert_params(t1), img_a.height, img_a.width)
    t2 = forward_pipeline(a_aligned, img_b, ckpt2)
    return TwoStageResult(t1=t1, t2=t2)


def make_residual_samples(samples: Sequence, ckpt1: ModelCheckpoint) -> list:
    """Training pairs for a refinement stage behind ``ckpt1``.

    Each sample's source is replaced by the stage-1-aligned rendering and the
    label by the exact residual map gt o inv(T1), so a second stage trained
    on these pairs sees precisely the distribution it will face after stage 1.
    """
    from dataclasses import replace as _replace

    from .geometry import compose_params

    out = []
    for s in samples:
        t1 = forward_pipeline(s.source, s.warped, ckpt1)
        aligned = warp_image(s.source, invert_params(t1), s.source.height, s.source.width)
        h_res = compose_params(s.h_gt, invert_params(t1))
        out.append(_replace(s, source=aligned, h_gt=h_res))
    return out


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def _batch_loss(
    cfg: TrainConfig,
    kind_hat: TransformKind,
    theta: torch.Tensor,
    labels: torch.Tensor,
    pts: torch.Tensor,
    weights: torch.Tensor,
) -> torch.Tensor:
    if cfg.loss == "weighted":
        per = weighted_grid_loss_torch(
            kind_hat, theta, TransformKind.HOMOGRAPHY, labels, pts, weights,
            normalize_weights=cfg.normalize_weights,
        )
    elif cfg.loss == "grid":
        per = grid_loss_torch(kind_hat, theta, TransformKind.HOMOGRAPHY, labels, pts)
    else:
        per = param_mse_torch(kind_hat, theta, labels)
    return per.mean()


def train(
    samples: Sequence,
    cfg: TrainConfig,
    extractor: ExtractorSpec | None = None,
    regressor: RegressorSpec | None = None,
) -> ModelCheckpoint:
    """Mini-batch Adam training; deterministic for a fixed (seed, data, config)."""
    if len(samples) == 0:
        raise DataError("cannot train on an empty dataset")
    extractor = extractor or ExtractorSpec()
    regressor = regressor or RegressorSpec()
    if cfg.loss == "mse" and regressor.kind is not TransformKind.HOMOGRAPHY:
        raise ValueError(
            "parameter-MSE loss needs homography-kind regression to match the stored labels"
        )

    size = samples[0].source.height
    for s in samples:
        if (
            s.source.height != size
            or s.source.width != size
            or s.warped.height != size
            or s.warped.width != size
        ):
            raise DataError("all training images must be square and equally sized")

    imgs_a = _image_batch([s.source for s in samples])
    imgs_b = _image_batch([s.warped for s in samples])
    labels = torch.from_numpy(
        np.stack([s.h_gt.values for s in samples]).astype(np.float32)
    )

    net = PipelineNet(extractor, regressor, size, cfg.corr, cfg.corr_eps)
    init_weights(net, cfg.seed)
    optimizer = torch.optim.Adam(net.parameters(), lr=cfg.lr)

    grid = make_grid(cfg.grid_n)
    w = gaussian_weights(grid, GaussianWeightConfig(sigma=cfg.sigma, gamma=cfg.gamma))
    if cfg.loss == "weighted" and not np.any(w > 0):
        raise ValueError("Gaussian weight configuration zeroes every grid point")
    pts = torch.from_numpy(grid.points.astype(np.float32))
    weights = torch.from_numpy(w.astype(np.float32))

    n = len(samples)
    shuffle_gen = torch.Generator().manual_seed(cfg.seed + 1)
    kind_hat = regressor.kind
    trace = []
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=shuffle_gen)
        epoch_sum = 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = perm[start : start + cfg.batch_size]
            theta = net(imgs_a[idx], imgs_b[idx])
            loss = _batch_loss(cfg, kind_hat, theta, labels[idx], pts, weights)
            value = float(loss.detach())
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, step, value)
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_sum += value * len(idx)
        trace.append(epoch_sum / n)

    ext_w, reg_w = _split_weights(net)
    return ModelCheckpoint(
        extractor=replace(extractor, weights=ext_w),
        regressor=replace(regressor, weights=reg_w),
        train_config=cfg,
        input_size=size,
        loss_trace=tuple(trace),
    )


# ---------------------------------------------------------------------------
# Checkpoint container: magic + header length + JSON header + float32 payload
# ---------------------------------------------------------------------------


def save_checkpoint(ckpt: ModelCheckpoint, path) -> None:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tensors = {}
    if not ckpt.oracle:
        if ckpt.extractor.weights is None or ckpt.regressor.weights is None:
            raise DataError("cannot save a checkpoint without weights")
        tensors.update(ckpt.extractor.weights)
        tensors.update(ckpt.regressor.weights)

    directory = []
    payload = bytearray()
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        directory.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "size": arr.size}
        )
        payload.extend(arr.tobytes())
        offset += arr.size

    header = {
        "format_version": ckpt.format_version,
        "oracle": ckpt.oracle,
        "input_size": ckpt.input_size,
        "extractor": {
            "channels": list(ckpt.extractor.channels),
            "in_channels": ckpt.extractor.in_channels,
        },
        "regressor": {
            "mode": ckpt.regressor.mode,
            "conv_channels": ckpt.regressor.conv_channels,
            "output_offset": [float(v) for v in ckpt.regressor.output_offset],
        },
        "train": asdict(ckpt.train_config),
        "loss_trace": [float(v) for v in ckpt.loss_trace],
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(p, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path) -> ModelCheckpoint:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint file not found: {p}")
    raw = p.read_bytes()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8 or raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise DataError(f"{p} is not a geomatch checkpoint")
    header_len = struct.unpack("<Q", raw[8:16])[0]
    try:
        header = json.loads(raw[16 : 16 + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header in {p}: {exc}") from exc
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(
            f"unsupported checkpoint version {header.get('format_version')!r} in {p}"
        )
    payload = np.frombuffer(raw[16 + header_len :], dtype="<f4")

    weights = {}
    for entry in header["tensors"]:
        start, size = entry["offset"], entry["size"]
        if start + size > payload.size:
            raise DataError(f"checkpoint payload truncated in {p}")
        weights[entry["name"]] = payload[start : start + size].reshape(entry["shape"]).copy()

    ext_w = {k: v for k, v in weights.items() if k.startswith("extract.")}
    reg_w = {k: v for k, v in weights.items() if not k.startswith("extract.")}
    oracle = bool(header.get("oracle", False))
    extractor = ExtractorSpec(
        channels=tuple(header["extractor"]["channels"]),
        in_channels=header["extractor"]["in_channels"],
        weights=ext_w if (ext_w or not oracle) else {},
    )
    regressor = RegressorSpec(
        mode=header["regressor"]["mode"],
        conv_channels=header["regressor"]["conv_channels"],
        output_offset=np.asarray(header["regressor"]["output_offset"], dtype=np.float64),
        weights=reg_w if (reg_w or not oracle) else {},
    )
    return ModelCheckpoint(
        extractor=extractor,
        regressor=regressor,
        train_config=TrainConfig(**header["train"]),
        input_size=header["input_size"],
        loss_trace=tuple(header["loss_trace"]),
        format_version=header["format_version"],
        oracle=oracle,
    )
