"""Visual frontend: mouth-region preprocessing, spatiotemporal ResNet features
and the binary feature-file format.

Feature files hold one T x d_feat float32 matrix behind a 16-byte header::

    b"LSPF" | u32 version (=1) | u32 T | u32 d_feat      (all little-endian)
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

MAGIC = b"LSPF"
VERSION = 1
HEADER = struct.Struct("<4sIII")
FRAME_RATE = 25
CROP_COEFFICIENTS = (15, 46, 145, 125)
RESIZE_TO = 122
FINAL_CROP = 112
TEMPORAL_KERNEL = 5


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class CropSpec:
    coefficients: tuple[int, int, int, int] = CROP_COEFFICIENTS  # left, top, right, bottom
    resize_to: int = RESIZE_TO
    final_crop: int = FINAL_CROP
    mode: str = "test-center"  # or "train-random"

    def __post_init__(self):
        left, top, right, bottom = self.coefficients
        if right <= left or bottom <= top:
            raise ValueError(f"empty crop box {self.coefficients}")
        if self.final_crop > self.resize_to:
            raise ValueError("final_crop must not exceed resize_to")
        if self.mode not in ("train-random", "test-center"):
            raise ValueError(f"unknown crop mode {self.mode!r}")


@dataclass
class FeatureSequence:
    features: np.ndarray
    source_id: str = ""

    def __post_init__(self):
        if self.features.ndim != 2:
            raise DataError(f"features must be 2-D, got shape {self.features.shape}")

    @property
    def T(self) -> int:
        return self.features.shape[0]

    @property
    def d_feat(self) -> int:
        return self.features.shape[1]


def preprocess(frames: np.ndarray, spec: CropSpec = CropSpec(), rng: np.random.Generator | None = None) -> np.ndarray:
    """Crop, resize and crop again: (T, H, W) in [0, 1] -> (T, 112, 112).

    In train mode one random offset is drawn per sequence from ``rng``.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim != 3 or frames.shape[0] < 1:
        raise ValueError(f"expected (T, H, W) frames with T >= 1, got {frames.shape}")
    left, top, right, bottom = spec.coefficients
    if frames.shape[1] < bottom or frames.shape[2] < right:
        raise ValueError(f"frames of size {frames.shape[1:]} are smaller than the crop box {spec.coefficients}")
    box = torch.from_numpy(np.ascontiguousarray(frames[:, top:bottom, left:right])).unsqueeze(1)
    resized = F.interpolate(box, size=(spec.resize_to, spec.resize_to), mode="bilinear", align_corners=False)[:, 0]
    slack = spec.resize_to - spec.final_crop
    if spec.mode == "train-random":
        if rng is None:
            raise ValueError("train-random cropping needs a seeded generator")
        dy, dx = (int(v) for v in rng.integers(0, slack + 1, size=2))
    else:
        dy = dx = slack // 2
    out = resized[:, dy:dy + spec.final_crop, dx:dx + spec.final_crop]
    return out.numpy().astype(np.float32, copy=False)


class PreActBlock(nn.Module):
    """Identity-mapping residual block (BN-ReLU-conv ordering)."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.shortcut = None
        if stride != 1 or c_in != c_out:
            self.shortcut = nn.Conv2d(c_in, c_out, 1, stride, bias=False)

    def forward(self, x):
        pre = F.relu(self.bn1(x))
        skip = self.shortcut(pre) if self.shortcut is not None else x
        out = self.conv1(pre)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + skip


class SpatioTemporalResNet(nn.Module):
    """3-D conv/BN/max-pool frontend followed by a per-frame 2-D ResNet-18 trunk.

    Temporal kernel 5 with stride 1 and replicate padding, so output row ``t``
    depends on frames ``t-2 .. t+2`` only. The trunk's average pooling is
    replaced by a fully connected layer producing ``d_feat`` outputs.
    With ``trunk=False`` the residual trunk is skipped (used for locality checks).
    """

    def __init__(self, d_feat: int = 256, trunk: bool = True, input_size: int = FINAL_CROP):
        super().__init__()
        self.d_feat = d_feat
        self.use_trunk = trunk
        self.conv3d = nn.Conv3d(1, 64, (TEMPORAL_KERNEL, 7, 7), stride=(1, 2, 2), padding=(0, 3, 3), bias=False)
        self.bn3d = nn.BatchNorm3d(64)
        self.pool3d = nn.MaxPool3d((1, 3, 3), stride=(1, 2, 2), padding=(0, 1, 1))
        side = _pool_out(_conv_out(input_size, 7, 2, 3), 3, 2, 1)
        if trunk:
            widths = (64, 128, 256, 512)
            layers = []
            c_in = 64
            for i, w in enumerate(widths):
                stride = 1 if i == 0 else 2
                layers += [PreActBlock(c_in, w, stride), PreActBlock(w, w)]
                c_in = w
                if stride == 2:
                    side = _conv_out(side, 3, 2, 1)
            self.trunk = nn.Sequential(*layers)
            self.trunk_bn = nn.BatchNorm2d(512)
            channels = 512
        else:
            self.trunk = None
            channels = 64
        self.fc = nn.Linear(channels * side * side, d_feat)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W) -> (B, T, d_feat)."""
        B, T, H, W = frames.shape
        pad = TEMPORAL_KERNEL // 2
        x = frames.unsqueeze(1)  # B, 1, T, H, W
        x = torch.cat([x[:, :, :1].expand(-1, -1, pad, -1, -1), x, x[:, :, -1:].expand(-1, -1, pad, -1, -1)], dim=2)
        x = self.pool3d(F.relu(self.bn3d(self.conv3d(x))))
        x = x.transpose(1, 2).reshape(B * T, 64, x.shape[-2], x.shape[-1])
        if self.trunk is not None:
            x = F.relu(self.trunk_bn(self.trunk(x)))
        return self.fc(x.flatten(1)).reshape(B, T, self.d_feat)


def _conv_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


def _pool_out(n: int, k: int, s: int, p: int) -> int:
    return (n + 2 * p - k) // s + 1


@torch.no_grad()
def extract_features(frames: np.ndarray, model: SpatioTemporalResNet, source_id: str = "",
                     chunk: int = 32) -> FeatureSequence:
    """Per-frame features for one preprocessed (T, 112, 112) sequence.

    Frames are processed in overlapping temporal chunks to bound memory; the
    result is identical to a single pass since each row sees a 5-frame window.
    """
    frames = torch.as_tensor(np.asarray(frames, dtype=np.float32))
    if frames.ndim != 3 or frames.shape[0] == 0:
        raise ValueError(f"expected (T, H, W) frames with T >= 1, got {tuple(frames.shape)}")
    was_training = model.training
    model.eval()
    try:
        T = frames.shape[0]
        pad = TEMPORAL_KERNEL // 2
        padded = torch.cat([frames[:1].expand(pad, -1, -1), frames, frames[-1:].expand(pad, -1, -1)])
        rows = []
        for start in range(0, T, chunk):
            stop = min(T, start + chunk)
            window = padded[start:stop + 2 * pad].unsqueeze(0)
            rows.append(model(window)[0, pad:pad + stop - start])
        out = torch.cat(rows).numpy().astype(np.float32)
    finally:
        model.train(was_training)
    return FeatureSequence(out, source_id)


def write_features(path: str | Path, features: np.ndarray) -> None:
    arr = np.ascontiguousarray(features, dtype="<f4")
    if arr.ndim != 2:
        raise ValueError("features must be a 2-D array")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(HEADER.pack(MAGIC, VERSION, arr.shape[0], arr.shape[1]))
        f.write(arr.tobytes())


def read_features(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < HEADER.size:
        raise DataError(f"{path}: truncated feature header")
    magic, version, T, d = HEADER.unpack_from(data)
    if magic != MAGIC or version != VERSION:
        raise DataError(f"{path}: not a version-{VERSION} feature file")
    if T < 1 or d < 1:
        raise DataError(f"{path}: empty feature matrix ({T} x {d})")
    payload = data[HEADER.size:]
    if len(payload) != 4 * T * d:
        raise DataError(f"{path}: header declares {T} x {d} but payload holds {len(payload) // 4} values")
    return np.frombuffer(payload, dtype="<f4").reshape(T, d).astype(np.float32)


def load_precomputed(path: str | Path, n_frames: int | None = None, d_feat: int | None = None,
                     source_id: str = "") -> FeatureSequence:
    """Read a feature file and check it against the shape declared by the manifest."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    arr = read_features(path)
    if n_frames is not None and arr.shape[0] != n_frames:
        raise DataError(f"{path}: manifest declares T={n_frames} but the file has {arr.shape[0]} rows")
    if d_feat is not None and arr.shape[1] != d_feat:
        raise DataError(f"{path}: expected d_feat={d_feat}, file has {arr.shape[1]}")
    return FeatureSequence(arr, source_id or path.stem)
