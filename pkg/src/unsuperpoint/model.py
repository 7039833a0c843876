"""UnsuperPoint network: shared VGG-style backbone with score, position and descriptor heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelConfig:
    backbone_channels: tuple[int, ...] = (32, 32, 64, 64, 128, 128, 256, 256)
    descriptor_dim: int = 256
    downsample: int = 8
    leaky_relu_slope: float = 0.01
    normalize_descriptors: bool = True

    def __post_init__(self):
        self.backbone_channels = tuple(int(c) for c in self.backbone_channels)
        if len(self.backbone_channels) != 8:
            raise ValueError("backbone needs exactly 8 conv layers (4 pairs)")
        if self.descriptor_dim < 1:
            raise ValueError("descriptor_dim must be >= 1")
        if self.downsample != 8:
            raise ValueError("three 2x poolings fix the downsample factor at 8")

    @property
    def head_channels(self) -> int:
        return self.backbone_channels[-1]


class RawHeads(NamedTuple):
    """Per-cell head outputs, channel-first.

    scores: (B, h, w) in [0, 1]; relative: (B, 2, h, w) in [0, 1] as (x, y);
    descriptors: (B, F, h, w), unnormalized.
    """

    scores: torch.Tensor
    relative: torch.Tensor
    descriptors: torch.Tensor


@dataclass
class PointSet:
    """Aligned per-point arrays for one image, sorted by descending score.

    Arrays may be torch tensors (model output) or numpy arrays (evaluation).
    """

    scores: object
    positions: object
    descriptors: object
    image_size: tuple[int, int]
    relative: object = field(default=None, repr=False)

    def __len__(self):
        return len(self.scores)

    def numpy(self) -> "PointSet":
        def conv(a):
            if a is None or isinstance(a, np.ndarray):
                return a
            return a.detach().cpu().numpy().astype(np.float64)

        return PointSet(conv(self.scores), conv(self.positions), conv(self.descriptors),
                        tuple(self.image_size), conv(self.relative))

    def take(self, index) -> "PointSet":
        rel = None if self.relative is None else self.relative[index]
        return PointSet(self.scores[index], self.positions[index], self.descriptors[index],
                        self.image_size, rel)


def _conv_block(cin, cout, slope):
    return [nn.Conv2d(cin, cout, 3, padding=1), nn.BatchNorm2d(cout), nn.LeakyReLU(slope)]


def _head(cin, cout, slope):
    return nn.Sequential(*_conv_block(cin, cin, slope), nn.Conv2d(cin, cout, 3, padding=1))


class UnsuperPoint(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = config = config or ModelConfig()
        slope = config.leaky_relu_slope
        layers, cin = [], 3
        for i, cout in enumerate(config.backbone_channels):
            layers += _conv_block(cin, cout, slope)
            if i in (1, 3, 5):
                layers.append(nn.MaxPool2d(2, 2))
            cin = cout
        self.backbone = nn.Sequential(*layers)
        self.score_head = _head(cin, 1, slope)
        self.position_head = _head(cin, 2, slope)
        self.descriptor_head = _head(cin, config.descriptor_dim, slope)

    def forward(self, images: torch.Tensor) -> RawHeads:
        """Run the network on normalized (B, 3, H, W) images."""
        f = self.config.downsample
        h, w = images.shape[-2:]
        if h % f or w % f:
            raise ValueError(f"image height and width must be multiples of {f}, got {h}x{w}")
        feat = self.backbone(images)
        scores = torch.sigmoid(self.score_head(feat)).squeeze(1)
        relative = torch.sigmoid(self.position_head(feat))
        desc = self.descriptor_head(feat)
        return RawHeads(scores, relative, desc)


def relative_to_pixel(relative: torch.Tensor, downsample: int = 8) -> torch.Tensor:
    """Turn (..., 2, h, w) in-cell offsets into pixel (x, y) coordinates."""
    h, w = relative.shape[-2:]
    cols = torch.arange(w, dtype=relative.dtype, device=relative.device)
    rows = torch.arange(h, dtype=relative.dtype, device=relative.device)
    x = (cols.view(1, w) + relative[..., 0, :, :]) * downsample
    y = (rows.view(h, 1) + relative[..., 1, :, :]) * downsample
    return torch.stack([x, y], dim=-3)


def interpolate_descriptors(desc_map: torch.Tensor, positions: torch.Tensor,
                            downsample: int = 8) -> torch.Tensor:
    """Bilinearly sample a (B, F, h, w) descriptor map at pixel positions (B, M, 2).

    Cell (r, c) holds the descriptor for pixel ((c + 0.5) * f, (r + 0.5) * f);
    positions beyond the outermost cell centers clamp to the edge. Returns
    (B, M, F), differentiable in both arguments.
    """
    b, nf, h, w = desc_map.shape
    u = (positions[..., 0] / downsample - 0.5).clamp(0, w - 1)
    v = (positions[..., 1] / downsample - 0.5).clamp(0, h - 1)
    u0 = u.detach().floor().clamp(max=max(w - 2, 0))
    v0 = v.detach().floor().clamp(max=max(h - 2, 0))
    du = (u - u0).unsqueeze(-1)
    dv = (v - v0).unsqueeze(-1)
    u0, v0 = u0.long(), v0.long()
    u1 = (u0 + 1).clamp(max=w - 1)
    v1 = (v0 + 1).clamp(max=h - 1)

    flat = desc_map.reshape(b, nf, h * w).transpose(1, 2)  # (B, h*w, F)

    def gather(vi, ui):
        idx = (vi * w + ui).unsqueeze(-1).expand(-1, -1, nf)
        return torch.gather(flat, 1, idx)

    top = gather(v0, u0) * (1 - du) + gather(v0, u1) * du
    bottom = gather(v1, u0) * (1 - du) + gather(v1, u1) * du
    return top * (1 - dv) + bottom * dv


class FlatOutputs(NamedTuple):
    """Unsorted per-point outputs in row-major cell order, batched over images."""

    scores: torch.Tensor       # (B, M)
    positions: torch.Tensor    # (B, M, 2) pixels
    relative: torch.Tensor     # (B, M, 2)
    descriptors: torch.Tensor  # (B, M, F)


def flatten_heads(raw: RawHeads, config: ModelConfig, image_size) -> FlatOutputs:
    """Map cells to pixels, interpolate and normalize descriptors, flatten to points."""
    f = config.downsample
    b = raw.scores.shape[0]
    pix = relative_to_pixel(raw.relative, f)
    positions = pix.flatten(2).transpose(1, 2)
    h, w = image_size
    # sigmoid saturating at exactly 1 would put the last row/column on the frame edge
    upper = torch.tensor([w, h], dtype=positions.dtype, device=positions.device)
    positions = torch.minimum(positions, torch.nextafter(upper, torch.zeros_like(upper)))
    relative = raw.relative.flatten(2).transpose(1, 2)
    desc = interpolate_descriptors(raw.descriptors, positions, f)
    if config.normalize_descriptors:
        desc = F.normalize(desc, dim=-1)
    return FlatOutputs(raw.scores.reshape(b, -1), positions, relative, desc)


def assemble_pointset(raw: RawHeads, config: ModelConfig, image_size) -> list[PointSet]:
    """Build one score-sorted :class:`PointSet` per image (stable on ties)."""
    flat = flatten_heads(raw, config, image_size)
    out = []
    for k in range(flat.scores.shape[0]):
        order = torch.sort(flat.scores[k], descending=True, stable=True).indices
        out.append(PointSet(flat.scores[k][order], flat.positions[k][order],
                            flat.descriptors[k][order], tuple(image_size), flat.relative[k][order]))
    return out


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """(H, W, 3) array -> (1, 3, H, W) float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]


@torch.no_grad()
def detect_points(model: UnsuperPoint, normalized_image: np.ndarray) -> PointSet:
    """Inference on one normalized (H, W, 3) image; returns a numpy PointSet."""
    was_training = model.training
    model.eval()
    try:
        x = image_to_tensor(normalized_image)
        raw = model(x)
        ps = assemble_pointset(raw, model.config, normalized_image.shape[:2])[0]
    finally:
        model.train(was_training)
    return ps.numpy()


def save_checkpoint(path, model: UnsuperPoint, step: int = 0, optimizer=None, extra=None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cfg = asdict(model.config)
    cfg["backbone_channels"] = list(cfg["backbone_channels"])
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "model_config": cfg,
        "state_dict": model.state_dict(),
        "step": int(step),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, map_location="cpu") -> tuple[UnsuperPoint, dict]:
    """Returns the restored model (eval mode) and the raw checkpoint payload."""
    payload = torch.load(path, map_location=map_location, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format version {version!r}")
    model = UnsuperPoint(ModelConfig(**payload["model_config"]))
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload
