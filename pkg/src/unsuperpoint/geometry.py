"""Planar homographies: sampling, point/image warping and corner error."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import torch

DET_EPS = 1e-12
W_EPS = 1e-12


class DegenerateHomographyError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Homography:
    """3x3 projective map from source pixels to target pixels.

    The matrix is rescaled so that its bottom-right entry is 1 whenever that
    entry is not (numerically) zero.
    """

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise DegenerateHomographyError("homography has non-finite entries")
        if abs(m[2, 2]) > W_EPS:
            m = m / m[2, 2]
        if abs(np.linalg.det(m)) <= DET_EPS:
            raise DegenerateHomographyError("homography is not invertible")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3))

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        return cls(np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]]))

    def inverse(self) -> "Homography":
        return Homography(np.linalg.inv(self.matrix))

    def __matmul__(self, other: "Homography") -> "Homography":
        # (self @ other) applies `other` first
        return Homography(self.matrix @ other.matrix)

    def __repr__(self):
        rows = "; ".join(" ".join(f"{v:.6g}" for v in r) for r in self.matrix)
        return f"Homography([{rows}])"


@dataclass(frozen=True)
class HomographyParams:
    """Sampling intervals for random homographies.

    ``perspective`` is the largest per-axis displacement of each image corner,
    as a fraction of ``min(H, W)``.
    """

    scale: tuple[float, float] = (0.85, 1.15)
    rotation: tuple[float, float] = (-math.radians(15.0), math.radians(15.0))
    perspective: float = 0.1

    def __post_init__(self):
        lo, hi = self.scale
        if not (0 < lo <= hi):
            raise ValueError(f"scale interval must be positive and non-empty, got {self.scale}")
        if not self.rotation[0] <= self.rotation[1]:
            raise ValueError(f"rotation interval is empty: {self.rotation}")
        if self.perspective < 0:
            raise ValueError("perspective must be non-negative")

    @classmethod
    def identity(cls) -> "HomographyParams":
        return cls(scale=(1.0, 1.0), rotation=(0.0, 0.0), perspective=0.0)


def _four_point_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for k, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * k] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * k + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * k], b[2 * k + 1] = u, v
    h = np.linalg.solve(a, b)
    return np.append(h, 1.0).reshape(3, 3)


def _compose(scale, angle, corner_shift, image_size) -> np.ndarray:
    h, w = image_size
    cx, cy = w / 2.0, h / 2.0
    to_center = np.array([[1.0, 0, -cx], [0, 1.0, -cy], [0, 0, 1.0]])
    from_center = np.array([[1.0, 0, cx], [0, 1.0, cy], [0, 0, 1.0]])
    s = np.diag([scale, scale, 1.0])
    c, si = math.cos(angle), math.sin(angle)
    rot = np.array([[c, -si, 0], [si, c, 0], [0, 0, 1.0]])
    if np.any(corner_shift != 0):
        corners = np.array([[-cx, -cy], [cx, -cy], [cx, cy], [-cx, cy]])
        persp = _four_point_homography(corners, corners + corner_shift)
    else:
        persp = np.eye(3)
    return from_center @ persp @ rot @ s @ to_center


def sample_homography(params: HomographyParams, image_size, rng_seed,
                      max_retries: int = 100) -> Homography:
    """Draw a random homography about the image center.

    Scale, rotation and per-corner perspective shifts are drawn uniformly from
    ``params``. Draws that are singular or send an image corner behind the
    camera are rejected and redrawn.
    """
    h, w = image_size
    if h < 16 or w < 16:
        raise ValueError(f"image must be at least 16x16, got {image_size}")
    rng = np.random.default_rng(rng_seed)
    max_shift = params.perspective * min(h, w)
    frame = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)
    for _ in range(max_retries):
        scale = rng.uniform(*params.scale)
        angle = rng.uniform(*params.rotation)
        shift = rng.uniform(-max_shift, max_shift, size=(4, 2))
        m = _compose(scale, angle, shift, image_size)
        if abs(np.linalg.det(m)) <= DET_EPS:
            continue
        wcoord = frame @ m[2, :2] + m[2, 2]
        if np.any(wcoord <= W_EPS):
            continue
        return Homography(m)
    raise DegenerateHomographyError(f"no valid homography after {max_retries} draws")


def transform_points(h: Homography, points) -> np.ndarray:
    """Map (M, 2) pixel coordinates through ``h``.

    Points sent to infinity come back as NaN rows.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    m = h.matrix
    hom = pts @ m[:, :2].T + m[:, 2]
    wcoord = hom[:, 2:3]
    bad = np.abs(wcoord[:, 0]) < W_EPS
    with np.errstate(divide="ignore", invalid="ignore"):
        out = hom[:, :2] / wcoord
    out[bad] = np.nan
    return out


def transform_points_torch(h: Homography, points: torch.Tensor) -> torch.Tensor:
    """Differentiable counterpart of :func:`transform_points` for (..., 2) tensors."""
    m = torch.tensor(np.array(h.matrix), dtype=points.dtype, device=points.device)
    hom = points @ m[:, :2].T + m[:, 2]
    wcoord = hom[..., 2:3]
    bad = wcoord.abs() < W_EPS
    safe_w = torch.where(bad, torch.ones_like(wcoord), wcoord)
    out = hom[..., :2] / safe_w
    return torch.where(bad, torch.full_like(out, float("nan")), out)


def inside_frame(points: np.ndarray, image_size) -> np.ndarray:
    """Boolean mask of points lying in ``[0, W) x [0, H)`` (NaN counts as outside)."""
    h, w = image_size
    x, y = points[:, 0], points[:, 1]
    with np.errstate(invalid="ignore"):
        return (x >= 0) & (x < w) & (y >= 0) & (y < h)


def warp_image(h: Homography, image: np.ndarray) -> np.ndarray:
    """Bilinear inverse-mapped warp into a same-size frame, zero outside the source."""
    image = np.asarray(image)
    if image.size == 0:
        raise ValueError("cannot warp an empty image")
    rows, cols = image.shape[:2]
    return cv2.warpPerspective(image, h.matrix, (cols, rows), flags=cv2.INTER_LINEAR,
                               borderMode=cv2.BORDER_CONSTANT, borderValue=0)


def image_corners(image_size) -> np.ndarray:
    h, w = image_size
    return np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], dtype=np.float64)


def homography_corner_error(h_gt: Homography, h_est: Homography | None, image_size) -> float:
    """Mean distance between the four image corners mapped by ``h_gt`` and ``h_est``.

    A missing estimate yields ``inf``.
    """
    if h_est is None:
        return math.inf
    corners = image_corners(image_size)
    diff = transform_points(h_gt, corners) - transform_points(h_est, corners)
    err = float(np.mean(np.linalg.norm(diff, axis=1)))
    return err if math.isfinite(err) else math.inf


def read_homography(path) -> Homography:
    values = np.loadtxt(Path(path), dtype=np.float64).reshape(-1)
    if values.size != 9:
        raise ValueError(f"{path}: expected 9 values, found {values.size}")
    return Homography(values.reshape(3, 3))


def write_homography(path, h: Homography) -> None:
    lines = [" ".join(repr(float(v)) for v in row) for row in h.matrix]
    Path(path).write_text("\n".join(lines) + "\n")
