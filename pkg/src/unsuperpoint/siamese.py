"""Paired augmented views and point-pair correspondences between the two branches."""
from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np
import torch

from .geometry import Homography, HomographyParams, sample_homography, transform_points_torch, warp_image

CORRESPOND_EPS = 4.0
DESCRIPTOR_RADIUS = 8.0


@dataclass(frozen=True)
class PhotometricParams:
    """Uniform sampling intervals for the non-spatial augmentations (unit intensity range)."""

    brightness: tuple[float, float] = (-0.2, 0.2)
    blur_sigma: tuple[float, float] = (0.0, 1.5)
    noise_sigma: tuple[float, float] = (0.0, 0.04)

    @classmethod
    def none(cls) -> "PhotometricParams":
        return cls((0.0, 0.0), (0.0, 0.0), (0.0, 0.0))


@dataclass(frozen=True)
class PhotometricSample:
    brightness: float
    blur_sigma: float
    noise_sigma: float


def sample_photometric(params: PhotometricParams, rng: np.random.Generator) -> PhotometricSample:
    return PhotometricSample(
        brightness=float(rng.uniform(*params.brightness)),
        blur_sigma=float(rng.uniform(*params.blur_sigma)),
        noise_sigma=float(rng.uniform(*params.noise_sigma)),
    )


def apply_photometric(image: np.ndarray, sample: PhotometricSample, rng: np.random.Generator,
                      max_value: float = 1.0) -> np.ndarray:
    out = np.asarray(image, dtype=np.float32)
    if sample.brightness:
        out = out + np.float32(sample.brightness)
    if sample.blur_sigma > 0:
        out = cv2.GaussianBlur(out, (0, 0), sample.blur_sigma, borderType=cv2.BORDER_REFLECT)
    if sample.noise_sigma > 0:
        out = out + rng.normal(0.0, sample.noise_sigma, size=out.shape).astype(np.float32)
    if out is image:
        return out.copy()
    return np.clip(out, 0.0, max_value)


def photometric_augment(image: np.ndarray, params: PhotometricParams, seed) -> np.ndarray:
    """Brightness shift, Gaussian blur and additive noise, magnitudes drawn from ``params``."""
    rng = np.random.default_rng(seed)
    return apply_photometric(image, sample_photometric(params, rng), rng)


@dataclass
class BranchPair:
    image_a: np.ndarray
    image_b: np.ndarray
    homography: Homography  # branch A pixels -> branch B pixels
    photometric_a: PhotometricSample
    photometric_b: PhotometricSample


def make_branch_pair(image: np.ndarray, homography_params: HomographyParams,
                     photo_params: PhotometricParams, seed) -> BranchPair:
    """Branch A: augmented original. Branch B: augmented warp of the original by a fresh T."""
    h, w = image.shape[:2]
    if h % 8 or w % 8:
        raise ValueError(f"image height and width must be multiples of 8, got {h}x{w}")
    h_seed, a_seed, b_seed = np.random.SeedSequence(seed).spawn(3)
    t = sample_homography(homography_params, (h, w), h_seed)
    warped = warp_image(t, np.asarray(image, dtype=np.float32))
    rng_a, rng_b = np.random.default_rng(a_seed), np.random.default_rng(b_seed)
    pa, pb = sample_photometric(photo_params, rng_a), sample_photometric(photo_params, rng_b)
    return BranchPair(apply_photometric(image, pa, rng_a), apply_photometric(warped, pb, rng_b), t, pa, pb)


def compute_distance_matrix(points_a_in_b, points_b):
    """Pairwise Euclidean distances, (M_A, M_B). Accepts numpy arrays or tensors."""
    if isinstance(points_a_in_b, torch.Tensor):
        diff = points_a_in_b[:, None, :] - points_b[None, :, :]
        return torch.sqrt((diff ** 2).sum(-1))
    a = np.asarray(points_a_in_b, dtype=np.float64)
    b = np.asarray(points_b, dtype=np.float64)
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff ** 2).sum(-1))


def find_pairs(dist, epsilon_correspond: float = CORRESPOND_EPS):
    """Nearest B neighbor for every A row, kept when closer than ``epsilon_correspond``.

    Returns ``(idx_a, idx_b, d, d_bar)``; ``d_bar`` is NaN when no pair exists.
    Ties resolve to the lowest B index.
    """
    is_torch = isinstance(dist, torch.Tensor)
    g = dist.detach().cpu().numpy() if is_torch else np.asarray(dist)
    if g.shape[1] == 0:
        idx_a = np.zeros(0, dtype=np.int64)
        idx_b = idx_a.copy()
    else:
        j = np.argmin(g, axis=1)
        dmin = g[np.arange(g.shape[0]), j]
        keep = dmin < epsilon_correspond
        idx_a = np.nonzero(keep)[0]
        idx_b = j[keep]
    d = g[idx_a, idx_b]
    d_bar = float(d.mean()) if d.size else float("nan")
    if is_torch:
        return (torch.from_numpy(idx_a), torch.from_numpy(idx_b),
                dist[torch.from_numpy(idx_a), torch.from_numpy(idx_b)], d_bar)
    return idx_a, idx_b, d, d_bar


def compute_correspondence_matrix(dist, radius: float = DESCRIPTOR_RADIUS):
    """1 where points lie within ``radius`` pixels (inclusive), else 0."""
    if isinstance(dist, torch.Tensor):
        return (dist <= radius).to(dist.dtype)
    return (np.asarray(dist) <= radius).astype(np.float64)


def _safe_norm(diff: torch.Tensor) -> torch.Tensor:
    # zero-length pairs (identical positions) get a zero gradient instead of NaN
    sq = (diff ** 2).sum(-1)
    pos = sq > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, sq, torch.ones_like(sq))), torch.zeros_like(sq))


@dataclass
class CorrespondenceSet:
    dist: torch.Tensor       # G, detached, (M_A, M_B); out-of-frame A rows are +inf
    idx_a: torch.Tensor
    idx_b: torch.Tensor
    distances: torch.Tensor  # d_k, differentiable w.r.t. both branches' positions
    corr: torch.Tensor       # C, (M_A, M_B) in {0, 1}

    @property
    def num_pairs(self) -> int:
        return int(self.idx_a.numel())

    @property
    def d_bar(self) -> float:
        return float(self.distances.mean()) if self.num_pairs else float("nan")


def build_correspondences(positions_a: torch.Tensor, positions_b: torch.Tensor, homography: Homography,
                          image_size, epsilon_correspond: float = CORRESPOND_EPS,
                          descriptor_radius: float = DESCRIPTOR_RADIUS) -> CorrespondenceSet:
    """Map A's points into B with ``homography`` and pair them with B's points.

    A points landing outside B's frame never pair and never count as descriptor
    positives.
    """
    a_in_b = transform_points_torch(homography, positions_a)
    h, w = image_size
    with torch.no_grad():
        g = compute_distance_matrix(a_in_b.detach(), positions_b.detach())
        x, y = a_in_b[:, 0].detach(), a_in_b[:, 1].detach()
        visible = (x >= 0) & (x < w) & (y >= 0) & (y < h)  # NaN compares False
        g[~visible] = float("inf")
        idx_a, idx_b, _, _ = find_pairs(g, epsilon_correspond)
        corr = compute_correspondence_matrix(g, descriptor_radius)
    d = _safe_norm(a_in_b[idx_a] - positions_b[idx_b])
    return CorrespondenceSet(g, idx_a, idx_b, d, corr)
