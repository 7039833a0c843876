"""Overlay drawings for detections and matched image pairs."""
from __future__ import annotations

import cv2
import numpy as np

from .evaluation import apply_protocol, estimate_homography, match_descriptors
from .geometry import Homography, image_corners, transform_points

GREEN = (0, 200, 0)
BLUE = (255, 64, 0)  # BGR
RED = (0, 0, 255)


def to_bgr8(image: np.ndarray) -> np.ndarray:
    img = np.clip(np.asarray(image, dtype=np.float32) * 255.0, 0, 255).round().astype(np.uint8)
    return cv2.cvtColor(img, cv2.COLOR_RGB2BGR)


def draw_points(image: np.ndarray, positions, color=GREEN, marker="cross") -> np.ndarray:
    out = to_bgr8(image) if image.dtype != np.uint8 else image.copy()
    for x, y in np.asarray(positions).reshape(-1, 2):
        p = (int(round(x)), int(round(y)))
        if marker == "cross":
            cv2.drawMarker(out, p, color, cv2.MARKER_CROSS, 6, 1)
        else:
            cv2.rectangle(out, (p[0] - 3, p[1] - 3), (p[0] + 3, p[1] + 3), color, 1)
    return out


def _border(h: Homography, size) -> np.ndarray:
    c = image_corners(size)[[0, 1, 3, 2]]
    return transform_points(h, c)


def match_visualize(detector, image_ref: np.ndarray, image_tgt: np.ndarray, h_gt: Homography | None = None,
                    n_points: int = 300, nms_radius=None, ransac_threshold: float = 3.0, seed=0):
    """Side-by-side overlay of filtered matches and the reference border warped into the target.

    Returns ``(bgr_image, estimate)``; the ground-truth border is green, the
    estimated one blue.
    """
    ps_ref = apply_protocol(detector(image_ref, "ref"), n_points, nms_radius)
    ps_tgt = apply_protocol(detector(image_tgt, "tgt"), n_points, nms_radius)
    matches = match_descriptors(ps_ref.descriptors, ps_tgt.descriptors)
    est = estimate_homography(matches, ps_ref.positions, ps_tgt.positions, ransac_threshold, seed=seed)
    left, right = to_bgr8(image_ref), to_bgr8(image_tgt)
    h1, w1 = left.shape[:2]
    h2, w2 = right.shape[:2]
    canvas = np.zeros((max(h1, h2) + 24, w1 + w2, 3), dtype=np.uint8)
    canvas[:h1, :w1] = left
    canvas[:h2, w1:] = right
    offset = np.array([w1, 0.0])
    kept = matches[est.inliers] if est.success else matches
    for i, j in kept:
        p = tuple(int(round(v)) for v in ps_ref.positions[i])
        q = tuple(int(round(v)) for v in ps_tgt.positions[j] + offset)
        cv2.line(canvas, p, q, (0, 255, 255), 1, cv2.LINE_AA)
    for h, color in ((h_gt, GREEN), (est.homography, BLUE)):
        if h is None:
            continue
        pts = _border(h, (h1, w1)) + offset
        if np.all(np.isfinite(pts)):
            cv2.polylines(canvas, [pts.round().astype(np.int32)], True, color, 2, cv2.LINE_AA)
    caption = f"{len(kept)} matches" if est.success else "homography estimation failed"
    cv2.putText(canvas, caption, (4, canvas.shape[0] - 7), cv2.FONT_HERSHEY_SIMPLEX, 0.45,
                (255, 255, 255) if est.success else RED, 1, cv2.LINE_AA)
    return canvas, est
