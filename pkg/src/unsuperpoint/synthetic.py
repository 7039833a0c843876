"""Procedural textured images and HPatches-style scenes for tests and demos."""
from __future__ import annotations

from pathlib import Path

import cv2
import numpy as np

from .geometry import Homography, HomographyParams, sample_homography, warp_image, write_homography


def random_image(rng: np.random.Generator, size=(240, 320)) -> np.ndarray:
    """Float32 RGB image in [0, 1] with polygons, ellipses, lines and checker patches."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float32)
    base = rng.uniform(0.2, 0.8, 3).astype(np.float32)
    grad = rng.uniform(-0.3, 0.3, (2, 3)).astype(np.float32)
    img = base + (xx / w)[..., None] * grad[0] + (yy / h)[..., None] * grad[1]
    img = np.ascontiguousarray(np.clip(img, 0, 1) * 255).astype(np.uint8)
    area = h * w
    for _ in range(int(rng.integers(8, 16)) * max(1, area // (240 * 320))):
        color = tuple(int(c) for c in rng.integers(0, 256, 3))
        kind = rng.integers(0, 4)
        if kind == 0:
            n = int(rng.integers(3, 7))
            c = rng.uniform([0, 0], [w, h])
            r = rng.uniform(0.05, 0.2) * min(h, w)
            ang = np.sort(rng.uniform(0, 2 * np.pi, n))
            pts = np.stack([c[0] + r * np.cos(ang) * rng.uniform(0.5, 1.5, n),
                            c[1] + r * np.sin(ang) * rng.uniform(0.5, 1.5, n)], 1)
            cv2.fillPoly(img, [pts.astype(np.int32)], color)
        elif kind == 1:
            center = tuple(int(v) for v in rng.uniform([0, 0], [w, h]))
            axes = tuple(int(v) for v in rng.uniform(3, 0.15 * min(h, w), 2))
            cv2.ellipse(img, center, axes, float(rng.uniform(0, 180)), 0, 360, color, -1)
        elif kind == 2:
            p1 = tuple(int(v) for v in rng.uniform([0, 0], [w, h]))
            p2 = tuple(int(v) for v in rng.uniform([0, 0], [w, h]))
            cv2.line(img, p1, p2, color, int(rng.integers(1, 4)))
        else:
            x0, y0 = (int(v) for v in rng.uniform([0, 0], [w * 0.8, h * 0.8]))
            cell = int(rng.integers(4, 12))
            n = int(rng.integers(2, 6))
            other = tuple(int(c) for c in rng.integers(0, 256, 3))
            for i in range(n):
                for j in range(n):
                    cv2.rectangle(img, (x0 + j * cell, y0 + i * cell), (x0 + (j + 1) * cell, y0 + (i + 1) * cell),
                                  color if (i + j) % 2 else other, -1)
    img = cv2.GaussianBlur(img, (0, 0), 0.7)
    return img.astype(np.float32) / 255.0


def write_corpus(root, count: int, seed: int = 0, size=(240, 320)) -> list[Path]:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(count):
        img = random_image(rng, size)
        p = root / f"img_{i:04d}.png"
        cv2.imwrite(str(p), cv2.cvtColor((img * 255).round().astype(np.uint8), cv2.COLOR_RGB2BGR))
        paths.append(p)
    return paths


def write_hpatches_like(root, num_scenes: int = 3, targets: int = 5, seed: int = 0, size=(240, 320),
                        params: HomographyParams | None = None) -> list[Path]:
    """Scenes ``<root>/<scene>/1.png .. N.png`` with ``H_1_k`` ground truth files."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    params = params or HomographyParams(scale=(0.9, 1.1), rotation=(-0.2, 0.2), perspective=0.05)
    scenes = []
    for s in range(num_scenes):
        scene = root / f"v_synthetic{s}"
        scene.mkdir(parents=True, exist_ok=True)
        ref = random_image(rng, size)
        cv2.imwrite(str(scene / "1.png"), cv2.cvtColor((ref * 255).round().astype(np.uint8), cv2.COLOR_RGB2BGR))
        for k in range(2, targets + 2):
            hom = sample_homography(params, size, rng.integers(1 << 31))
            tgt = warp_image(hom, ref)
            cv2.imwrite(str(scene / f"{k}.png"),
                        cv2.cvtColor((tgt * 255).round().astype(np.uint8), cv2.COLOR_RGB2BGR))
            write_homography(scene / f"H_1_{k}", hom)
        scenes.append(scene)
    return scenes
