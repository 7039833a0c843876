"""Independent reference implementations and oracle fixtures shared by the tests."""
import math

import numpy as np

from unsuperpoint.evaluation import discover_scenes
from unsuperpoint.geometry import inside_frame, transform_points
from unsuperpoint.model import PointSet
from unsuperpoint.synthetic import write_hpatches_like


def brute_repeatability(ref, tgt, h, rho, size):
    """Loop-based two-view repeatability / localization error."""
    h_inv = h.inverse()

    def visible(points, hom):
        out = []
        for p in points:
            q = transform_points(hom, np.asarray([p], float))[0]
            if 0 <= q[0] < size[1] and 0 <= q[1] < size[0]:
                out.append(p)
        return out

    ref_v, tgt_v = visible(ref, h), visible(tgt, h_inv)
    ratios, errors = [], []
    for src, dst, hom in ((ref_v, tgt_v, h), (tgt_v, ref_v, h_inv)):
        hits, dists = 0, []
        for p in src:
            q = transform_points(hom, np.asarray([p], float))[0]
            best = min(math.dist(q, d) for d in dst)
            if best < rho:
                hits += 1
                dists.append(best)
        ratios.append(hits / len(src))
        if dists:
            errors.append(sum(dists) / len(dists))
    return sum(ratios) / 2, (sum(errors) / len(errors) if errors else math.nan), len(ref_v), len(tgt_v)


def oracle_points(size, step=24, margin=40):
    h, w = size
    ys, xs = np.mgrid[margin:h - margin:step, margin:w - margin:step]
    return np.stack([xs.ravel(), ys.ravel()], 1).astype(np.float64)


class OracleDetector:
    """Knows the ground truth: reports the same world points in every view with one-hot descriptors."""

    def __init__(self, dataset_root, size, shuffle_seed=None):
        self.scenes = {s.name: s for s in discover_scenes(dataset_root)[0]}
        self.size = size
        self.base = oracle_points(size)
        self.shuffle = None if shuffle_seed is None else np.random.default_rng(shuffle_seed)

    def __call__(self, image, key):
        scene, index = key.split("/")
        n = len(self.base)
        eye = np.eye(n)
        scores = np.linspace(1.0, 0.5, n)
        if index == "1":
            return PointSet(scores, self.base.copy(), eye, self.size)
        h = next(hom for k, _, hom in self.scenes[scene].targets if str(k) == index)
        pos = transform_points(h, self.base)
        keep = inside_frame(pos, self.size)
        desc = eye[keep]
        if self.shuffle is not None:
            desc = desc[self.shuffle.permutation(len(desc))]
        return PointSet(scores[keep], pos[keep], desc, self.size)


def make_oracle_dataset(root, size=(240, 320), num_scenes=3, targets=5, seed=0):
    write_hpatches_like(root, num_scenes=num_scenes, targets=targets, seed=seed, size=size)
    return root
