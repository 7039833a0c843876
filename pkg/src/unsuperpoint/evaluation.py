"""Detector-agnostic evaluation: NMS, top-N, matching, RANSAC and HPatches-style metrics."""
from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import cv2
import numpy as np
from scipy.spatial.distance import cdist

from .geometry import (DegenerateHomographyError, Homography, homography_corner_error, inside_frame,
                       read_homography, transform_points)
from .model import PointSet

logger = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1


@dataclass
class EvalConfig:
    rho: float = 3.0
    n_points: int = 300
    nms_radius: float | None = None
    ha_tolerances: tuple[float, ...] = (1.0, 3.0, 5.0)
    ransac_threshold: float = 3.0
    ransac_iters: int = 2000
    ransac_confidence: float = 0.995
    ransac_method: str = "ransac"
    resolution: tuple[int, int] = (240, 320)
    seed: int = 0

    def __post_init__(self):
        self.ha_tolerances = tuple(float(t) for t in self.ha_tolerances)
        self.resolution = tuple(int(v) for v in self.resolution)


# point selection ----------------------------------------------------------


def nms(points: PointSet, radius: float) -> PointSet:
    """Greedy suppression in score order using the Chebyshev (grid) distance.

    A point is kept iff no already-kept point lies within ``radius``.
    """
    if radius is None or len(points) == 0:
        return points
    pos = np.asarray(points.positions, dtype=np.float64)
    alive = np.ones(len(pos), dtype=bool)
    keep = []
    for i in range(len(pos)):
        if not alive[i]:
            continue
        keep.append(i)
        near = np.max(np.abs(pos[i + 1:] - pos[i]), axis=1) <= radius
        alive[i + 1:] &= ~near
    return points.take(np.asarray(keep, dtype=np.int64))


def select_top_n(points: PointSet, n: int) -> PointSet:
    return points.take(slice(0, min(n, len(points))))


def sort_by_score(points: PointSet) -> PointSet:
    order = np.argsort(-np.asarray(points.scores), kind="stable")
    return points.take(order)


def apply_protocol(points: PointSet, n: int, nms_radius=None) -> PointSet:
    """NMS first (when enabled), then the top ``n`` points."""
    points = sort_by_score(points)
    if nms_radius is not None:
        points = nms(points, nms_radius)
    return select_top_n(points, n)


# matching and homography estimation ----------------------------------------


def match_descriptors(desc_ref, desc_tgt) -> np.ndarray:
    """Mutual nearest neighbours under Euclidean distance, as a (K, 2) index array."""
    desc_ref = np.asarray(desc_ref, dtype=np.float64)
    desc_tgt = np.asarray(desc_tgt, dtype=np.float64)
    if len(desc_ref) == 0 or len(desc_tgt) == 0:
        return np.zeros((0, 2), dtype=np.int64)
    d = cdist(desc_ref, desc_tgt, "sqeuclidean")
    fwd = np.argmin(d, axis=1)
    bwd = np.argmin(d, axis=0)
    ref_idx = np.arange(len(desc_ref))
    mutual = bwd[fwd] == ref_idx
    return np.stack([ref_idx[mutual], fwd[mutual]], axis=1).astype(np.int64)


def _hartley(pts: np.ndarray):
    c = pts.mean(0)
    d = np.sqrt(((pts - c) ** 2).sum(1)).mean()
    s = math.sqrt(2) / d if d > 0 else 1.0
    t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1.0]])
    return (pts - c) * s, t


def dlt_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized DLT fit of ``dst ~ H src`` from >= 4 correspondences."""
    sn, ts = _hartley(src)
    dn, td = _hartley(dst)
    n = len(src)
    a = np.zeros((2 * n, 9))
    x, y = sn[:, 0], sn[:, 1]
    u, v = dn[:, 0], dn[:, 1]
    a[0::2, 0], a[0::2, 1], a[0::2, 2] = x, y, 1
    a[0::2, 6], a[0::2, 7], a[0::2, 8] = -u * x, -u * y, -u
    a[1::2, 3], a[1::2, 4], a[1::2, 5] = x, y, 1
    a[1::2, 6], a[1::2, 7], a[1::2, 8] = -v * x, -v * y, -v
    hn = np.linalg.svd(a)[2][-1].reshape(3, 3)
    return np.linalg.inv(td) @ hn @ ts


def _collinear(pts: np.ndarray, tol: float = 1e-6) -> bool:
    scale = max(np.ptp(pts, axis=0).max(), 1.0)
    for i, j, k in ((0, 1, 2), (0, 1, 3), (0, 2, 3), (1, 2, 3)):
        d1, d2 = pts[j] - pts[i], pts[k] - pts[i]
        if abs(d1[0] * d2[1] - d1[1] * d2[0]) < tol * scale * scale:
            return True
    return False


def _reprojection_error(m: np.ndarray, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    hom = src @ m[:, :2].T + m[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = hom[:, :2] / hom[:, 2:3]
        err = np.linalg.norm(proj - dst, axis=1)
    return np.where(np.isfinite(err), err, np.inf)


@dataclass
class HomographyEstimate:
    homography: Homography | None
    inliers: np.ndarray  # bool mask over the input matches

    @property
    def success(self) -> bool:
        return self.homography is not None


def estimate_homography(matches, positions_ref, positions_tgt, ransac_threshold: float = 3.0,
                        max_iters: int = 2000, confidence: float = 0.995, seed=0,
                        method: str = "ransac") -> HomographyEstimate:
    """Robust homography from matched positions plus the matches that agree with it.

    ``method="ransac"`` is a seeded 4-point RANSAC with a normalized-DLT refit on
    the consensus set; ``method="opencv"`` defers to ``cv2.findHomography``.
    Fewer than 4 matches or no non-degenerate consensus gives a failed estimate.
    """
    matches = np.asarray(matches, dtype=np.int64).reshape(-1, 2)
    n = len(matches)
    fail = HomographyEstimate(None, np.zeros(n, dtype=bool))
    if n < 4:
        return fail
    src = np.asarray(positions_ref, dtype=np.float64)[matches[:, 0]]
    dst = np.asarray(positions_tgt, dtype=np.float64)[matches[:, 1]]

    if method == "opencv":
        m, mask = cv2.findHomography(src, dst, cv2.RANSAC, ransac_threshold,
                                     maxIters=max_iters, confidence=confidence)
        if m is None:
            return fail
        try:
            return HomographyEstimate(Homography(m), mask.ravel().astype(bool))
        except DegenerateHomographyError:
            return fail
    if method != "ransac":
        raise ValueError(f"unknown estimation method {method!r}")

    rng = np.random.default_rng(seed)
    best_mask, best_count, best_err = None, 0, np.inf
    needed, it = max_iters, 0
    while it < needed:
        it += 1
        sample = rng.choice(n, 4, replace=False)
        if _collinear(src[sample]) or _collinear(dst[sample]):
            continue
        m = dlt_homography(src[sample], dst[sample])
        if not np.all(np.isfinite(m)) or abs(np.linalg.det(m)) < 1e-12:
            continue
        err = _reprojection_error(m, src, dst)
        mask = err <= ransac_threshold
        count = int(mask.sum())
        score = float(np.sum(np.minimum(err, ransac_threshold)))
        if count > best_count or (count == best_count and count and score < best_err):
            best_mask, best_count, best_err = mask, count, score
            ratio = count / n
            if ratio >= 1.0:
                needed = it
            elif ratio > 0:
                k = math.log(1 - confidence) / math.log(1 - ratio ** 4)
                needed = min(max_iters, max(it, int(math.ceil(k))))
    if best_mask is None or best_count < 4:
        return fail

    mask = best_mask
    m = None
    for _ in range(10):
        candidate = dlt_homography(src[mask], dst[mask])
        if not np.all(np.isfinite(candidate)):
            break
        m = candidate
        new_mask = _reprojection_error(m, src, dst) <= ransac_threshold
        if new_mask.sum() < 4 or np.array_equal(new_mask, mask):
            break
        mask = new_mask
    if m is None:
        return fail
    try:
        return HomographyEstimate(Homography(m), mask)
    except DegenerateHomographyError:
        return fail


# metrics -----------------------------------------------------------------------


@dataclass
class RepeatabilityResult:
    repeatability: float
    localization_error: float
    shared_ref: int
    shared_tgt: int


def shared_view_masks(pos_ref, pos_tgt, h_gt: Homography, size_ref, size_tgt=None):
    size_tgt = size_tgt or size_ref
    keep_ref = inside_frame(transform_points(h_gt, pos_ref), size_tgt)
    keep_tgt = inside_frame(transform_points(h_gt.inverse(), pos_tgt), size_ref)
    return keep_ref, keep_tgt


def repeatability(points_ref, points_tgt, h_gt: Homography, rho: float = 3.0, image_size=(240, 320),
                  image_size_tgt=None) -> RepeatabilityResult:
    """Two-view repeatability and localization error of (N, 2) point positions.

    Only points visible in both frames take part. In each view a point counts
    as repeated when a point of the other image, mapped into that view, lies
    closer than ``rho``. Both metrics average the two views.
    """
    size_tgt = image_size_tgt or image_size
    pos_ref = np.asarray(points_ref, dtype=np.float64).reshape(-1, 2)
    pos_tgt = np.asarray(points_tgt, dtype=np.float64).reshape(-1, 2)
    keep_ref, keep_tgt = shared_view_masks(pos_ref, pos_tgt, h_gt, image_size, size_tgt)
    n_ref, n_tgt = int(keep_ref.sum()), int(keep_tgt.sum())
    if n_ref == 0 or n_tgt == 0:
        logger.warning("no points in the shared view; repeatability undefined")
        return RepeatabilityResult(math.nan, math.nan, n_ref, n_tgt)
    ref, tgt = pos_ref[keep_ref], pos_tgt[keep_tgt]
    ref_in_tgt = transform_points(h_gt, ref)
    tgt_in_ref = transform_points(h_gt.inverse(), tgt)

    ratios, errors = [], []
    for mapped, native in ((ref_in_tgt, tgt), (tgt_in_ref, ref)):
        nearest = cdist(mapped, native).min(axis=1)
        hit = nearest < rho
        ratios.append(hit.mean())
        if hit.any():
            errors.append(nearest[hit].mean())
    le = float(np.mean(errors)) if errors else math.nan
    return RepeatabilityResult(float(np.mean(ratios)), le, n_ref, n_tgt)


def matching_score(matches, positions_ref, positions_tgt, h_gt: Homography, rho: float = 3.0,
                   shared_counts=None, image_size=(240, 320), image_size_tgt=None) -> float:
    """Correct matches over the mean shared-view point count of the two images.

    A match is correct when both points are in the shared view and the reference
    point, mapped by ``h_gt``, lands closer than ``rho`` to its partner.
    """
    pos_ref = np.asarray(positions_ref, dtype=np.float64).reshape(-1, 2)
    pos_tgt = np.asarray(positions_tgt, dtype=np.float64).reshape(-1, 2)
    keep_ref, keep_tgt = shared_view_masks(pos_ref, pos_tgt, h_gt, image_size, image_size_tgt)
    if shared_counts is None:
        shared_counts = (int(keep_ref.sum()), int(keep_tgt.sum()))
    denom = 0.5 * (shared_counts[0] + shared_counts[1])
    if denom == 0:
        return math.nan
    matches = np.asarray(matches, dtype=np.int64).reshape(-1, 2)
    if len(matches) == 0:
        return 0.0
    i, j = matches[:, 0], matches[:, 1]
    dist = np.linalg.norm(transform_points(h_gt, pos_ref[i]) - pos_tgt[j], axis=1)
    correct = keep_ref[i] & keep_tgt[j] & (dist < rho)
    return float(correct.sum()) / denom


def homography_accuracy(errors, tolerances=(1.0, 3.0, 5.0)) -> dict[float, float]:
    """Fraction of pairs whose corner error is within each tolerance; NaN/inf count as failures."""
    errs = np.asarray([math.inf if e is None else e for e in errors], dtype=np.float64)
    errs = np.where(np.isfinite(errs), errs, np.inf)
    if errs.size == 0:
        return {float(t): math.nan for t in tolerances}
    return {float(t): float(np.mean(errs <= t)) for t in tolerances}


# detections interchange -------------------------------------------------------

DETECTION_MAGIC = b"USPD"
DETECTION_VERSION = 1
_HEADER = struct.Struct("<4sIII")


def write_detections(path, points: PointSet, binary: bool = False) -> Path:
    """Write N x (x, y, score) plus N x F descriptors.

    Text: ``# unsuperpoint-detections v1``, then ``N F``, then one line per point
    ``x y score d_1 .. d_F``. Binary (little-endian): 4-byte magic ``USPD``,
    uint32 version, uint32 N, uint32 F, N x 3 float32 (x, y, score), then N x F
    float32 descriptors row-major.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ps = points.numpy()
    pos = np.asarray(ps.positions, dtype=np.float64).reshape(-1, 2)
    scores = np.asarray(ps.scores, dtype=np.float64).reshape(-1)
    desc = np.asarray(ps.descriptors, dtype=np.float64).reshape(len(scores), -1)
    n, f = desc.shape
    if binary:
        with open(path, "wb") as fh:
            fh.write(_HEADER.pack(DETECTION_MAGIC, DETECTION_VERSION, n, f))
            fh.write(np.column_stack([pos, scores]).astype("<f4").tobytes())
            fh.write(desc.astype("<f4").tobytes())
    else:
        with open(path, "w") as fh:
            fh.write(f"# unsuperpoint-detections v{DETECTION_VERSION}\n{n} {f}\n")
            for p, s, d in zip(pos, scores, desc):
                fh.write(" ".join(f"{v:.9g}" for v in (p[0], p[1], s, *d)) + "\n")
    return path


def read_detections(path, image_size=None) -> PointSet:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == DETECTION_MAGIC:
        data = path.read_bytes()
        _, version, n, f = _HEADER.unpack_from(data)
        if version != DETECTION_VERSION:
            raise ValueError(f"{path}: unsupported detection version {version}")
        off = _HEADER.size
        rec = np.frombuffer(data, "<f4", n * 3, off).reshape(n, 3).astype(np.float64)
        desc = np.frombuffer(data, "<f4", n * f, off + n * 12).reshape(n, f).astype(np.float64)
    else:
        lines = [ln for ln in path.read_text().splitlines() if ln.strip() and not ln.startswith("#")]
        n, f = (int(v) for v in lines[0].split())
        body = np.array([[float(v) for v in ln.split()] for ln in lines[1:1 + n]]).reshape(n, 3 + f)
        rec, desc = body[:, :3], body[:, 3:]
    return PointSet(rec[:, 2], rec[:, :2], desc, tuple(image_size) if image_size else None)


# datasets and detectors -----------------------------------------------------------

IMAGE_SUFFIXES = (".ppm", ".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


@dataclass
class Scene:
    name: str
    reference: Path
    targets: list  # [(index, image path, Homography)]


def _find_image(scene_dir: Path, index: int):
    for suffix in IMAGE_SUFFIXES:
        p = scene_dir / f"{index}{suffix}"
        if p.exists():
            return p
    return None


def discover_scenes(root) -> tuple[list[Scene], list[str]]:
    """HPatches layout: ``<scene>/1.<ext> .. 6.<ext>`` with ``H_1_k`` files.

    Returns usable scenes and a list of skip annotations for malformed ones.
    """
    scenes, skipped = [], []
    for d in sorted(p for p in Path(root).iterdir() if p.is_dir()):
        ref = _find_image(d, 1)
        if ref is None:
            skipped.append(f"{d.name}: missing reference image")
            continue
        targets = []
        for hfile in sorted(d.glob("H_1_*"), key=lambda p: int(p.name.split("_")[-1])):
            k = int(hfile.name.split("_")[-1])
            img = _find_image(d, k)
            if img is None:
                skipped.append(f"{d.name}: missing image {k}")
                continue
            try:
                targets.append((k, img, read_homography(hfile)))
            except (ValueError, DegenerateHomographyError) as exc:
                skipped.append(f"{d.name}: bad homography {hfile.name} ({exc})")
        if not targets:
            skipped.append(f"{d.name}: no usable targets")
            continue
        scenes.append(Scene(d.name, ref, targets))
    return scenes, skipped


def resize_homography(h: Homography, size_ref_native, size_tgt_native, resolution) -> Homography:
    """Adjust ``h`` for resizing both images to ``resolution`` (pixel-center aligned)."""

    def scaling(native):
        sy, sx = resolution[0] / native[0], resolution[1] / native[1]
        return np.array([[sx, 0, 0.5 * sx - 0.5], [0, sy, 0.5 * sy - 0.5], [0, 0, 1.0]])

    return Homography(scaling(size_tgt_native) @ h.matrix @ np.linalg.inv(scaling(size_ref_native)))


def load_eval_image(path, resolution):
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise OSError(f"cannot read image {path}")
    native = raw.shape[:2]
    rgb = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    if resolution is not None and tuple(native) != tuple(resolution):
        rgb = cv2.resize(rgb, (resolution[1], resolution[0]), interpolation=cv2.INTER_AREA)
    return rgb.astype(np.float32) / 255.0, native


# A detector maps (image in [0, 1], key "<scene>/<index>") to a PointSet with numpy arrays.
Detector = Callable[[np.ndarray, str], PointSet]


class ModelDetector:
    def __init__(self, model, normalization: str = "multiply"):
        self.model = model
        self.normalization = normalization

    def __call__(self, image: np.ndarray, key: str = "") -> PointSet:
        from .model import detect_points
        from .training import normalize_image

        return detect_points(self.model, normalize_image(image, self.normalization))


class FileDetector:
    """Reads precomputed detections from ``<root>/<scene>/<index>.{txt,bin}``."""

    def __init__(self, root):
        self.root = Path(root)

    def __call__(self, image: np.ndarray, key: str) -> PointSet:
        for suffix in (".txt", ".bin"):
            p = self.root / f"{key}{suffix}"
            if p.exists():
                ps = read_detections(p, image.shape[:2])
                return ps
        raise FileNotFoundError(f"no detections for {key} under {self.root}")


# benchmark -------------------------------------------------------------------------


@dataclass
class PairRecord:
    scene: str
    target: int
    repeatability: float
    localization_error: float
    matching_score: float
    homography_error: float
    num_matches: int
    num_inliers: int
    num_ref: int
    num_tgt: int


@dataclass
class EvalReport:
    repeatability: float
    localization_error: float
    matching_score: float
    ha: dict
    num_pairs: int
    pairs: list = field(default_factory=list)
    skipped: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    name: str = ""
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict:
        d = asdict(self)
        d["ha"] = {str(k): v for k, v in self.ha.items()}
        return d

    def to_json(self, path=None) -> str:
        text = json.dumps(self.to_dict(), indent=2, allow_nan=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        version = d.get("schema_version")
        if version != REPORT_SCHEMA_VERSION:
            raise ValueError(f"report schema version {version!r} != {REPORT_SCHEMA_VERSION}")
        d = dict(d)
        d["ha"] = {float(k): v for k, v in d["ha"].items()}
        d["pairs"] = [PairRecord(**p) for p in d.get("pairs", [])]
        return cls(**d)

    @classmethod
    def load(cls, path) -> "EvalReport":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except ValueError as exc:
            raise ValueError(f"{path}: {exc}") from None

    def to_text(self) -> str:
        lines = [f"report {self.name}".rstrip(), f"pairs: {self.num_pairs}",
                 f"repeatability: {self.repeatability:.3f}",
                 f"localization_error: {self.localization_error:.3f}",
                 f"matching_score: {self.matching_score:.3f}"]
        lines += [f"ha@{t:g}: {v:.3f}" for t, v in self.ha.items()]
        lines += [f"skipped: {s}" for s in self.skipped]
        return "\n".join(lines) + "\n"


def evaluate_pair(ps_ref: PointSet, ps_tgt: PointSet, h_gt: Homography, config: EvalConfig,
                  size_ref, size_tgt, seed=0) -> dict:
    """Metrics for one reference/target pair of already-selected point sets."""
    rep = repeatability(ps_ref.positions, ps_tgt.positions, h_gt, config.rho, size_ref, size_tgt)
    matches = match_descriptors(ps_ref.descriptors, ps_tgt.descriptors)
    est = estimate_homography(matches, ps_ref.positions, ps_tgt.positions, config.ransac_threshold,
                              config.ransac_iters, config.ransac_confidence, seed, config.ransac_method)
    he = homography_corner_error(h_gt, est.homography, size_ref)
    ms = matching_score(matches, ps_ref.positions, ps_tgt.positions, h_gt, config.rho,
                        (rep.shared_ref, rep.shared_tgt), size_ref, size_tgt)
    return dict(repeatability=rep.repeatability, localization_error=rep.localization_error,
                matching_score=ms, homography_error=he, num_matches=len(matches),
                num_inliers=int(est.inliers.sum()), estimate=est, matches=matches)


def _nanmean(values) -> float:
    arr = np.asarray(values, dtype=np.float64)
    arr = arr[np.isfinite(arr)]
    return float(arr.mean()) if arr.size else math.nan


def run_benchmark(detector: Detector, dataset, config: EvalConfig | None = None, name: str = "") -> EvalReport:
    """Evaluate ``detector`` on every reference-to-target pair of ``dataset``.

    ``dataset`` is a directory in HPatches layout or a list of :class:`Scene`.
    RS, LE and MS average over pairs where they are defined; HA counts every pair.
    """
    config = config or EvalConfig()
    if isinstance(dataset, (str, Path)):
        scenes, skipped = discover_scenes(dataset)
    else:
        scenes, skipped = list(dataset), []
    records = []
    for scene in scenes:
        try:
            ref_img, ref_native = load_eval_image(scene.reference, config.resolution)
            ps_ref = apply_protocol(detector(ref_img, f"{scene.name}/1"), config.n_points, config.nms_radius)
        except (OSError, FileNotFoundError, ValueError) as exc:
            skipped.append(f"{scene.name}: {exc}")
            continue
        for k, path, h_native in scene.targets:
            try:
                tgt_img, tgt_native = load_eval_image(path, config.resolution)
                ps_tgt = apply_protocol(detector(tgt_img, f"{scene.name}/{k}"), config.n_points,
                                        config.nms_radius)
            except (OSError, FileNotFoundError, ValueError) as exc:
                skipped.append(f"{scene.name}/{k}: {exc}")
                continue
            h_gt = resize_homography(h_native, ref_native, tgt_native, ref_img.shape[:2]) \
                if config.resolution is not None else h_native
            res = evaluate_pair(ps_ref, ps_tgt, h_gt, config, ref_img.shape[:2], tgt_img.shape[:2],
                                seed=[config.seed, len(records)])
            records.append(PairRecord(scene.name, k, res["repeatability"], res["localization_error"],
                                      res["matching_score"], res["homography_error"], res["num_matches"],
                                      res["num_inliers"], len(ps_ref), len(ps_tgt)))
    cfg = asdict(config)
    return EvalReport(
        repeatability=_nanmean([r.repeatability for r in records]),
        localization_error=_nanmean([r.localization_error for r in records]),
        matching_score=_nanmean([r.matching_score for r in records]),
        ha=homography_accuracy([r.homography_error for r in records], config.ha_tolerances),
        num_pairs=len(records), pairs=records, skipped=skipped, config=cfg, name=name,
    )


def augmentation_repeatability(detector: Detector, images, homography_params, photometric_params,
                               seeds, n_points: int = 100, rho: float = 3.0, nms_radius=None) -> float:
    """Mean two-view repeatability over synthetic pairs built like the training pairs.

    Each image is paired with its own warp under a homography drawn from
    ``seeds``, so passing seeds unused during training gives held-out views.
    """
    from .siamese import make_branch_pair

    values = []
    for img, seed in zip(images, seeds):
        pair = make_branch_pair(img, homography_params, photometric_params, seed)
        ps_a = apply_protocol(detector(pair.image_a, ""), n_points, nms_radius)
        ps_b = apply_protocol(detector(pair.image_b, ""), n_points, nms_radius)
        res = repeatability(ps_a.positions, ps_b.positions, pair.homography, rho, img.shape[:2])
        values.append(res.repeatability)
    return _nanmean(values)


def export_report(reports: list[EvalReport]) -> tuple[str, dict]:
    """Aligned comparison table across runs plus its machine-readable form.

    The best value of each metric column carries a ``*``.
    """
    if not reports:
        raise ValueError("need at least one report")
    tols = sorted({t for r in reports for t in r.ha})
    columns = [("RS", "repeatability", max), ("LE", "localization_error", min)]
    columns += [(f"HA@{t:g}", ("ha", t), max) for t in tols]
    columns += [("MS", "matching_score", max)]

    def value(rep, key):
        if isinstance(key, tuple):
            return rep.ha.get(key[1], math.nan)
        return getattr(rep, key)

    names = [r.name or f"run{i}" for i, r in enumerate(reports)]
    cells = [[value(r, key) for _, key, _ in columns] for r in reports]
    best = []
    for c, (_, _, pick) in enumerate(columns):
        finite = [row[c] for row in cells if math.isfinite(row[c])]
        best.append(pick(finite) if finite and len(reports) > 1 else None)

    header = ["detector", "pairs"] + [c[0] for c in columns]
    rows = []
    for name, rep, row in zip(names, reports, cells):
        out = [name, str(rep.num_pairs)]
        for c, v in enumerate(row):
            mark = "*" if best[c] is not None and v == best[c] else ""
            out.append(f"{v:.3f}{mark}")
        rows.append(out)
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    fmt = lambda r: "  ".join(s.ljust(w) if i == 0 else s.rjust(w) for i, (s, w) in enumerate(zip(r, widths)))
    lines = [fmt(header), "  ".join("-" * w for w in widths)] + [fmt(r) for r in rows]
    machine = {
        "schema_version": REPORT_SCHEMA_VERSION,
        "columns": header[2:],
        "rows": [{"detector": n, "pairs": r.num_pairs, **{h: v for h, v in zip(header[2:], row)}}
                 for n, r, row in zip(names, reports, cells)],
    }
    return "\n".join(lines) + "\n", machine
