"""Siamese training loop, image corpus handling and diagnostic histograms."""
from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np
import torch

from .geometry import HomographyParams
from .losses import BranchOutputs, LossBreakdown, LossWeights, total_loss
from .model import ModelConfig, UnsuperPoint, flatten_heads, load_checkpoint, save_checkpoint
from .siamese import CORRESPOND_EPS, PhotometricParams, build_correspondences, make_branch_pair

logger = logging.getLogger(__name__)

IMAGE_EXTENSIONS = {".jpg", ".jpeg", ".png", ".bmp", ".tif", ".tiff", ".ppm", ".pgm", ".webp"}
HIST_BINS = 20


class TrainingError(RuntimeError):
    pass


def normalize_image(image: np.ndarray, mode: str = "multiply") -> np.ndarray:
    """Per-channel normalization of a [0, 1] image.

    ``multiply`` (default) scales the centered image by 0.225, ``divide`` divides by it.
    """
    image = np.asarray(image, dtype=np.float32)
    if mode == "multiply":
        return (image - 0.5) * np.float32(0.225)
    if mode == "divide":
        return (image - 0.5) / np.float32(0.225)
    raise ValueError(f"unknown normalization mode {mode!r}")


def list_images(root) -> list[Path]:
    root = Path(root)
    if root.is_file():
        return [root]
    return sorted(p for p in root.rglob("*") if p.suffix.lower() in IMAGE_EXTENSIONS and p.is_file())


def fit_to_resolution(image: np.ndarray, resolution) -> np.ndarray:
    """Resize to cover ``resolution`` (H, W) keeping aspect, then center-crop."""
    th, tw = resolution
    h, w = image.shape[:2]
    scale = max(th / h, tw / w)
    nh, nw = max(th, round(h * scale)), max(tw, round(w * scale))
    if (nh, nw) != (h, w):
        interp = cv2.INTER_AREA if scale < 1 else cv2.INTER_LINEAR
        image = cv2.resize(image, (nw, nh), interpolation=interp)
    top, left = (nh - th) // 2, (nw - tw) // 2
    return image[top:top + th, left:left + tw]


def load_image(path, resolution=None) -> np.ndarray:
    """Read an image as float32 RGB in [0, 1], optionally fitted to ``resolution``."""
    raw = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if raw is None:
        raise OSError(f"cannot read image {path}")
    rgb = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB)
    if resolution is not None:
        rgb = fit_to_resolution(rgb, resolution)
    return np.ascontiguousarray(rgb, dtype=np.float32) / 255.0


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 5
    resolution: tuple[int, int] = (240, 320)
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    seed: int = 0
    checkpoint_every: int = 1000
    corpus_path: str | None = None
    max_steps: int | None = None
    grad_clip: float | None = None
    correspond_eps: float = CORRESPOND_EPS
    normalization: str = "multiply"
    log_every: int = 10
    diagnostics_window: int = 20
    deterministic: bool = True
    cache_images: bool = False
    homography: HomographyParams = field(default_factory=HomographyParams)
    photometric: PhotometricParams = field(default_factory=PhotometricParams)

    def __post_init__(self):
        self.resolution = tuple(int(v) for v in self.resolution)
        self.betas = tuple(float(v) for v in self.betas)
        if self.resolution[0] % 8 or self.resolution[1] % 8:
            raise ValueError(f"training resolution must be multiples of 8, got {self.resolution}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if isinstance(d.get("homography"), dict):
            d["homography"] = HomographyParams(**{k: tuple(v) if isinstance(v, list) else v
                                                  for k, v in d["homography"].items()})
        if isinstance(d.get("photometric"), dict):
            d["photometric"] = PhotometricParams(**{k: tuple(v) for k, v in d["photometric"].items()})
        return cls(**d)


class DiagnosticsBuffer:
    """Rolling window of per-step samples used for the histogram diagnostics."""

    def __init__(self, window: int):
        self.window = {name: deque(maxlen=window) for name in ("distances", "scores", "relative_x", "relative_y")}

    def add(self, **arrays):
        for name, arr in arrays.items():
            self.window[name].append(np.asarray(arr, dtype=np.float64).ravel())

    def samples(self) -> dict[str, np.ndarray]:
        return {k: np.concatenate(list(v)) if v else np.zeros(0) for k, v in self.window.items()}


class Trainer:
    """Owns the model, the optimizer and the deterministic data schedule."""

    def __init__(self, config: TrainConfig, model_config: ModelConfig | None = None,
                 weights: LossWeights | None = None, images: list | None = None):
        self.config = config
        self.weights = weights or LossWeights()
        if config.deterministic:
            torch.use_deterministic_algorithms(True)
        torch.manual_seed(config.seed)
        self.model = UnsuperPoint(model_config or ModelConfig())
        self.optimizer = torch.optim.Adam(self.model.parameters(), lr=config.lr,
                                          betas=config.betas, eps=config.adam_eps)
        self.step = 0
        self.correspondence_free_batches = 0
        self.diagnostics = DiagnosticsBuffer(config.diagnostics_window)
        if images is not None:
            self.sources = list(images)
        elif config.corpus_path is not None:
            self.sources = list_images(config.corpus_path)
        else:
            self.sources = []
        self._cache: dict[int, np.ndarray] = {}

    # data schedule -------------------------------------------------------

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.sources) / self.config.batch_size)

    @property
    def total_steps(self) -> int:
        if self.config.max_steps is not None:
            return self.config.max_steps
        return self.config.epochs * self.steps_per_epoch

    def epoch_permutation(self, epoch: int) -> np.ndarray:
        return np.random.default_rng([self.config.seed, 7919, epoch]).permutation(len(self.sources))

    def batch_indices(self, step: int) -> np.ndarray:
        epoch, offset = divmod(step, self.steps_per_epoch)
        bs = self.config.batch_size
        return self.epoch_permutation(epoch)[offset * bs:(offset + 1) * bs]

    def get_image(self, index: int) -> np.ndarray:
        if index in self._cache:
            return self._cache[index]
        src = self.sources[index]
        if isinstance(src, np.ndarray):
            img = fit_to_resolution(np.asarray(src, dtype=np.float32), self.config.resolution)
        else:
            img = load_image(src, self.config.resolution)
        if self.config.cache_images:
            self._cache[index] = img
        return img

    # optimization ----------------------------------------------------------

    def compute_loss(self, images: list[np.ndarray], step: int) -> LossBreakdown:
        cfg = self.config
        pairs = [make_branch_pair(img, cfg.homography, cfg.photometric, [cfg.seed, step, k])
                 for k, img in enumerate(images)]
        batch = [normalize_image(p.image_a, cfg.normalization) for p in pairs]
        batch += [normalize_image(p.image_b, cfg.normalization) for p in pairs]
        x = torch.from_numpy(np.stack(batch)).permute(0, 3, 1, 2).contiguous()
        raw = self.model(x)
        flat = flatten_heads(raw, self.model.config, cfg.resolution)
        n = len(pairs)
        result = None
        for k, pair in enumerate(pairs):
            out_a = BranchOutputs(flat.scores[k], flat.positions[k], flat.relative[k], flat.descriptors[k])
            out_b = BranchOutputs(flat.scores[n + k], flat.positions[n + k], flat.relative[n + k],
                                  flat.descriptors[n + k])
            corr = build_correspondences(out_a.positions, out_b.positions, pair.homography,
                                         cfg.resolution, cfg.correspond_eps)
            part = total_loss(out_a, out_b, corr, self.weights)
            result = part if result is None else result + part
            self.diagnostics.add(
                distances=corr.distances.detach().numpy(),
                scores=torch.cat([out_a.scores, out_b.scores]).detach().numpy(),
                relative_x=torch.cat([out_a.relative[:, 0], out_b.relative[:, 0]]).detach().numpy(),
                relative_y=torch.cat([out_a.relative[:, 1], out_b.relative[:, 1]]).detach().numpy(),
            )
        return result

    def train_step(self) -> LossBreakdown:
        """One optimizer step on the batch scheduled for ``self.step``."""
        self.model.train()
        idx = self.batch_indices(self.step)
        images = [self.get_image(int(i)) for i in idx]
        breakdown = self.compute_loss(images, self.step)
        if not torch.isfinite(breakdown.total):
            raise TrainingError(f"non-finite loss at step {self.step} (batch {idx.tolist()}): "
                                f"{breakdown.as_dict()}")
        self.optimizer.zero_grad(set_to_none=True)
        breakdown.total.backward()
        if self.config.grad_clip:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), self.config.grad_clip)
        self.optimizer.step()
        if breakdown.correspondence_free:
            self.correspondence_free_batches += 1
            logger.warning("step %d: batch contains images without point-pairs", self.step)
        self.step += 1
        return breakdown

    def fit(self, out_dir=None, steps: int | None = None, callback=None) -> list[dict]:
        """Train until ``total_steps`` (or ``steps`` more), logging and checkpointing to ``out_dir``."""
        if not self.sources:
            raise TrainingError("training corpus is empty")
        out = Path(out_dir) if out_dir is not None else None
        log_file = None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            log_file = open(out / "loss_log.jsonl", "a")
        end = self.total_steps if steps is None else min(self.total_steps, self.step + steps)
        history = []
        try:
            while self.step < end:
                bd = self.train_step()
                record = {"step": self.step, **bd.as_dict()}
                history.append(record)
                if log_file is not None:
                    log_file.write(json.dumps(record) + "\n")
                    log_file.flush()
                if self.step % self.config.log_every == 0:
                    logger.info("step %d total %.4g usp %.4g uni %.4g desc %.4g decorr %.4g K %d",
                                self.step, record["total"], record["usp"], record["uni_xy"],
                                record["desc"], record["decorr"], record["num_pairs"])
                if out is not None and self.step % self.config.checkpoint_every == 0:
                    self.save(out / f"ckpt_{self.step}.pt")
                if callback is not None:
                    callback(self, record)
        finally:
            if log_file is not None:
                log_file.close()
        if out is not None:
            self.save(out / f"ckpt_{self.step}.pt")
            emit_diagnostics(self.diagnostics.samples(), out / "diagnostics")
        return history

    # persistence -------------------------------------------------------------

    def save(self, path) -> Path:
        extra = {
            "train_config": self.config.to_dict(),
            "loss_weights": asdict(self.weights),
            "correspondence_free_batches": self.correspondence_free_batches,
        }
        return save_checkpoint(path, self.model, self.step, self.optimizer, extra)

    def load(self, path) -> None:
        """Restore weights, optimizer moments and step counter from a checkpoint."""
        model, payload = load_checkpoint(path)
        self.model.load_state_dict(model.state_dict())
        if payload.get("optimizer") is not None:
            self.optimizer.load_state_dict(payload["optimizer"])
        self.step = payload["step"]
        self.correspondence_free_batches = payload["extra"].get("correspondence_free_batches", 0)


def train(config: TrainConfig, model_config: ModelConfig | None = None, weights: LossWeights | None = None,
          out_dir=None, resume=None) -> Path:
    trainer = Trainer(config, model_config, weights)
    if resume is not None:
        trainer.load(resume)
    trainer.fit(out_dir)
    out = Path(out_dir) if out_dir is not None else Path(".")
    return out / f"ckpt_{trainer.step}.pt"


# diagnostics -------------------------------------------------------------------

HIST_RANGES = {"distances": (0.0, CORRESPOND_EPS), "scores": (0.0, 1.0),
               "relative_x": (0.0, 1.0), "relative_y": (0.0, 1.0)}


def histogram(values, bins: int = HIST_BINS, value_range=(0.0, 1.0)):
    """Counts and edges; values outside the range are clipped into the end bins."""
    values = np.clip(np.asarray(values, dtype=np.float64).ravel(), *value_range)
    return np.histogram(values, bins=bins, range=value_range)


def boundary_mass(values, bins: int = HIST_BINS) -> float:
    """Fraction of [0, 1] values falling into the first or last histogram bin."""
    counts, _ = histogram(values, bins)
    total = counts.sum()
    return float(counts[0] + counts[-1]) / total if total else float("nan")


def emit_diagnostics(samples: dict, out_dir, bins: int = HIST_BINS) -> list[Path]:
    """Write a bin-count text file and a bar-chart PNG per sample array."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, values in samples.items():
        rng = HIST_RANGES.get(name, (float(np.min(values, initial=0)), float(np.max(values, initial=1))))
        counts, edges = histogram(values, bins, rng)
        txt = out / f"{name}_hist.txt"
        with open(txt, "w") as fh:
            fh.write(f"# {name}: {len(np.ravel(values))} samples\n# bin_lo bin_hi count\n")
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                fh.write(f"{lo:.6f} {hi:.6f} {int(c)}\n")
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", edgecolor="black")
        ax.set_xlabel(name)
        ax.set_ylabel("count")
        fig.tight_layout()
        png = out / f"{name}_hist.png"
        fig.savefig(png, dpi=80)
        plt.close(fig)
        written += [txt, png]
    return written


def read_loss_log(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


@torch.no_grad()
def collect_diagnostics(model: UnsuperPoint, images, homography_params: HomographyParams,
                        photometric_params: PhotometricParams, seeds, correspond_eps: float = CORRESPOND_EPS,
                        normalization: str = "multiply") -> dict[str, np.ndarray]:
    """Pair distances, scores and relative positions of ``model`` over augmented pairs (eval mode)."""
    was_training = model.training
    model.eval()
    buf = DiagnosticsBuffer(len(images))
    try:
        for img, seed in zip(images, seeds):
            pair = make_branch_pair(img, homography_params, photometric_params, seed)
            x = np.stack([normalize_image(pair.image_a, normalization), normalize_image(pair.image_b, normalization)])
            raw = model(torch.from_numpy(x).permute(0, 3, 1, 2).contiguous())
            flat = flatten_heads(raw, model.config, img.shape[:2])
            corr = build_correspondences(flat.positions[0], flat.positions[1], pair.homography,
                                         img.shape[:2], correspond_eps)
            buf.add(distances=corr.distances.numpy(), scores=flat.scores.numpy(),
                    relative_x=flat.relative[..., 0].numpy(), relative_y=flat.relative[..., 1].numpy())
    finally:
        model.train(was_training)
    return buf.samples()
