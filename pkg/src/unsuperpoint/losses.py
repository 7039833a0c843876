"""The four training losses and their weighted total.

Every term is a plain sum over points or point-pairs; the weights were tuned
against sums, so nothing here averages.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, fields

import torch

from .siamese import CorrespondenceSet


@dataclass(frozen=True)
class LossWeights:
    alpha_usp: float = 1.0
    alpha_position: float = 1.0
    alpha_score: float = 2.0
    alpha_uni_xy: float = 100.0
    alpha_desc: float = 0.001
    alpha_decorr: float = 0.03
    m_p: float = 1.0
    m_n: float = 0.2
    lambda_d: float = 250.0

    def __post_init__(self):
        for f in fields(self):
            if f.name.startswith("alpha") and getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


@dataclass
class LossBreakdown:
    usp: torch.Tensor
    position_term: torch.Tensor
    score_term: torch.Tensor
    usp_term: torch.Tensor
    uni_xy: torch.Tensor
    desc: torch.Tensor
    decorr: torch.Tensor
    total: torch.Tensor
    num_pairs: int
    correspondence_free: bool = False

    def as_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        return {k: float(v.detach()) if isinstance(v, torch.Tensor) else v for k, v in out.items()}

    def __add__(self, other: "LossBreakdown") -> "LossBreakdown":
        kw = {}
        for f in fields(self):
            a, b = getattr(self, f.name), getattr(other, f.name)
            kw[f.name] = (a or b) if f.name == "correspondence_free" else a + b
        return LossBreakdown(**kw)


def usp_loss(distances: torch.Tensor, scores_a: torch.Tensor, scores_b: torch.Tensor,
             weights: LossWeights = LossWeights()):
    """Unsupervised point loss over K pairs.

    Returns ``(usp, position_term, score_term, usp_term)``; all zero when K = 0.
    """
    if distances.numel() == 0:
        zero = distances.new_zeros(())
        return zero, zero, zero, zero
    position_term = distances.sum()
    score_term = ((scores_a - scores_b) ** 2).sum()
    joint = (scores_a + scores_b) / 2
    usp_term = (joint * (distances - distances.mean())).sum()
    usp = weights.alpha_position * position_term + weights.alpha_score * score_term + usp_term
    return usp, position_term, score_term, usp_term


def uniform_distance(values: torch.Tensor, a: float = 0.0, b: float = 1.0) -> torch.Tensor:
    """Squared distance between sorted ``values`` (rescaled from [a, b]) and the 0..1 diagonal."""
    n = values.shape[-1]
    if n < 2:
        raise ValueError("need at least two values")
    if not b > a:
        raise ValueError("interval upper bound must exceed the lower bound")
    ordered = torch.sort(values, dim=-1, stable=True).values
    line = torch.arange(n, dtype=values.dtype, device=values.device) / (n - 1)
    return (((ordered - a) / (b - a) - line) ** 2).sum(-1)


def uni_xy_loss(relative_a: torch.Tensor, relative_b: torch.Tensor) -> torch.Tensor:
    """Uniformity of in-cell x and y predictions, summed over both branches.

    Inputs are (M, 2) relative positions. The alpha factor is applied by
    :func:`total_loss` only.
    """
    return sum(uniform_distance(rel[:, axis]) for rel in (relative_a, relative_b) for axis in (0, 1))


def descriptor_loss(desc_a: torch.Tensor, desc_b: torch.Tensor, corr: torch.Tensor,
                    weights: LossWeights = LossWeights()) -> torch.Tensor:
    dot = desc_a @ desc_b.T
    pos = weights.lambda_d * corr * torch.clamp(weights.m_p - dot, min=0)
    neg = (1 - corr) * torch.clamp(dot - weights.m_n, min=0)
    return (pos + neg).sum()


def correlation_matrix(desc: torch.Tensor) -> torch.Tensor:
    """Pearson correlation between descriptor dimensions (columns of an (M, F) matrix).

    Rows and columns of zero-variance dimensions are set to 0.
    """
    centered = desc - desc.mean(0, keepdim=True)
    cov = centered.T @ centered
    var = torch.diagonal(cov)
    ok = var > 0
    if not bool(ok.all()):
        warnings.warn(f"{int((~ok).sum())} descriptor dimension(s) have zero variance; "
                      "their correlations are taken as 0", RuntimeWarning, stacklevel=3)
    std = torch.sqrt(torch.where(ok, var, torch.ones_like(var)))
    r = cov / (std[:, None] * std[None, :])
    mask = ok[:, None] & ok[None, :]
    return torch.where(mask, r, torch.zeros_like(r))


def decorrelation_loss(desc_a: torch.Tensor, desc_b: torch.Tensor) -> torch.Tensor:
    """Sum of off-diagonal correlation coefficients of both branches."""
    total = desc_a.new_zeros(())
    for desc in (desc_a, desc_b):
        if desc.shape[0] < 2 or desc.shape[1] < 2:
            raise ValueError("decorrelation needs at least 2 points and 2 descriptor dimensions")
        r = correlation_matrix(desc)
        total = total + r.sum() - torch.diagonal(r).sum()
    return total


@dataclass
class BranchOutputs:
    """Unsorted outputs of one image in one branch."""

    scores: torch.Tensor       # (M,)
    positions: torch.Tensor    # (M, 2) pixels
    relative: torch.Tensor     # (M, 2)
    descriptors: torch.Tensor  # (M, F)


def total_loss(out_a: BranchOutputs, out_b: BranchOutputs, corr: CorrespondenceSet,
               weights: LossWeights = LossWeights()) -> LossBreakdown:
    """Weighted sum of the USP, uniformity, descriptor and decorrelation losses."""
    k = corr.num_pairs
    usp, position_term, score_term, usp_term = usp_loss(
        corr.distances, out_a.scores[corr.idx_a], out_b.scores[corr.idx_b], weights)
    uni = uni_xy_loss(out_a.relative, out_b.relative)
    desc = descriptor_loss(out_a.descriptors, out_b.descriptors, corr.corr, weights)
    decorr = decorrelation_loss(out_a.descriptors, out_b.descriptors)
    total = (weights.alpha_usp * usp + weights.alpha_uni_xy * uni
             + weights.alpha_desc * desc + weights.alpha_decorr * decorr)
    return LossBreakdown(usp, position_term, score_term, usp_term, uni, desc, decorr, total,
                         num_pairs=k, correspondence_free=k == 0)
