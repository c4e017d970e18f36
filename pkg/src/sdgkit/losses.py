"""Training objectives: pairwise contrastive terms, style reconstruction, BCE."""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from itertools import combinations
from typing import Sequence

import torch
import torch.nn.functional as F

from .model import resize

STYLE_MODES = ("literal", "margin")
DISTANCES = ("l1", "mean")
REC_NORMS = ("mse", "sum")


class NonFiniteLossError(FloatingPointError):
    """Raised when a loss component is NaN/inf; carries the offending report."""

    def __init__(self, component: str, report: "LossReport"):
        super().__init__(f"non-finite loss component {component!r}: {report.as_dict()}")
        self.component = component
        self.report = report


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 1.0
    lambda_str: float = 0.1
    lambda_sty: float = 0.1
    lambda_rec: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")


@dataclass
class LossReport:
    cls: torch.Tensor
    c_str: torch.Tensor
    c_sty: torch.Tensor
    rec: torch.Tensor
    total: torch.Tensor
    weights: LossWeights

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("cls", "c_str", "c_sty", "rec", "total")}


def _pair_distances(latents: Sequence[torch.Tensor], distance: str, clamp: float | None):
    if len(latents) != 3:
        raise ValueError("expected three latent batches (s, a, b)")
    shape = latents[0].shape
    if any(p.shape != shape for p in latents):
        raise ValueError(f"latent shape mismatch: {[tuple(p.shape) for p in latents]}")
    if distance not in DISTANCES:
        raise ValueError(f"unknown distance {distance!r}")
    out = []
    for i, j in combinations(range(3), 2):
        diff = (latents[i] - latents[j]).abs().reshape(shape[0], -1)
        d = diff.sum(dim=1) if distance == "l1" else diff.mean(dim=1)
        if clamp is not None and clamp > 0:
            d = d.clamp(max=clamp)
        out.append(d)
    return torch.stack(out, dim=1)  # N x 3


def contrastive_structure(p_s, p_a, p_b, distance: str = "l1", clamp: float | None = None) -> torch.Tensor:
    """Sum of distances over the three unordered branch pairs, averaged over the batch."""
    return _pair_distances((p_s, p_a, p_b), distance, clamp).sum(dim=1).mean()


def contrastive_style(
    q_s, q_a, q_b,
    mode: str = "literal",
    margin: float = 1.0,
    distance: str = "l1",
    clamp: float | None = None,
) -> torch.Tensor:
    """Push style latents apart.

    ``literal`` is the negated structure term and is unbounded below;
    ``margin`` sums ``max(0, margin - d)`` over pairs instead.
    """
    d = _pair_distances((q_s, q_a, q_b), distance, clamp)
    if mode == "literal":
        return -d.sum(dim=1).mean()
    if mode == "margin":
        return F.relu(margin - d).sum(dim=1).mean()
    raise ValueError(f"unknown style mode {mode!r}")


def reconstruction_loss(recons: Sequence[torch.Tensor], originals: Sequence[torch.Tensor], r: int,
                        norm: str = "mse") -> torch.Tensor:
    """Compare each reconstruction with its original resized to ``r x r``.

    ``mse`` averages over every element of a set; ``sum`` takes the squared
    norm per sample and averages over the batch.  Set contributions are summed.
    """
    if len(recons) != len(originals):
        raise ValueError("recons and originals must pair up")
    if norm not in REC_NORMS:
        raise ValueError(f"unknown reconstruction norm {norm!r}")
    total = 0.0
    for rec, orig in zip(recons, originals):
        if tuple(rec.shape[-2:]) != (r, r):
            raise ValueError(f"reconstruction is {tuple(rec.shape[-2:])}, expected {(r, r)}")
        sq = (rec - resize(orig, r)).pow(2)
        total = total + (sq.mean() if norm == "mse" else sq.reshape(len(sq), -1).sum(dim=1).mean())
    return total


def classification_loss(logits: Sequence[torch.Tensor], y: torch.Tensor) -> torch.Tensor:
    """BCE-with-logits per branch, averaged over branches and batch."""
    y = y.reshape(-1)
    if not torch.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0 or 1")
    y = y.to(logits[0].dtype)
    per_branch = [F.binary_cross_entropy_with_logits(lg.reshape(-1), y) for lg in logits]
    return torch.stack(per_branch).mean()


def total_objective(cls, c_str, c_sty, rec, weights: LossWeights | None = None) -> LossReport:
    weights = weights or LossWeights()
    parts = {k: torch.as_tensor(v, dtype=torch.get_default_dtype()) if not torch.is_tensor(v) else v
             for k, v in dict(cls=cls, c_str=c_str, c_sty=c_sty, rec=rec).items()}
    total = (weights.lambda_cls * parts["cls"] + weights.lambda_str * parts["c_str"]
             + weights.lambda_sty * parts["c_sty"] + weights.lambda_rec * parts["rec"])
    report = LossReport(total=total, weights=weights, **parts)
    for name, value in parts.items():
        if not torch.isfinite(value).all():
            raise NonFiniteLossError(name, report)
    if not torch.isfinite(total).all():
        raise NonFiniteLossError("total", report)
    return report
