"""Channel-wise soft split of stem features into structure and style halves."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn


class ChannelGate(nn.Module):
    """Learnable ``2 x C`` logit matrix; row 0 scores structure, row 1 style.

    Each channel's two logits go through a temperature softmax, so the two
    weights of a channel sum to one and ``f_str + f_sty == f``.
    """

    def __init__(self, channels: int = 64, tau: float = 0.1):
        super().__init__()
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}")
        self.channels = channels
        self.tau = float(tau)
        self.theta = nn.Parameter(torch.zeros(2, channels))

    def weights(self) -> tuple[torch.Tensor, torch.Tensor]:
        return gate_weights(self.theta, self.tau)

    def forward(self, f: torch.Tensor, detach_structure: bool = False):
        return disentangle(f, self, detach_structure=detach_structure)

    def structure(self, f: torch.Tensor) -> torch.Tensor:
        w_str, _ = self.weights()
        return f * w_str.view(1, -1, 1, 1)

    def extra_repr(self):
        return f"channels={self.channels}, tau={self.tau}"


def gate_weights(theta: torch.Tensor, tau: float) -> tuple[torch.Tensor, torch.Tensor]:
    if not torch.isfinite(theta).all():
        raise ValueError("gate logits contain non-finite values")
    w = torch.softmax(theta / tau, dim=0)
    return w[0], w[1]


def disentangle(f: torch.Tensor, gate: ChannelGate, detach_structure: bool = False):
    """Return ``(f_str, f_sty)``.

    ``detach_structure`` cuts the gate gradient coming through the structure
    half (the feature map itself still receives it).
    """
    if f.dim() != 4 or f.shape[1] != gate.channels:
        raise ValueError(f"expected N x {gate.channels} x H x W features, got {tuple(f.shape)}")
    w_str, w_sty = gate.weights()
    if detach_structure:
        w_str = w_str.detach()
    return f * w_str.view(1, -1, 1, 1), f * w_sty.view(1, -1, 1, 1)


class ProjectionHead(nn.Module):
    """Global average pool followed by an affine map (optionally one hidden layer)."""

    def __init__(self, channels: int = 64, dim: int = 128, hidden: int = 0):
        super().__init__()
        self.channels = channels
        self.dim = dim
        if hidden > 0:
            self.net = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(inplace=True), nn.Linear(hidden, dim))
        else:
            self.net = nn.Linear(channels, dim)

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return project(f, self)


def project(f: torch.Tensor, head: ProjectionHead) -> torch.Tensor:
    if f.dim() != 4 or f.shape[1] != head.channels:
        raise ValueError(f"expected N x {head.channels} x H x W features, got {tuple(f.shape)}")
    return head.net(f.mean(dim=(2, 3)))


@dataclass
class TripletFeatures:
    """Stem features of the three views and their gated halves, each ``N x C x H x W``."""

    f: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    f_str: tuple[torch.Tensor, torch.Tensor, torch.Tensor]
    f_sty: tuple[torch.Tensor, torch.Tensor, torch.Tensor]

    @classmethod
    def from_stacked(cls, f, f_str, f_sty, n: int) -> "TripletFeatures":
        return cls(tuple(torch.split(f, n)), tuple(torch.split(f_str, n)), tuple(torch.split(f_sty, n)))
