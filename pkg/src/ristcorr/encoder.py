"""Equivariant encoder: global shape descriptor Z and per-point local shape transforms."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .config import EncoderConfig
from .errors import InvalidArgument, NumericalFailure
from .geometry import knn_graph
from .vn import VNEdgeConv, VNLinear, invariant_product, vn_mean_pool


@dataclass
class EncoderOutput:
    Z: torch.Tensor  # (C, 3), rotates with the input
    theta: torch.Tensor  # (N, C', C), rotation invariant
    V_equi: torch.Tensor  # (N, F, 3) fused per-point features
    V_in: torch.Tensor  # (N, C', 3) invariant per-point features

    def __len__(self) -> int:
        return self.theta.shape[0]

    @property
    def descriptors(self) -> torch.Tensor:
        """Local shape descriptors ``theta_i @ Z``, shape (N, C', 3)."""
        return apply_transform(self.theta, self.Z)


def apply_transform(theta: torch.Tensor, Z: torch.Tensor) -> torch.Tensor:
    """Map a global descriptor through local transform(s): ``theta @ Z``.

    ``theta`` is (C', C) or (N, C', C); ``Z`` is (C, 3).
    """
    if theta.shape[-1] != Z.shape[-2] or Z.shape[-1] != 3:
        raise InvalidArgument(
            f"transform of shape {tuple(theta.shape)} cannot act on descriptor of shape {tuple(Z.shape)}")
    return theta @ Z


def _check_finite(x: torch.Tensor, stage: str) -> torch.Tensor:
    if not torch.isfinite(x).all():
        raise NumericalFailure(stage)
    return x


class Encoder(nn.Module):
    """Four edge-conv stages on a fixed kNN graph, concatenation + VN-linear fusion,
    then two heads: a pooled equivariant descriptor and an invariant-feature MLP that
    predicts one (C' x C) transform per point.
    """

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        stages, width = [], 1
        for out in cfg.edge_channels:
            stages.append(VNEdgeConv(width, out, cfg.aggregation, cfg.negative_slope))
            width = out
        self.stages = nn.ModuleList(stages)
        F = cfg.fuse_channels
        self.fuse = VNLinear(sum(cfg.edge_channels), F)
        self.to_global = VNLinear(F, cfg.C)
        self.to_local = VNLinear(F, cfg.C_prime)
        self.to_frame = VNLinear(2 * F, 3)
        h = cfg.mlp_hidden
        self.mlp = nn.Sequential(
            nn.Linear(3 * cfg.C_prime, h), nn.SiLU(),
            nn.Linear(h, h), nn.SiLU(),
            nn.Linear(h, cfg.C_prime * cfg.C),
        )

    def forward(self, points: torch.Tensor, neighbors=None) -> EncoderOutput:
        if points.ndim != 2 or points.shape[1] != 3:
            raise InvalidArgument(f"expected N x 3 points, got {tuple(points.shape)}")
        n, cfg = points.shape[0], self.cfg
        if n <= cfg.k:
            raise InvalidArgument(f"need more than k={cfg.k} points, got N={n}")
        if neighbors is None:
            neighbors = knn_graph(points.detach().cpu().numpy(), cfg.k)
        neighbors = torch.as_tensor(neighbors, dtype=torch.long)

        V = points.unsqueeze(1)
        per_stage = []
        for i, stage in enumerate(self.stages):
            V = _check_finite(stage(V, neighbors), f"edge-conv stage {i + 1}")
            per_stage.append(V)
        fused = _check_finite(self.fuse(torch.cat(per_stage, dim=1)), "feature fusion")

        Z = _check_finite(vn_mean_pool(self.to_global(fused)), "global descriptor")
        pooled = vn_mean_pool(fused).expand_as(fused)
        frame = self.to_frame(torch.cat([fused, pooled], dim=1))
        V_in = _check_finite(invariant_product(self.to_local(fused), frame), "invariant features")
        theta = self.mlp(V_in.reshape(n, -1)).reshape(n, cfg.C_prime, cfg.C)
        return EncoderOutput(Z, _check_finite(theta, "local shape transforms"), fused, V_in)
