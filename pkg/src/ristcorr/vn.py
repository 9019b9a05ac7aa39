"""Vector-neuron layers.

A vector-list feature is a tensor of shape ``(..., C, 3)``: C channels, each a
3-vector stored as a row.  Per-point features of a cloud are ``(N, C, 3)``.
Every layer here commutes with right-multiplication of the trailing axis by an
orthogonal matrix, i.e. ``f(V @ R) == f(V) @ R``.
"""

from __future__ import annotations

import math

import torch
from torch import nn

from .errors import InvalidArgument

EPS = 1e-8


def init_uniform_(weight: torch.Tensor) -> torch.Tensor:
    bound = 1.0 / math.sqrt(weight.shape[1])
    with torch.no_grad():
        return weight.uniform_(-bound, bound)


def vn_linear(V: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """Channel mixing ``W @ V`` for each 3-vector slot."""
    if weight.ndim != 2 or weight.shape[1] != V.shape[-2]:
        raise InvalidArgument(
            f"weight of shape {tuple(weight.shape)} does not match {V.shape[-2]} input channels")
    return torch.einsum("oc,...ci->...oi", weight, V)


def vn_nonlinearity(V: torch.Tensor, D: torch.Tensor, negative_slope: float = 0.0) -> torch.Tensor:
    """Half-space nonlinearity with learned directions ``D`` (same shape as ``V``).

    Each channel vector ``v`` passes unchanged when ``<v, d> >= 0``; otherwise its
    component along ``d`` is removed.  ``negative_slope`` blends the raw input back
    in for the second branch (0 gives the pure projection).
    """
    dot = (V * D).sum(-1, keepdim=True)
    d_sq = (D * D).sum(-1, keepdim=True)
    projected = V - (dot / (d_sq + EPS)) * D
    out = torch.where(dot >= 0, V, projected)
    if negative_slope:
        out = negative_slope * V + (1.0 - negative_slope) * out
    return out


def vn_mean_pool(V: torch.Tensor, dim: int = -3) -> torch.Tensor:
    """Mean over the point axis (default: the axis before channels)."""
    if V.shape[dim] < 1:
        raise InvalidArgument("cannot pool over zero points")
    return V.mean(dim=dim)


def invariant_product(V: torch.Tensor, frame: torch.Tensor) -> torch.Tensor:
    """``V @ frame^T``: (..., C', 3) x (..., 3, 3) -> (..., C', 3), rotation invariant.

    Rotating both arguments by the same R cancels: ``(V R)(U R)^T = V U^T``.
    """
    if frame.shape[-2] != 3 or frame.shape[-1] != 3:
        raise InvalidArgument(f"frame must have exactly 3 vector channels, got shape {tuple(frame.shape)}")
    return V @ frame.transpose(-1, -2)


class VNLinear(nn.Module):
    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.weight = nn.Parameter(init_uniform_(torch.empty(out_channels, in_channels)))

    def forward(self, V: torch.Tensor) -> torch.Tensor:
        return vn_linear(V, self.weight)

    def extra_repr(self) -> str:
        return f"{self.weight.shape[1]} -> {self.weight.shape[0]}"


class VNNonlinearity(nn.Module):
    """Learned-direction nonlinearity; directions are a VN-linear image of the input.

    ``share_direction`` uses a single direction for all channels.
    """

    def __init__(self, channels: int, share_direction: bool = False, negative_slope: float = 0.0):
        super().__init__()
        self.direction = VNLinear(channels, 1 if share_direction else channels)
        self.negative_slope = negative_slope

    def forward(self, V: torch.Tensor) -> torch.Tensor:
        D = self.direction(V)
        return vn_nonlinearity(V, D.expand_as(V), self.negative_slope)


class VNLinearBlock(nn.Module):
    """VN linear map followed by the VN nonlinearity."""

    def __init__(self, in_channels: int, out_channels: int, negative_slope: float = 0.0):
        super().__init__()
        self.linear = VNLinear(in_channels, out_channels)
        self.act = VNNonlinearity(out_channels, negative_slope=negative_slope)

    def forward(self, V: torch.Tensor) -> torch.Tensor:
        return self.act(self.linear(V))


def gather_neighbors(V: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
    """(N, C, 3) features, (N, k) indices -> (N, k, C, 3)."""
    n = V.shape[0]
    if neighbors.ndim != 2 or neighbors.shape[0] != n:
        raise InvalidArgument(f"neighbor array must be N x k with N={n}, got {tuple(neighbors.shape)}")
    if neighbors.numel() and (int(neighbors.min()) < 0 or int(neighbors.max()) >= n):
        raise InvalidArgument("neighbor index out of range")
    return V[neighbors]


class VNEdgeConv(nn.Module):
    """Edge convolution on a fixed neighbor graph.

    Edge feature for (i, j) is ``concat(V_i, V_j - V_i)`` over channels, passed
    through a VN linear block and aggregated over j by mean (default) or by
    per-channel max of the vector norm.
    """

    def __init__(self, in_channels: int, out_channels: int, aggregation: str = "mean",
                 negative_slope: float = 0.0):
        super().__init__()
        if aggregation not in ("mean", "max"):
            raise InvalidArgument(f"aggregation must be 'mean' or 'max', got {aggregation!r}")
        self.block = VNLinearBlock(2 * in_channels, out_channels, negative_slope)
        self.aggregation = aggregation

    def forward(self, V: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
        neighbors = torch.as_tensor(neighbors, dtype=torch.long)
        Vj = gather_neighbors(V, neighbors)
        Vi = V.unsqueeze(1).expand_as(Vj)
        h = self.block(torch.cat([Vi, Vj - Vi], dim=-2))
        if self.aggregation == "mean":
            return h.mean(dim=1)
        norms = (h * h).sum(-1)
        best = norms.argmax(dim=1)
        index = best[:, None, :, None].expand(-1, 1, -1, 3)
        return h.gather(1, index).squeeze(1)
