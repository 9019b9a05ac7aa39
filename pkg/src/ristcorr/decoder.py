"""Pointwise equivariant decoder and the self/cross reconstruction paths."""

from __future__ import annotations

import torch
from torch import nn

from .config import DecoderConfig
from .encoder import EncoderOutput, apply_transform
from .errors import InvalidArgument
from .vn import VNLinear, VNLinearBlock


class Decoder(nn.Module):
    """Stack of VN linear blocks ending in one vector channel per point.

    Points never mix, so output row i depends only on descriptor i.  There are no
    bias terms, hence zero descriptors decode to the origin.
    """

    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        blocks, width = [], cfg.in_channels
        for h in cfg.hidden:
            blocks.append(VNLinearBlock(width, h, cfg.negative_slope))
            width = h
        self.blocks = nn.Sequential(*blocks)
        self.head = VNLinear(width, 1)

    def forward(self, descriptors: torch.Tensor) -> torch.Tensor:
        if descriptors.ndim != 3 or descriptors.shape[-2:] != (self.cfg.in_channels, 3):
            raise InvalidArgument(
                f"expected (N, {self.cfg.in_channels}, 3) descriptors, got {tuple(descriptors.shape)}")
        return self.head(self.blocks(descriptors)).squeeze(-2)


def self_reconstruct(decoder: Decoder, enc: EncoderOutput) -> torch.Tensor:
    return decoder(enc.descriptors)


def cross_reconstruct(decoder: Decoder, source: EncoderOutput, target) -> torch.Tensor:
    """Decode the source's transforms applied to the target's global descriptor.

    The result is indexed like the source and posed like the target.  ``target`` may
    be an :class:`EncoderOutput` or a bare (C, 3) descriptor.
    """
    Z = target.Z if isinstance(target, EncoderOutput) else target
    if source.theta.shape[-1] != Z.shape[0]:
        raise InvalidArgument(
            f"source transforms expect C={source.theta.shape[-1]}, target descriptor has C={Z.shape[0]}")
    return decoder(apply_transform(source.theta, Z))
