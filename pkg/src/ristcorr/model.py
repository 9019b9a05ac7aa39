from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .config import ModelConfig
from .decoder import Decoder, cross_reconstruct, self_reconstruct
from .encoder import Encoder, EncoderOutput
from .geometry import PointCloud

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class RISTModel(nn.Module):
    """Encoder + decoder pair with convenience entry points taking point clouds."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder)
        self.decoder = Decoder(cfg.decoder)
        self.to(self.dtype)

    @property
    def dtype(self) -> torch.dtype:
        return DTYPES[self.cfg.dtype]

    def as_tensor(self, points) -> torch.Tensor:
        if isinstance(points, PointCloud):
            points = points.points
        if isinstance(points, np.ndarray):
            return torch.from_numpy(points).to(self.dtype)
        return points.to(self.dtype)

    def encode(self, points) -> EncoderOutput:
        return self.encoder(self.as_tensor(points))

    def decode(self, descriptors: torch.Tensor) -> torch.Tensor:
        return self.decoder(descriptors)

    def self_reconstruct(self, enc: EncoderOutput) -> torch.Tensor:
        return self_reconstruct(self.decoder, enc)

    def cross_reconstruct(self, source: EncoderOutput, target) -> torch.Tensor:
        return cross_reconstruct(self.decoder, source, target)


def build_model(cfg: ModelConfig | None = None, seed: int = 0) -> RISTModel:
    """Fresh model with parameters drawn from a seeded generator (global RNG untouched)."""
    cfg = cfg or ModelConfig()
    fork_devices: list = []
    with torch.random.fork_rng(devices=fork_devices):
        torch.manual_seed(seed)
        model = RISTModel(cfg)
    return model
