"""Dense correspondence by cross-reconstruction + nearest neighbors, and the LST-similarity variant."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .errors import InvalidArgument
from .geometry import PointCloud
from .io import atomic_open


@dataclass
class CorrespondenceSet:
    """Dense matches over the source: row i of ``pairs`` is ``(i, target_index)``."""

    pairs: np.ndarray
    reconstructed: Optional[np.ndarray] = None
    direction: str = "source->target"
    matcher: str = "recon"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.pairs = np.asarray(self.pairs, dtype=np.int64).reshape(-1, 2)
        if not np.array_equal(self.pairs[:, 0], np.arange(len(self.pairs))):
            raise InvalidArgument("correspondence must list every source index once, in order")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def target_index(self) -> np.ndarray:
        return self.pairs[:, 1]

    def agreement(self, other: "CorrespondenceSet") -> float:
        """Fraction of source points mapped to the same target index in both sets."""
        return float(np.mean(self.target_index == other.target_index))


def nearest_indices(queries: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Exact nearest neighbor in ``points`` for each query row, first index on ties."""
    diff = queries[:, None, :] - points[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    return np.argmin(d2, axis=1)


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, PointCloud) else np.asarray(x, dtype=np.float64)


@torch.no_grad()
def correspond(P, Q, model) -> CorrespondenceSet:
    """Match every point of ``P`` to a point of ``Q``.

    P's local transforms are applied to Q's global descriptor; the decoded cloud
    lies in Q's pose with P's indexing, and each decoded point is snapped to its
    nearest point of Q.
    """
    p, q = _points(P), _points(Q)
    enc_p, enc_q = model.encode(p), model.encode(q)
    recon = model.cross_reconstruct(enc_p, enc_q).double().cpu().numpy()
    idx = nearest_indices(recon, q)
    return CorrespondenceSet(np.stack([np.arange(len(p)), idx], axis=1), recon, matcher="recon")


def lst_similarity(theta_p: torch.Tensor, theta_q: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between flattened transforms, (N_p, N_q)."""
    a = theta_p.reshape(theta_p.shape[0], -1)
    b = theta_q.reshape(theta_q.shape[0], -1)
    a = a / a.norm(dim=1, keepdim=True).clamp_min(1e-300)
    b = b / b.norm(dim=1, keepdim=True).clamp_min(1e-300)
    return a @ b.T


@torch.no_grad()
def correspond_lst(P, Q, model) -> CorrespondenceSet:
    """Match each point of ``P`` to the point of ``Q`` with the most similar local transform."""
    p, q = _points(P), _points(Q)
    sim = lst_similarity(model.encode(p).theta, model.encode(q).theta)
    idx = torch.argmax(sim, dim=1).cpu().numpy()
    return CorrespondenceSet(np.stack([np.arange(len(p)), idx], axis=1), None, matcher="lst")


MATCHERS = {"recon": correspond, "lst": correspond_lst}


def transfer_labels(source_labels, corr: CorrespondenceSet, target) -> np.ndarray:
    """Labels for every target point from the labeled source.

    A target hit by one or more source points takes the most frequent label among
    them (smallest label on ties).  Untouched targets take the label of the nearest
    reconstructed point, or of the nearest matched target when the correspondence
    carries no reconstruction.
    """
    if source_labels is None:
        raise InvalidArgument("source has no labels to transfer")
    labels = np.asarray(source_labels, dtype=np.int64)
    if len(labels) != len(corr):
        raise InvalidArgument(f"{len(labels)} source labels for {len(corr)} correspondences")
    tgt = _points(target)
    n_target = len(tgt)
    if corr.target_index.max(initial=-1) >= n_target:
        raise InvalidArgument("correspondence target index out of range")

    n_labels = int(labels.max()) + 1
    votes = np.zeros((n_target, n_labels), dtype=np.int64)
    np.add.at(votes, (corr.target_index, labels), 1)
    out = np.argmax(votes, axis=1)
    hit = votes.sum(1) > 0
    if not hit.all():
        if corr.reconstructed is not None:
            nearest = nearest_indices(tgt[~hit], corr.reconstructed)
            out[~hit] = labels[nearest]
        else:
            matched = np.flatnonzero(hit)
            nearest = nearest_indices(tgt[~hit], tgt[matched])
            out[~hit] = out[matched[nearest]]
    return out


def transfer_keypoints(source_keypoints, corr: CorrespondenceSet) -> dict:
    """Semantic id -> matched target index for each source keypoint."""
    return {sid: int(corr.target_index[idx]) for sid, idx in source_keypoints}


def write_correspondence_csv(path, corr: CorrespondenceSet, checkpoint_hash: str = "") -> None:
    with atomic_open(path) as fh:
        fh.write(f"# direction={corr.direction} matcher={corr.matcher} checkpoint_sha256={checkpoint_hash}\n")
        fh.write("source_index,target_index\n")
        for s, t in corr.pairs:
            fh.write(f"{s},{t}\n")


def read_correspondence_csv(path) -> CorrespondenceSet:
    header, rows = {}, []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                for token in line[1:].split():
                    if "=" in token:
                        k, v = token.split("=", 1)
                        header[k] = v
            elif line and not line.startswith("source_index"):
                s, t = line.split(",")
                rows.append((int(s), int(t)))
    return CorrespondenceSet(np.array(rows), direction=header.get("direction", "source->target"),
                             matcher=header.get("matcher", "recon"), meta=header)
