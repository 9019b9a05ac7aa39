"""Part-label IoU, keypoint PCK, and the aligned/rotated evaluation protocols."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, InvalidArgument
from .geometry import PointCloud, normalize_to_unit_sphere, rotate, sample_uniform_rotation
from .inference import MATCHERS, transfer_keypoints, transfer_labels
from .io import Manifest, atomic_open, read_manifest

DEFAULT_TAU_GRID = tuple(round(0.01 * i, 2) for i in range(1, 11))


def iou_transfer(pred, gt, label_universe: Optional[Sequence[int]] = None) -> float:
    """Instance IoU: mean over the label universe of per-part IoU.

    A part absent from both prediction and ground truth scores 1.
    """
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise InvalidArgument(f"prediction has {pred.shape} labels, ground truth {gt.shape}")
    if label_universe is None:
        label_universe = np.union1d(pred, gt)
    scores = []
    for part in label_universe:
        p, g = pred == part, gt == part
        union = np.count_nonzero(p | g)
        scores.append(1.0 if union == 0 else np.count_nonzero(p & g) / union)
    return float(np.mean(scores))


def pck(transferred, gt, tau: float) -> float:
    """Fraction of keypoints within ``tau`` (inclusive) of their ground truth.

    Accepts aligned (M, 3) arrays or ``{semantic_id: xyz}`` dicts, which must
    share their ids.
    """
    if tau < 0:
        raise InvalidArgument("tau must be >= 0")
    if isinstance(transferred, dict) or isinstance(gt, dict):
        if set(transferred) != set(gt):
            raise InvalidArgument("transferred and ground-truth keypoints have different semantic ids")
        ids = sorted(gt)
        transferred = np.array([transferred[i] for i in ids], dtype=np.float64)
        gt = np.array([gt[i] for i in ids], dtype=np.float64)
    transferred, gt = np.asarray(transferred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if transferred.shape != gt.shape or len(gt) < 1:
        raise InvalidArgument("need matching, non-empty keypoint arrays")
    dist = np.linalg.norm(transferred - gt, axis=-1)
    return float(np.mean(dist <= tau))


def pck_curve(distances, tau_grid) -> list:
    d = np.asarray(distances, dtype=np.float64)
    return [[float(t), float(np.mean(d <= t))] for t in tau_grid]


def majority_label_iou(source_labels, gt, label_universe=None) -> float:
    """IoU of the constant prediction "most frequent source label everywhere"."""
    values, counts = np.unique(np.asarray(source_labels), return_counts=True)
    const = np.full(len(gt), values[np.argmax(counts)])
    return iou_transfer(const, gt, label_universe)


@dataclass
class PairResult:
    source: str
    target: str
    iou: Optional[float] = None
    baseline_iou: Optional[float] = None
    keypoint_distances: list = field(default_factory=list)


@dataclass
class EvalReport:
    protocol: str
    category: str
    train_augmentation: Optional[bool] = None
    matcher: str = "recon"
    tau_grid: tuple = DEFAULT_TAU_GRID
    pairs: list = field(default_factory=list)

    @property
    def mean_iou(self) -> Optional[float]:
        vals = [p.iou for p in self.pairs if p.iou is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def mean_baseline_iou(self) -> Optional[float]:
        vals = [p.baseline_iou for p in self.pairs if p.baseline_iou is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def pck_curve(self) -> Optional[list]:
        dists = [d for p in self.pairs for d in p.keypoint_distances]
        if not self.tau_grid or not dists:
            return None
        return pck_curve(dists, self.tau_grid)

    def to_dict(self) -> dict:
        out = {
            "protocol": self.protocol,
            "train_augmentation": self.train_augmentation,
            "matcher": self.matcher,
            "category": self.category,
            "pairs": [asdict(p) for p in self.pairs],
            "mean_iou": self.mean_iou,
            "mean_baseline_iou": self.mean_baseline_iou,
        }
        curve = self.pck_curve
        if curve is not None:
            out["pck_curve"] = curve
        return out

    def write(self, out_dir) -> None:
        from pathlib import Path

        out_dir = Path(out_dir)
        with atomic_open(out_dir / "report.json") as fh:
            json.dump(self.to_dict(), fh, indent=2)
        curve = self.pck_curve
        if curve is not None:
            with atomic_open(out_dir / "pck.csv") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["tau", "pck"])
                w.writerows(curve)


def evaluate_pair(model, source: PointCloud, target: PointCloud, matcher: str = "recon",
                  label_universe=None, need_labels: bool = False, need_keypoints: bool = False):
    """Correspondence-based IoU and keypoint distances for one (already posed) pair."""
    corr = MATCHERS[matcher](source, target, model)
    result = PairResult(source="", target="")
    have_labels = source.labels is not None and target.labels is not None
    if need_labels and not have_labels:
        raise DataError("label transfer requested but a cloud has no labels")
    if have_labels:
        universe = label_universe
        if universe is None:
            universe = np.union1d(source.labels, target.labels)
        pred = transfer_labels(source.labels, corr, target)
        result.iou = iou_transfer(pred, target.labels, universe)
        result.baseline_iou = majority_label_iou(source.labels, target.labels, universe)
    have_kp = source.keypoints is not None and target.keypoints is not None
    if need_keypoints and not have_kp:
        raise DataError("keypoint transfer requested but a cloud has no keypoints")
    if have_kp:
        moved = transfer_keypoints(source.keypoints, corr)
        gt = dict(target.keypoints)
        for sid in sorted(set(moved) & set(gt)):
            result.keypoint_distances.append(
                float(np.linalg.norm(target.points[moved[sid]] - target.points[gt[sid]])))
    return result, corr


def evaluate(pairs, model, protocol: str = "rotated", tau_grid=DEFAULT_TAU_GRID, seed: int = 0,
             matcher: str = "recon", category: str = "", train_augmentation=None,
             normalize: bool = True, label_universe=None) -> EvalReport:
    """Run a protocol over pairs of clouds, a manifest, or a manifest path.

    ``rotated`` draws an independent uniform rotation for each cloud of each pair
    from ``seed``; ``aligned`` uses the clouds as given.
    """
    if protocol not in ("aligned", "rotated"):
        raise InvalidArgument(f"protocol must be 'aligned' or 'rotated', got {protocol!r}")
    names = None
    if not isinstance(pairs, (list, tuple)):
        manifest = pairs if isinstance(pairs, Manifest) else read_manifest(pairs)
        category = category or manifest.category
        names = [(str(e.source), str(e.target)) for e in manifest.pairs]
        pairs = [manifest.load_pair(e) for e in manifest.pairs]
    rng = np.random.default_rng(seed)
    report = EvalReport(protocol, category, train_augmentation, matcher, tuple(tau_grid))
    for i, (src, tgt) in enumerate(pairs):
        if normalize:
            src, tgt = normalize_to_unit_sphere(src), normalize_to_unit_sphere(tgt)
        if protocol == "rotated":
            src = rotate(src, sample_uniform_rotation(rng))
            tgt = rotate(tgt, sample_uniform_rotation(rng))
        res, _ = evaluate_pair(model, src, tgt, matcher, label_universe)
        res.source, res.target = names[i] if names else (f"pair{i}.source", f"pair{i}.target")
        report.pairs.append(res)
    return report
