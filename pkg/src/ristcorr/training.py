"""Self-supervised training: loss assembly, pair sampling, Adam loop, metric log."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import ModelConfig, TrainConfig
from .errors import DataError, NumericalFailure
from .geometry import PointCloud, as_rng, normalize_to_unit_sphere, resample, rotate, sample_uniform_rotation
from .io import Manifest, atomic_open, read_manifest, read_point_cloud
from .losses import chamfer, emd_exact, mse_paired
from .model import RISTModel, build_model

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "iter", "L_total", "L_SR_MSE", "L_SR_EMD", "L_CR_CD", "L_SR_CD")


def compute_loss(P1, P2, model: RISTModel, cfg: TrainConfig):
    """Total loss and its unweighted components for one pair.

    Self-reconstruction terms are averaged over the two clouds, cross-reconstruction
    Chamfer over both directions.  Every component is computed for logging; only the
    terms enabled in ``cfg`` enter the total.
    """
    x1, x2 = model.as_tensor(P1), model.as_tensor(P2)
    enc1, enc2 = model.encode(x1), model.encode(x2)
    rec1, rec2 = model.self_reconstruct(enc1), model.self_reconstruct(enc2)

    comps = {
        "L_SR_MSE": 0.5 * (mse_paired(rec1, x1) + mse_paired(rec2, x2)),
        "L_SR_EMD": 0.5 * (emd_exact(rec1, x1) + emd_exact(rec2, x2)),
        "L_SR_CD": 0.5 * (chamfer(rec1, x1) + chamfer(rec2, x2)),
    }
    cross_21 = model.cross_reconstruct(enc2, enc1)  # P2's transforms, P1's pose
    cross_12 = model.cross_reconstruct(enc1, enc2)
    comps["L_CR_CD"] = 0.5 * (chamfer(x1, cross_21) + chamfer(x2, cross_12))

    weights = {"L_SR_MSE": cfg.lambda_mse, "L_SR_EMD": cfg.lambda_emd, "L_SR_CD": cfg.lambda_cd,
               "L_CR_CD": cfg.lambda_cd}
    enabled = {f"L_SR_{t.upper()}" for t in cfg.sr_terms}
    if cfg.cross_reconstruction:
        enabled.add("L_CR_CD")
    total = x1.new_zeros(())
    for name in ("L_SR_MSE", "L_SR_EMD", "L_SR_CD", "L_CR_CD"):
        if not torch.isfinite(comps[name]):
            raise NumericalFailure(name)
        if name in enabled:
            total = total + weights[name] * comps[name]
    comps["L_total"] = total
    return total, comps


def prepare_cloud(cloud: PointCloud, cfg: TrainConfig, rng) -> PointCloud:
    if cfg.num_points and len(cloud) != cfg.num_points:
        cloud = resample(cloud, cfg.num_points, rng)
    return normalize_to_unit_sphere(cloud) if cfg.normalize else cloud


def load_training_shapes(manifests: Sequence, cfg: TrainConfig, num_workers: int = 0) -> dict:
    """Category -> list of prepared clouds.  Accepts manifest paths or Manifest objects.

    ``num_workers > 0`` reads files on a thread pool; results keep manifest order,
    so the outcome does not depend on the worker count.
    """
    rng = np.random.default_rng(cfg.seed)
    shapes: dict = {}
    for m in manifests:
        manifest = m if isinstance(m, Manifest) else read_manifest(m)
        if cfg.categories and manifest.category not in cfg.categories:
            continue
        if num_workers > 0:
            with ThreadPoolExecutor(num_workers) as pool:
                clouds = list(pool.map(lambda f: read_point_cloud(f[0], manifest.category, f[1]),
                                       manifest.shape_files()))
        else:
            clouds = manifest.load_shapes()
        for cloud in clouds:
            shapes.setdefault(manifest.category, []).append(prepare_cloud(cloud, cfg, rng))
    missing = set(cfg.categories) - set(shapes)
    if missing:
        raise DataError(f"no training shapes for categories {sorted(missing)}")
    if not shapes:
        raise DataError("training set is empty")
    return shapes


class PairSampler:
    """Draws same-category pairs of distinct instances (when the category has two)."""

    def __init__(self, shapes: dict, rng):
        self.categories = sorted(shapes)
        self.shapes = shapes
        self.rng = as_rng(rng)
        self.weights = np.array([len(shapes[c]) for c in self.categories], dtype=float)
        self.weights /= self.weights.sum()

    def __call__(self):
        cat = self.categories[self.rng.choice(len(self.categories), p=self.weights)]
        pool = self.shapes[cat]
        if len(pool) == 1:
            return pool[0], pool[0]
        i, j = self.rng.choice(len(pool), size=2, replace=False)
        return pool[i], pool[j]


@dataclass
class TrainResult:
    model: RISTModel
    optimizer: torch.optim.Optimizer
    history: list = field(default_factory=list)
    checkpoint: Optional[Path] = None
    rng_state: Optional[dict] = None


def write_metric_csv(path, rows) -> None:
    with atomic_open(path, "w") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([row["epoch"], row["iter"]] + [repr(row[c]) for c in METRIC_COLUMNS[2:]])


def train(data, cfg: TrainConfig, model: Optional[RISTModel] = None,
          model_cfg: Optional[ModelConfig] = None, out_dir=None,
          callback: Optional[Callable[[dict], None]] = None, num_workers: int = 0) -> TrainResult:
    """Optimize a model by self- and cross-reconstruction.

    ``data`` is a list of manifest paths/objects or an already-prepared
    ``{category: [PointCloud, ...]}`` mapping.  Everything random (init, pair
    choice, augmentation rotations) derives from ``cfg.seed``.  When ``out_dir`` is
    given, a checkpoint and the metric CSV are written after every epoch.
    """
    shapes = data if isinstance(data, dict) else load_training_shapes(data, cfg, num_workers)
    if model is None:
        model = build_model(model_cfg or ModelConfig(), seed=cfg.seed)
    rng = np.random.default_rng([cfg.seed, 1])
    sampler = PairSampler(shapes, rng)
    optimizer = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    n_shapes = sum(len(v) for v in shapes.values())
    iters = cfg.iters_per_epoch or math.ceil(n_shapes / cfg.batch_pairs)
    out_dir = Path(out_dir) if out_dir is not None else None
    history, ckpt = [], None
    step = 0
    model.train()
    for epoch in range(cfg.epochs):
        for _ in range(iters):
            optimizer.zero_grad()
            sums = dict.fromkeys(METRIC_COLUMNS[2:], 0.0)
            for _ in range(cfg.batch_pairs):
                P1, P2 = sampler()
                if cfg.rotation_augmentation:
                    P1 = rotate(P1, sample_uniform_rotation(rng))
                    P2 = rotate(P2, sample_uniform_rotation(rng))
                total, comps = compute_loss(P1, P2, model, cfg)
                (total / cfg.batch_pairs).backward()
                for k in sums:
                    sums[k] += comps[k].item() / cfg.batch_pairs
            optimizer.step()
            row = {"epoch": epoch, "iter": step, **sums}
            history.append(row)
            if callback is not None:
                callback(row)
            step += 1
        log.info("epoch %d: L_total=%.6g", epoch, history[-1]["L_total"] if history else float("nan"))
        if out_dir is not None:
            write_metric_csv(out_dir / "metrics.csv", history)
            ckpt = save_checkpoint(out_dir / "checkpoint.rist", model, optimizer, epoch=epoch + 1,
                                   train_config=cfg.to_dict(), rng_state=rng.bit_generator.state)
    return TrainResult(model, optimizer, history, ckpt, rng.bit_generator.state)


def reconstruction_cd(model: RISTModel, clouds: Sequence[PointCloud]) -> float:
    """Mean self-reconstruction Chamfer distance over ``clouds``."""
    vals = []
    with torch.no_grad():
        for c in clouds:
            x = model.as_tensor(c)
            vals.append(float(chamfer(model.self_reconstruct(model.encode(x)), x)))
    return float(np.mean(vals))
