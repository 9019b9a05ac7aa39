"""Command-line entry point: train, infer, eval, check-equivariance, gen-synthetic."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import file_sha256, load_checkpoint
from .config import ConfigError, ModelConfig, RunConfig, load_run_config
from .errors import CheckpointError, DataError, InvalidArgument, NumericalFailure
from .evaluation import evaluate
from .geometry import FAMILIES, PointCloud, normalize_to_unit_sphere, sample_uniform_rotation, synthetic_dataset
from .inference import MATCHERS, write_correspondence_csv
from .io import Manifest, PairEntry, atomic_open, read_point_cloud, write_keypoints, write_manifest, write_point_cloud
from .model import RISTModel, build_model
from .training import train, write_metric_csv

log = logging.getLogger("ristcorr")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_GATE = 0, 2, 3, 4, 5

# (single, double) precision gates of the equivariance check
COMPONENT_GATES = {
    "Z": (1e-4, 1e-8),
    "theta": (1e-4, 1e-4),
    "descriptors": (1e-4, 1e-4),
    "decoder": (1e-4, 1e-4),
    "cross_source": (1e-4, 1e-4),
    "cross_target": (1e-4, 1e-4),
}
LAYER_GATE = 1e-4


class GateExceeded(Exception):
    pass


def num_workers() -> int:
    raw = os.environ.get("RISTCORR_NUM_WORKERS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"RISTCORR_NUM_WORKERS must be a non-negative integer, got {raw!r}") from None
    if n < 0:
        raise ConfigError(f"RISTCORR_NUM_WORKERS must be a non-negative integer, got {raw!r}")
    return n


def echo_config(cfg: RunConfig, out_dir=None) -> None:
    lines = [f"{k}={v!r}" if isinstance(v, str) else f"{k}={v}" for k, v in cfg.flat().items()]
    log.info("effective config:\n  %s", "\n  ".join(lines))
    if out_dir is not None:
        with atomic_open(Path(out_dir) / "config.txt") as fh:
            fh.write("\n".join(lines) + "\n")


def open_checkpoint(path):
    if path is None:
        raise ConfigError("--checkpoint is required")
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# equivariance diagnostics

def _rel(a: torch.Tensor, b: torch.Tensor) -> float:
    return float((a - b).norm() / max(float(b.norm()), 1e-12))


def measure_equivariance(model: RISTModel, trials: int, seed: int = 0, n_points: int = 128) -> dict:
    """Worst relative error per component over ``trials`` uniform rotations.

    Z, descriptors and decoded clouds should rotate with the input; the local
    transforms should not move.  Cross reconstruction should ignore the source's
    pose and follow the target's.
    """
    rng = np.random.default_rng(seed)
    clouds = [normalize_to_unit_sphere(PointCloud(rng.normal(size=(n_points, 3)) * [1.0, 0.7, 0.4]))
              for _ in range(2)]
    x, y = (model.as_tensor(c) for c in clouds)
    worst = dict.fromkeys(COMPONENT_GATES, 0.0)
    with torch.no_grad():
        ex, ey = model.encode(x), model.encode(y)
        rec, cross = model.self_reconstruct(ex), model.cross_reconstruct(ex, ey)
        for _ in range(trials):
            R = torch.as_tensor(sample_uniform_rotation(rng).matrix, dtype=model.dtype)
            rx, ry = model.encode(x @ R.T), model.encode(y @ R.T)
            errs = {
                "Z": _rel(rx.Z, ex.Z @ R.T),
                "theta": _rel(rx.theta, ex.theta),
                "descriptors": _rel(rx.descriptors, ex.descriptors @ R.T),
                "decoder": _rel(model.self_reconstruct(rx), rec @ R.T),
                "cross_source": _rel(model.cross_reconstruct(rx, ey), cross),
                "cross_target": _rel(model.cross_reconstruct(ex, ry), cross @ R.T),
            }
            for k, v in errs.items():
                worst[k] = max(worst[k], v)
    return worst


def _vector_layers(model: RISTModel) -> dict:
    """Named submodules whose outputs are vector features (last axis of size 3)."""
    skip = ("", "encoder", "decoder", "encoder.stages")
    return {name: m for name, m in model.named_modules()
            if name not in skip and not name.startswith("encoder.mlp")}


def layer_errors(model: RISTModel, trials: int, seed: int = 0, n_points: int = 128) -> list:
    """``[(layer, worst error)]`` in forward order, comparing each layer's output on
    rotated input with its rotated output on the original input."""
    rng = np.random.default_rng(seed + 1)
    x = model.as_tensor(normalize_to_unit_sphere(PointCloud(rng.normal(size=(n_points, 3)) * [1.0, 0.7, 0.4])))
    layers = _vector_layers(model)
    record: dict = {}
    order: list = []

    def hook(name):
        def fn(_module, _inputs, output):
            if name not in record:
                order.append(name)
            record[name] = output.detach()
        return fn

    handles = [m.register_forward_hook(hook(n)) for n, m in layers.items()]
    worst: dict = {}
    try:
        with torch.no_grad():
            model.self_reconstruct(model.encode(x))
            base = dict(record)
            for _ in range(trials):
                R = torch.as_tensor(sample_uniform_rotation(rng).matrix, dtype=model.dtype)
                model.self_reconstruct(model.encode(x @ R.T))
                for name in order:
                    worst[name] = max(worst.get(name, 0.0), _rel(record[name], base[name] @ R.T))
    finally:
        for h in handles:
            h.remove()
    return [(name, worst[name]) for name in order]


def inject_fault(model: RISTModel, layer: str, magnitude: float = 0.1) -> None:
    """Add a constant (hence non-equivariant) vector to ``layer``'s output."""
    layers = _vector_layers(model)
    if layer not in layers:
        raise ConfigError(f"--inject-fault: unknown vector layer {layer!r}; choose from {sorted(layers)}")
    bias = torch.full((3,), magnitude, dtype=model.dtype)
    layers[layer].register_forward_hook(lambda _m, _i, out: out + bias)


# ---------------------------------------------------------------------------
# commands

def cmd_train(args, cfg: RunConfig) -> int:
    manifests = list(args.manifest or cfg.data["manifest"])
    if not manifests:
        raise DataError("no training manifest given (use --manifest or data.manifest=...)")
    for m in manifests:
        if not Path(m).is_file():
            raise DataError(f"manifest not found: {m}")
    out = Path(args.out)
    echo_config(cfg, out)
    result = train(manifests, cfg.train, model_cfg=cfg.model, out_dir=out, num_workers=num_workers())
    if cfg.train.epochs == 0:
        write_metric_csv(out / "metrics.csv", [])
    if result.history:
        log.info("final L_total=%.6g", result.history[-1]["L_total"])
    print(f"wrote {out / 'metrics.csv'}" + (f" and {result.checkpoint}" if result.checkpoint else ""))
    return EXIT_OK


def _load_for_inference(path, normalize: bool):
    cloud = read_point_cloud(path)
    center = cloud.points.mean(axis=0)
    radius = float(np.linalg.norm(cloud.points - center, axis=1).max())
    if not normalize:
        return cloud, np.zeros(3), 1.0
    return normalize_to_unit_sphere(cloud), center, (radius if radius > 0 else 1.0)


def cmd_infer(args, cfg: RunConfig) -> int:
    ckpt = open_checkpoint(args.checkpoint)
    if args.source is None or args.target is None:
        raise ConfigError("infer needs --source and --target")
    normalize = bool(ckpt.train_config.get("normalize", cfg.train.normalize))
    src, _, _ = _load_for_inference(args.source, normalize)
    tgt, center, radius = _load_for_inference(args.target, normalize)
    echo_config(cfg, args.out)
    corr = MATCHERS[args.matcher](src, tgt, ckpt.model)
    out = Path(args.out)
    write_correspondence_csv(out / "correspondence.csv", corr, file_sha256(args.checkpoint))
    if corr.reconstructed is not None:
        write_point_cloud(out / "reconstruction.xyz", PointCloud(corr.reconstructed * radius + center))
    identity = float(np.mean(corr.target_index == np.arange(len(corr))))
    print(f"wrote {out / 'correspondence.csv'} ({len(corr)} matches, identity fraction {identity:.3f})")
    return EXIT_OK


def cmd_eval(args, cfg: RunConfig) -> int:
    ckpt = open_checkpoint(args.checkpoint)
    manifests = list(args.manifest or cfg.data["manifest"])
    if len(manifests) != 1:
        raise DataError("eval needs exactly one manifest")
    if not Path(manifests[0]).is_file():
        raise DataError(f"manifest not found: {manifests[0]}")
    echo_config(cfg, args.out)
    e = cfg.eval
    report = evaluate(manifests[0], ckpt.model, protocol=e.protocol, tau_grid=e.tau_grid, seed=e.seed,
                      matcher=e.matcher, train_augmentation=ckpt.train_config.get("rotation_augmentation"),
                      normalize=bool(ckpt.train_config.get("normalize", True)))
    report.write(args.out)
    print(f"protocol={report.protocol} matcher={report.matcher} pairs={len(report.pairs)} "
          f"mean_iou={report.mean_iou} baseline_iou={report.mean_baseline_iou}")
    return EXIT_OK


def cmd_check_equivariance(args, cfg: RunConfig) -> int:
    if args.trials < 1:
        raise ConfigError(f"--trials must be >= 1, got {args.trials}")
    if args.checkpoint is not None:
        model = open_checkpoint(args.checkpoint).model
    else:
        model = build_model(cfg.model, seed=cfg.train.seed)
    if args.inject_fault:
        inject_fault(model, args.inject_fault)
    double = model.dtype == torch.float64
    comps = measure_equivariance(model, args.trials, seed=cfg.train.seed)
    layers = layer_errors(model, args.trials, seed=cfg.train.seed)

    print(f"{'component':<14} {'max_rel_error':>14} {'gate':>8}  status")
    failed = []
    for name, err in comps.items():
        gate = COMPONENT_GATES[name][1 if double else 0]
        ok = err < gate
        failed += [] if ok else [name]
        print(f"{name:<14} {err:>14.3e} {gate:>8.0e}  {'ok' if ok else 'FAIL'}")
    bad_layers = [(n, e) for n, e in layers if not e < LAYER_GATE]
    if failed or bad_layers:
        if bad_layers:
            name, err = bad_layers[0]
            print(f"first non-equivariant layer: {name} (max rel error {err:.3e})")
        raise GateExceeded(f"equivariance gate exceeded: components {failed or 'none'}; "
                           f"layer {bad_layers[0][0] if bad_layers else 'none'}")
    print(f"all gates passed over {args.trials} rotations ({len(layers)} layers checked)")
    return EXIT_OK


def cmd_gen_synthetic(args, cfg: RunConfig) -> int:
    if args.family not in FAMILIES:
        raise ConfigError(f"unknown family {args.family!r}; expected one of {FAMILIES}")
    if args.instances < 2 or args.pairs < 0:
        raise ConfigError("--instances must be >= 2 and --pairs >= 0")
    out = Path(args.out)
    train_shapes, test_pairs = synthetic_dataset(args.family, args.instances, args.pairs, args.points,
                                                 args.spread, seed=cfg.train.seed)

    def save(cloud, stem):
        write_point_cloud(out / "shapes" / f"{stem}.xyz", cloud)
        write_keypoints(out / "shapes" / f"{stem}.kp", cloud.keypoints)
        return out / "shapes" / f"{stem}.xyz", out / "shapes" / f"{stem}.kp"

    files = [save(c, f"train_{i:04d}") for i, c in enumerate(train_shapes)]
    n = len(files)
    write_manifest(out / "train.json", Manifest(args.family, [
        PairEntry(files[i][0], files[(i + 1) % n][0], files[i][1], files[(i + 1) % n][1]) for i in range(n)]))
    entries = []
    for i, (src, tgt) in enumerate(test_pairs):
        (s, skp), (t, tkp) = save(src, f"test_{i:04d}_src"), save(tgt, f"test_{i:04d}_tgt")
        entries.append(PairEntry(s, t, skp, tkp))
    write_manifest(out / "test.json", Manifest(args.family, entries))
    print(f"wrote {n} training shapes and {len(entries)} test pairs under {out}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "check-equivariance": cmd_check_equivariance,
    "gen-synthetic": cmd_gen_synthetic,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="config override, repeatable; keys may omit the section if unambiguous")
    common.add_argument("--seed", type=int, help="seed for initialization, sampling and rotations")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="ristcorr", description="Rotation-invariant dense shape correspondence.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="self-supervised training")
    t.add_argument("--manifest", action="append", help="training manifest, repeatable")

    i = sub.add_parser("infer", parents=[common], help="dense correspondence for one pair")
    i.add_argument("--checkpoint")
    i.add_argument("--source")
    i.add_argument("--target")
    i.add_argument("--matcher", choices=sorted(MATCHERS))

    e = sub.add_parser("eval", parents=[common], help="IoU / PCK evaluation over a manifest")
    e.add_argument("--checkpoint")
    e.add_argument("--manifest", action="append")
    e.add_argument("--protocol", choices=["aligned", "rotated"])
    e.add_argument("--matcher", choices=sorted(MATCHERS))

    c = sub.add_parser("check-equivariance", parents=[common], help="rotation property check")
    c.add_argument("--checkpoint", help="checkpoint to test (default: randomly initialized model)")
    c.add_argument("--trials", type=int, default=100)
    c.add_argument("--inject-fault", metavar="LAYER", help="debug: add a constant bias to a layer's output")

    g = sub.add_parser("gen-synthetic", parents=[common], help="write a synthetic dataset with manifests")
    g.add_argument("--family", default="dumbbell")
    g.add_argument("--instances", type=int, default=60)
    g.add_argument("--pairs", type=int, default=20)
    g.add_argument("--points", type=int, default=128)
    g.add_argument("--spread", type=float, default=0.2)
    return p


def resolve_config(args) -> RunConfig:
    overrides = list(args.override)
    if args.seed is not None:
        overrides += [f"train.seed={args.seed}", f"eval.seed={args.seed}"]
    if getattr(args, "protocol", None):
        overrides.append(f"eval.protocol={args.protocol}")
    if getattr(args, "matcher", None):
        overrides.append(f"eval.matcher={args.matcher}")
    cfg = load_run_config(args.config, overrides)
    if getattr(args, "matcher", None) is None and hasattr(args, "matcher"):
        args.matcher = cfg.eval.matcher
    return cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr, force=True)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, CheckpointError, InvalidArgument) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except DataError as exc:
        log.error("%s", exc)
        return EXIT_DATA
    except NumericalFailure as exc:
        log.error("numerical failure in %s: %s", exc.stage, exc)
        return EXIT_NUMERIC
    except GateExceeded as exc:
        log.error("%s", exc)
        return EXIT_GATE


if __name__ == "__main__":
    sys.exit(main())
