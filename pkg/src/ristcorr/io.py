"""File formats: point-cloud text, keypoint lists, dataset manifests, atomic writes."""

from __future__ import annotations

import json
import os
import tempfile
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import DataError, InvalidArgument
from .geometry import PointCloud


@contextmanager
def atomic_open(path, mode: str = "w"):
    """Write to a temp file in the destination directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_point_cloud(path, category: str = "", keypoints_path=None) -> PointCloud:
    """``x y z`` or ``x y z label`` per line; ``#`` lines ignored."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"point cloud file not found: {path}")
    rows = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise DataError(f"{path}:{lineno}: expected 3 or 4 columns, got {len(parts)}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric value") from None
    if not rows:
        raise DataError(f"{path}: no points")
    widths = {len(r) for r in rows}
    if len(widths) != 1:
        raise DataError(f"{path}: mixed labeled and unlabeled rows")
    arr = np.array(rows)
    labels = arr[:, 3].astype(np.int64) if arr.shape[1] == 4 else None
    keypoints = read_keypoints(keypoints_path) if keypoints_path else None
    try:
        return PointCloud(arr[:, :3], labels=labels, keypoints=keypoints, category=category)
    except InvalidArgument as exc:
        raise DataError(f"{path}: {exc}") from None


def write_point_cloud(path, cloud: PointCloud, with_labels: bool = True) -> None:
    with atomic_open(path) as fh:
        for i, p in enumerate(cloud.points):
            row = " ".join(repr(float(v)) for v in p)
            if with_labels and cloud.labels is not None:
                row += f" {int(cloud.labels[i])}"
            fh.write(row + "\n")


def read_keypoints(path) -> list:
    """Lines of ``semantic_id point_index``."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"keypoint file not found: {path}")
    out = []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 2:
            raise DataError(f"{path}:{lineno}: expected 'semantic_id point_index'")
        out.append((int(parts[0]), int(parts[1])))
    return out


def write_keypoints(path, keypoints) -> None:
    with atomic_open(path) as fh:
        for sid, idx in keypoints:
            fh.write(f"{sid} {idx}\n")


@dataclass
class PairEntry:
    source: Path
    target: Path
    keypoints_source: Optional[Path] = None
    keypoints_target: Optional[Path] = None


@dataclass
class Manifest:
    category: str
    pairs: list = field(default_factory=list)
    path: Optional[Path] = None

    def load_pair(self, entry: PairEntry):
        src = read_point_cloud(entry.source, self.category, entry.keypoints_source)
        tgt = read_point_cloud(entry.target, self.category, entry.keypoints_target)
        return src, tgt

    def shape_files(self) -> list:
        """Distinct shape files referenced by the manifest, in first-seen order."""
        seen = {}
        for e in self.pairs:
            seen.setdefault(e.source, e.keypoints_source)
            seen.setdefault(e.target, e.keypoints_target)
        return list(seen.items())

    def load_shapes(self) -> list:
        return [read_point_cloud(p, self.category, kp) for p, kp in self.shape_files()]


def read_manifest(path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict) or "category" not in doc or "pairs" not in doc:
        raise DataError(f"{path}: manifest needs 'category' and 'pairs'")
    base = path.parent

    def resolve(p):
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else base / p

    pairs = []
    for i, item in enumerate(doc["pairs"]):
        if "source" not in item or "target" not in item:
            raise DataError(f"{path}: pair {i} needs 'source' and 'target'")
        pairs.append(PairEntry(resolve(item["source"]), resolve(item["target"]),
                               resolve(item.get("keypoints_source")), resolve(item.get("keypoints_target"))))
    return Manifest(str(doc["category"]), pairs, path)


def write_manifest(path, manifest: Manifest) -> None:
    base = Path(path).parent

    def rel(p):
        if p is None:
            return None
        p = Path(p)
        try:
            return str(p.relative_to(base))
        except ValueError:
            return str(p)

    pairs = []
    for e in manifest.pairs:
        item = {"source": rel(e.source), "target": rel(e.target)}
        if e.keypoints_source is not None:
            item["keypoints_source"] = rel(e.keypoints_source)
        if e.keypoints_target is not None:
            item["keypoints_target"] = rel(e.keypoints_target)
        pairs.append(item)
    with atomic_open(path) as fh:
        json.dump({"category": manifest.category, "pairs": pairs}, fh, indent=2)
