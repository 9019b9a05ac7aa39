"""Point clouds, rotations, neighborhoods and the procedural shape families.

Rotation convention: points and vector features are stored as row vectors, and
rotating by ``R`` maps a row ``x`` to ``x @ R.T``.  The same map is applied to
coordinates and to vector-list features, so "rotate the input by R" and
"rotate the features by R" always mean the same thing.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import InvalidArgument

ORTHO_TOL = 1e-6


def as_rng(seed_or_rng=None) -> np.random.Generator:
    if isinstance(seed_or_rng, np.random.Generator):
        return seed_or_rng
    return np.random.default_rng(seed_or_rng)


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray
    labels: Optional[np.ndarray] = None
    keypoints: Optional[list] = None
    category: str = ""

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3 or pts.shape[0] < 1:
            raise InvalidArgument(f"points must be N x 3 with N >= 1, got shape {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvalidArgument("points contain non-finite coordinates")
        object.__setattr__(self, "points", pts)
        n = pts.shape[0]
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int64)
            if labels.shape != (n,):
                raise InvalidArgument(f"labels must have length {n}, got shape {labels.shape}")
            object.__setattr__(self, "labels", labels)
        if self.keypoints is not None:
            kps = [(int(s), int(i)) for s, i in self.keypoints]
            for sid, idx in kps:
                if not 0 <= idx < n:
                    raise InvalidArgument(f"keypoint {sid} index {idx} out of range [0, {n})")
            object.__setattr__(self, "keypoints", kps)

    def __len__(self) -> int:
        return self.points.shape[0]

    def with_points(self, points: np.ndarray) -> "PointCloud":
        return replace(self, points=points)

    def subset(self, index: np.ndarray) -> "PointCloud":
        """Resample by index; keypoints are dropped since their indices no longer hold."""
        index = np.asarray(index, dtype=np.int64)
        labels = None if self.labels is None else self.labels[index]
        return PointCloud(self.points[index], labels=labels, category=self.category)


@dataclass(frozen=True)
class Rotation:
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise InvalidArgument(f"rotation matrix must be 3 x 3, got {m.shape}")
        if not np.allclose(m.T @ m, np.eye(3), rtol=0.0, atol=ORTHO_TOL):
            raise InvalidArgument("rotation matrix is not orthonormal")
        if abs(np.linalg.det(m) - 1.0) > ORTHO_TOL:
            raise InvalidArgument("rotation matrix must have determinant +1")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Rotation":
        return cls(np.eye(3))

    @classmethod
    def from_quaternion(cls, q: Sequence[float]) -> "Rotation":
        """Rotation from a quaternion (w, x, y, z); normalized before conversion."""
        w, x, y, z = np.asarray(q, dtype=np.float64) / np.linalg.norm(q)
        return cls(np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]))

    @classmethod
    def about_axis(cls, axis: Sequence[float], angle: float) -> "Rotation":
        axis = np.asarray(axis, dtype=np.float64)
        axis = axis / np.linalg.norm(axis)
        half = 0.5 * angle
        return cls.from_quaternion([np.cos(half), *(np.sin(half) * axis)])

    def inverse(self) -> "Rotation":
        return Rotation(self.matrix.T)

    def angle(self) -> float:
        c = 0.5 * (np.trace(self.matrix) - 1.0)
        return float(np.arccos(np.clip(c, -1.0, 1.0)))

    def apply(self, x):
        """Rotate row vectors in the trailing axis (numpy array or torch tensor)."""
        if isinstance(x, np.ndarray):
            return x @ self.matrix.T
        import torch

        m = torch.as_tensor(self.matrix, dtype=x.dtype, device=x.device)
        return x @ m.T


def shoemake_quaternion(u: Sequence[float]) -> np.ndarray:
    """Map three uniform variates on [0, 1) to a uniform unit quaternion (w, x, y, z)."""
    u1, u2, u3 = u
    r1, r2 = np.sqrt(1.0 - u1), np.sqrt(u1)
    t1, t2 = 2.0 * np.pi * u2, 2.0 * np.pi * u3
    return np.array([np.cos(t2) * r2, np.sin(t1) * r1, np.cos(t1) * r1, np.sin(t2) * r2])


def sample_uniform_rotation(seed_or_rng=None) -> Rotation:
    """Haar-uniform rotation via Shoemake's subgroup algorithm."""
    rng = as_rng(seed_or_rng)
    return Rotation.from_quaternion(shoemake_quaternion(rng.random(3)))


def rotate(cloud: PointCloud, rotation: Rotation) -> PointCloud:
    return cloud.with_points(rotation.apply(cloud.points))


def knn_graph(cloud, k: int) -> np.ndarray:
    """Indices of the ``k`` nearest neighbors of every point, self excluded.

    Ties in distance go to the lower index (stable sort on exact squared distances).
    """
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)
    n = pts.shape[0]
    if not 1 <= k < n:
        raise InvalidArgument(f"k must satisfy 1 <= k < N (k={k}, N={n})")
    diff = pts[:, None, :] - pts[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    d2[np.arange(n), np.arange(n)] = np.inf
    return np.argsort(d2, axis=1, kind="stable")[:, :k]


def normalize_to_unit_sphere(cloud: PointCloud) -> PointCloud:
    pts = cloud.points - cloud.points.mean(axis=0)
    radius = np.linalg.norm(pts, axis=1).max()
    if radius > 0:
        pts = pts / radius
    return cloud.with_points(pts)


# ---------------------------------------------------------------------------
# synthetic shape families

FAMILIES = ("ellipsoid-2part", "dumbbell", "bent-rod")

# Default per-family shape parameters; a SyntheticPairSpec may give a prefix and the rest is filled in.
#   ellipsoid-2part: axes a, b, c; egg taper; x-bend
#   dumbbell: radius of bulb 1, radius of bulb 2, bar half-length, bar radius, lateral offset of bulb 2
#   bent-rod: length, radius, bend angle (radians), end flare
DEFAULT_PARAMS = {
    "ellipsoid-2part": (1.0, 0.7, 1.4, 0.25, 0.3),
    "dumbbell": (0.45, 0.3, 0.6, 0.12, 0.25),
    "bent-rod": (2.0, 0.15, 1.2, 0.6),
}

# fraction of the dumbbell's s range taken by each bulb; the bar fills the middle
BULB_SPLIT = 0.4

# Surface-parameter values of the semantic keypoints of each family; they are
# placed at the first indices of every generated cloud.
KEYPOINT_PARAMS = {
    "ellipsoid-2part": np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.0], [0.5, 0.25], [0.5, 0.5], [0.5, 0.75]]),
    "dumbbell": np.array([[0.0, 0.0], [0.25, 0.5], [0.75, 0.5], [1.0, 0.0], [0.5, 0.0], [0.5, 0.5]]),
    "bent-rod": np.array([[0.0, 0.0], [1.0, 0.0], [0.5, 0.0], [0.5, 0.5], [0.05, 0.25], [0.95, 0.75]]),
}


@dataclass(frozen=True)
class SyntheticPairSpec:
    family: str
    params: tuple = ()
    n_points: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise InvalidArgument(f"unknown synthetic family {self.family!r}; expected one of {FAMILIES}")
        if self.n_points < len(KEYPOINT_PARAMS[self.family]):
            raise InvalidArgument("n_points too small to hold the family keypoints")
        defaults = DEFAULT_PARAMS[self.family]
        params = tuple(float(p) for p in self.params)
        if len(params) > len(defaults):
            raise InvalidArgument(f"{self.family} takes at most {len(defaults)} parameters")
        object.__setattr__(self, "params", params + defaults[len(params):])


def sample_surface_params(family: str, n: int, rng) -> np.ndarray:
    """``n`` surface parameters (s, t) in [0, 1)^2, keypoint parameters first.

    The s coordinate runs along the long axis of every family and sets the part label.
    """
    rng = as_rng(rng)
    kp = KEYPOINT_PARAMS[family]
    rest = rng.random((n - len(kp), 2))
    # area-uniform along the polar direction for the closed surfaces
    if family == "ellipsoid-2part":
        rest[:, 0] = np.arccos(1.0 - 2.0 * rest[:, 0]) / np.pi
    elif family == "dumbbell":
        for lo, hi in ((0.0, BULB_SPLIT), (1.0 - BULB_SPLIT, 1.0)):
            inside = (rest[:, 0] >= lo) & (rest[:, 0] < hi)
            local = (rest[inside, 0] - lo) / (hi - lo)
            rest[inside, 0] = lo + (hi - lo) * np.arccos(1.0 - 2.0 * local) / np.pi
    return np.concatenate([kp, rest], axis=0)


def _surface(family: str, params: tuple, st: np.ndarray) -> np.ndarray:
    s, t = st[:, 0], st[:, 1]
    phi = 2.0 * np.pi * t
    if family == "ellipsoid-2part":
        a, b, c, taper, bend = params
        polar = np.pi * s
        sx, sy, sz = np.sin(polar) * np.cos(phi), np.sin(polar) * np.sin(phi), -np.cos(polar)
        scale = 1.0 + taper * sz
        return np.stack([a * sx * scale + bend * sz * sz, b * sy * scale, c * sz], axis=1)
    if family == "dumbbell":
        r1, r2, half_len, bar_r, offset = params
        pts = np.empty((len(s), 3))
        first = s < BULB_SPLIT
        second = s >= 1.0 - BULB_SPLIT
        bar = ~(first | second)
        for mask, local, r, center in (
            (first, s / BULB_SPLIT, r1, np.array([0.0, 0.0, -half_len - r1])),
            (second, (s - 1.0 + BULB_SPLIT) / BULB_SPLIT, r2, np.array([offset, 0.0, half_len + r2])),
        ):
            polar = np.pi * local[mask]
            # bulbs are flattened along y so the shape has no rotational symmetry
            unit = np.stack([np.sin(polar) * np.cos(phi[mask]), 0.6 * np.sin(polar) * np.sin(phi[mask]),
                             -np.cos(polar)], axis=1)
            pts[mask] = center + r * unit
        u = (s[bar] - BULB_SPLIT) / (1.0 - 2.0 * BULB_SPLIT)
        z = -half_len + 2.0 * half_len * u
        pts[bar] = np.stack([offset * u + bar_r * np.cos(phi[bar]), bar_r * np.sin(phi[bar]), z], axis=1)
        return pts
    if family == "bent-rod":
        length, radius, bend, flare = params
        u = s - 0.5
        arc = u * length
        if abs(bend) < 1e-9:
            center = np.stack([np.zeros_like(arc), np.zeros_like(arc), arc], axis=1)
            tangent_angle = np.zeros_like(arc)
        else:
            rho = length / bend
            tangent_angle = arc / rho
            center = np.stack([rho * (1.0 - np.cos(tangent_angle)), np.zeros_like(arc),
                               rho * np.sin(tangent_angle)], axis=1)
        r = radius * (1.0 + flare * np.clip(u, 0.0, None) * 2.0)
        normal = np.stack([np.cos(tangent_angle), np.zeros_like(arc), -np.sin(tangent_angle)], axis=1)
        binormal = np.array([0.0, 1.0, 0.0])
        # elliptic cross-section breaks the symmetry about the bending plane
        return center + r[:, None] * (np.cos(phi)[:, None] * normal
                                      + 0.5 * np.sin(phi)[:, None] * binormal)
    raise InvalidArgument(f"unknown family {family!r}")


def part_labels(family: str, st: np.ndarray) -> np.ndarray:
    return (st[:, 0] >= 0.5).astype(np.int64)


def generate_shape(spec: SyntheticPairSpec, surface_params: Optional[np.ndarray] = None,
                   normalize: bool = True) -> PointCloud:
    if surface_params is None:
        surface_params = sample_surface_params(spec.family, spec.n_points, spec.seed)
    pts = _surface(spec.family, spec.params, surface_params)
    n_kp = len(KEYPOINT_PARAMS[spec.family])
    cloud = PointCloud(pts, labels=part_labels(spec.family, surface_params),
                       keypoints=[(m, m) for m in range(n_kp)], category=spec.family)
    return normalize_to_unit_sphere(cloud) if normalize else cloud


def generate_synthetic_pair(spec1: SyntheticPairSpec, spec2: SyntheticPairSpec, normalize: bool = True):
    """Two instances sampled at identical surface parameters (drawn from ``spec1.seed``).

    Returns ``(source, target, ground_truth)`` where the ground truth maps index i to i.
    """
    from .inference import CorrespondenceSet

    if spec1.family != spec2.family or spec1.n_points != spec2.n_points:
        raise InvalidArgument("synthetic pair specs must share family and point count")
    st = sample_surface_params(spec1.family, spec1.n_points, spec1.seed)
    source = generate_shape(spec1, st, normalize=normalize)
    target = generate_shape(spec2, st, normalize=normalize)
    idx = np.arange(spec1.n_points)
    gt = CorrespondenceSet(pairs=np.stack([idx, idx], axis=1), reconstructed=target.points.copy(),
                           direction="source->target", matcher="ground-truth")
    return source, target, gt


def random_shape_params(family: str, rng, spread: float = 0.2) -> tuple:
    """Family defaults jittered multiplicatively by up to ``spread`` (intra-class variation)."""
    rng = as_rng(rng)
    base = np.asarray(DEFAULT_PARAMS[family])
    return tuple(base * (1.0 + spread * rng.uniform(-1.0, 1.0, size=base.shape)))


def resample(cloud: PointCloud, n: int, rng) -> PointCloud:
    """Random subset (or with replacement when the cloud is smaller) of exactly ``n`` points."""
    rng = as_rng(rng)
    m = len(cloud)
    if m == n:
        return cloud
    index = rng.choice(m, size=n, replace=m < n)
    return cloud.subset(np.sort(index))


def synthetic_dataset(family: str, n_train: int, n_pairs: int, n_points: int = 128,
                      spread: float = 0.2, seed: int = 0):
    """Training instances plus held-out pairs with index-aligned ground truth.

    Returns ``(train_shapes, test_pairs)``; each test pair is ``(source, target)``
    sampled at shared surface parameters, so point i corresponds to point i.
    """
    rng = np.random.default_rng(seed)
    train = [generate_shape(SyntheticPairSpec(family, random_shape_params(family, rng, spread), n_points,
                                              seed=int(rng.integers(2**31))))
             for _ in range(n_train)]
    pairs = []
    for _ in range(n_pairs):
        s1 = SyntheticPairSpec(family, random_shape_params(family, rng, spread), n_points,
                               seed=int(rng.integers(2**31)))
        s2 = SyntheticPairSpec(family, random_shape_params(family, rng, spread), n_points, seed=0)
        source, target, _ = generate_synthetic_pair(s1, s2)
        pairs.append((source, target))
    return train, pairs
