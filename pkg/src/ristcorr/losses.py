"""Point-set discrepancies used by the reconstruction objective.

All losses take ``(N, 3)`` tensors and return a differentiable scalar tensor.
Numpy inputs are accepted and converted (float64).
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .errors import InvalidArgument

EXACT_EMD_CAP = 512


def _as_points(x, name: str) -> torch.Tensor:
    t = torch.as_tensor(x)
    if not t.is_floating_point():
        t = t.to(torch.float64)
    if t.ndim != 2 or t.shape[1] != 3:
        raise InvalidArgument(f"{name} must be N x 3, got shape {tuple(t.shape)}")
    if t.shape[0] < 1:
        raise InvalidArgument(f"{name} is empty")
    return t


def _pair(pred, target, same_n: bool):
    pred, target = _as_points(pred, "pred"), _as_points(target, "target")
    if same_n and pred.shape[0] != target.shape[0]:
        raise InvalidArgument(f"point counts differ: {pred.shape[0]} vs {target.shape[0]}")
    return pred, target


def sq_distances(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Exact pairwise squared distances (no ``|a|^2 + |b|^2 - 2ab`` expansion)."""
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(-1)


def mse_paired(pred, target) -> torch.Tensor:
    """Mean over points of the squared distance between ``pred[i]`` and ``target[i]``."""
    pred, target = _pair(pred, target, same_n=True)
    return ((pred - target) ** 2).sum(-1).mean()


def chamfer(pred, target) -> torch.Tensor:
    """Symmetric squared Chamfer distance: mean nearest-neighbor term in each direction.

    Nearest neighbors are selected without gradient (first index on ties) and the
    distances are recomputed on the matched pairs, which gives the subgradient.
    """
    pred, target = _pair(pred, target, same_n=False)
    with torch.no_grad():
        d2 = sq_distances(pred, target)
        to_target = torch.argmin(d2, dim=1)
        to_pred = torch.argmin(d2, dim=0)
    forward = ((pred - target[to_target]) ** 2).sum(-1).mean()
    backward = ((target - pred[to_pred]) ** 2).sum(-1).mean()
    return forward + backward


def optimal_matching(pred, target) -> np.ndarray:
    """Permutation ``perm`` minimizing ``sum_i |pred[i] - target[perm[i]]|``."""
    pred, target = _pair(pred, target, same_n=True)
    if pred.shape[0] > EXACT_EMD_CAP:
        raise InvalidArgument(f"N={pred.shape[0]} exceeds the exact EMD cap {EXACT_EMD_CAP}; use emd_approx")
    with torch.no_grad():
        cost = sq_distances(pred, target).sqrt().cpu().numpy()
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty_like(cols)
    perm[rows] = cols
    return perm


def _euclid(diff: torch.Tensor) -> torch.Tensor:
    # the sqrt has an infinite slope at 0; matched coincident points contribute zero gradient
    sq = (diff * diff).sum(-1)
    safe = torch.where(sq > 0, sq, torch.ones_like(sq))
    return torch.where(sq > 0, safe.sqrt(), torch.zeros_like(sq))


def emd_exact(pred, target, return_matching: bool = False):
    """Earth Mover's Distance: mean Euclidean distance under the optimal bijection.

    The bijection comes from an exact assignment solver and is held fixed for the
    gradient.
    """
    pred, target = _pair(pred, target, same_n=True)
    perm = optimal_matching(pred, target)
    value = _euclid(pred - target[torch.as_tensor(perm)]).mean()
    return (value, perm) if return_matching else value


class SinkhornResult(NamedTuple):
    value: torch.Tensor
    plan: torch.Tensor
    converged: bool
    iterations: int
    marginal_error: float


def emd_approx(pred, target, epsilon: float = 0.01, iters: int = 1000, tol: float = 1e-6) -> SinkhornResult:
    """Entropic-regularized transport cost with uniform marginals (log-domain Sinkhorn).

    ``value`` is ``sum_ij C_ij G_ij`` for the regularized plan ``G`` with masses
    ``1/N``, which is the mean-distance scale of :func:`emd_exact` and upper-bounds
    it whenever the marginals are met.  The plan is held fixed for the gradient.
    """
    if epsilon <= 0:
        raise InvalidArgument("epsilon must be positive")
    if iters < 1:
        raise InvalidArgument("iters must be >= 1")
    pred, target = _pair(pred, target, same_n=True)
    n = pred.shape[0]
    with torch.no_grad():
        cost = sq_distances(pred, target).sqrt()
        log_mu = torch.full((n,), -np.log(n), dtype=cost.dtype)
        f = torch.zeros(n, dtype=cost.dtype)
        g = torch.zeros(n, dtype=cost.dtype)
        err = float("inf")
        it = 0
        for it in range(1, iters + 1):
            f = epsilon * (log_mu - torch.logsumexp((g[None, :] - cost) / epsilon, dim=1))
            g = epsilon * (log_mu - torch.logsumexp((f[:, None] - cost) / epsilon, dim=0))
            if it % 10 == 0 or it == iters:
                plan = torch.exp((f[:, None] + g[None, :] - cost) / epsilon)
                err = float((plan.sum(1) - 1.0 / n).abs().sum())
                if err < tol:
                    break
        plan = torch.exp((f[:, None] + g[None, :] - cost) / epsilon)
    value = (plan * _euclid(pred[:, None, :] - target[None, :, :])).sum()
    return SinkhornResult(value, plan, err < tol, it, err)
