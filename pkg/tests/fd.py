"""Central finite differences, independent of autograd."""

import torch


def numeric_grad(fn, x: torch.Tensor, h: float = 1e-6, indices=None) -> torch.Tensor:
    """d fn / d x by central differences; ``fn`` returns a scalar tensor.

    With ``indices`` only those flat entries are differenced; the rest stay zero.
    """
    g = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), g.view(-1)
    with torch.no_grad():
        for i in (range(flat.numel()) if indices is None else indices):
            orig = flat[i].item()
            flat[i] = orig + h
            up = float(fn())
            flat[i] = orig - h
            down = float(fn())
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
    return g

def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    a, b = a.detach().reshape(-1), b.detach().reshape(-1)
    denom = max(float(a.norm()), float(b.norm()), 1e-30)
    return float((a - b).norm()) / denom

def check_grads(fn, tensors, h: float = 1e-6, joint: bool = False, sample: int = 0, seed: int = 0) -> float:
    """Relative error between autograd and finite-difference gradients.

    Per tensor, the largest error is returned.  With ``joint`` the gradients of all
    tensors are concatenated first, so parameters with near-zero gradients are
    judged on the scale of the whole gradient rather than their own.  ``sample > 0``
    compares only that many random entries per tensor.
    """
    for t in tensors:
        t.grad = None
    fn().backward()
    gen = torch.Generator().manual_seed(seed)
    analytic, numeric = [], []
    for t in tensors:
        idx = None
        if sample and t.numel() > sample:
            idx = torch.randperm(t.numel(), generator=gen)[:sample].tolist()
        a = t.grad.clone().reshape(-1)
        n = numeric_grad(fn, t, h, idx).reshape(-1)
        if idx is not None:
            a, n = a[idx], n[idx]
        analytic.append(a)
        numeric.append(n)
    if joint:
        return rel_error(torch.cat([a.reshape(-1) for a in analytic]), torch.cat([n.reshape(-1) for n in numeric]))
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))

def random_scalar_probe(shape, seed: int = 0, dtype=torch.float64) -> torch.Tensor:
    """Fixed random weights to reduce a tensor output to a generic scalar."""
    gen = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=gen, dtype=dtype)

