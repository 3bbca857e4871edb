"""Brute-force oracles and a finite-difference gradient checker.

Everything here is deliberately slow and obvious: quadratic scans, full
permutation enumeration, and explicit neighbor loops, used as independent
references for the optimized implementations.
"""

from __future__ import annotations

import itertools

import numpy as np
import torch


def brute_chamfer(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean of squared nearest-neighbor distances, quadratic scan."""
    d_ab = [min(float(((x - y) ** 2).sum()) for y in b) for x in a]
    d_ba = [min(float(((x - y) ** 2).sum()) for y in a) for x in b]
    return sum(d_ab) / len(d_ab) + sum(d_ba) / len(d_ba)


def brute_emd(a: np.ndarray, b: np.ndarray) -> float:
    """Minimum mean matched distance over all bijections (n <= 8)."""
    n = len(a)
    cost = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    best = np.inf
    for perm in itertools.permutations(range(n)):
        total = sum(cost[i, perm[i]] for i in range(n))
        best = min(best, total)
    return best / n


def brute_boundary(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a background (or out-of-grid) 6-neighbor."""
    m = mask.astype(bool)
    out = []
    dims = m.shape
    for z, y, x in np.argwhere(m):
        for dz, dy, dx in ((1, 0, 0), (-1, 0, 0), (0, 1, 0),
                           (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            nz, ny, nx = z + dz, y + dy, x + dx
            inside = 0 <= nz < dims[0] and 0 <= ny < dims[1] and 0 <= nx < dims[2]
            if not inside or not m[nz, ny, nx]:
                out.append((z, y, x))
                break
    return np.asarray(out, dtype=np.float64).reshape(-1, 3)


def brute_hd_avgd(a: np.ndarray, b: np.ndarray) -> tuple[float, float]:
    """Hausdorff and symmetric average distance between boundary sets.

    The full quadratic distance matrix is materialized; no spatial index.
    """
    sa, sb = brute_boundary(a), brute_boundary(b)
    dists = np.linalg.norm(sa[:, None, :] - sb[None, :, :], axis=-1)
    d_ab = dists.min(axis=1)
    d_ba = dists.min(axis=0)
    hd = max(d_ab.max(), d_ba.max())
    avgd = (d_ab.sum() + d_ba.sum()) / (len(d_ab) + len(d_ba))
    return float(hd), float(avgd)


def reference_fps(candidates: np.ndarray, k: int, seed: int = 0) -> np.ndarray:
    """Quadratic-rescan farthest point sampling with the spec tie rule.

    First index uniform by seed; afterwards each pick maximizes the
    minimum squared distance to all chosen points, recomputed from
    scratch, ties to the lowest candidate index.
    """
    candidates = np.asarray(candidates, dtype=np.float64)
    n = len(candidates)
    rng = np.random.default_rng(seed)
    chosen = [int(rng.integers(n))]
    for _ in range(min(k, n) - 1):
        best_idx, best_val = None, -1.0
        for i in range(n):
            min_sq = min(float(((candidates[i] - candidates[j]) ** 2).sum()) for j in chosen)
            if min_sq > best_val:
                best_idx, best_val = i, min_sq
        chosen.append(best_idx)
    if k > n:
        chosen.extend(int(i) for i in rng.integers(n, size=k - n))
    return np.asarray(chosen, dtype=np.int64)


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a), abs(b))


def grad_check(make_loss, tensors, n_coords: int = 100, h: float = 1e-6,
               tol: float = 1e-4, seed: int = 0) -> float:
    """Compare autograd against central differences at sampled coordinates.

    `make_loss` must rebuild the scalar loss from the current tensor
    values on every call.  Returns the worst relative error seen.
    """
    rng = np.random.default_rng(seed)
    for t in tensors:
        if t.grad is not None:
            t.grad = None
    loss = make_loss()
    loss.backward()
    grads = []
    for t in tensors:
        assert t.grad is not None, "missing gradient"
        grads.append(t.grad.detach().clone())

    worst = 0.0
    per_tensor = max(1, n_coords // len(tensors))
    for t, g in zip(tensors, grads):
        flat = t.detach().reshape(-1)
        g_flat = g.reshape(-1)
        count = min(per_tensor, flat.numel())
        idxs = rng.choice(flat.numel(), size=count, replace=False)
        for i in idxs:
            orig = float(flat[i])
            with torch.no_grad():
                flat[i] = orig + h
            up = float(make_loss().detach())
            with torch.no_grad():
                flat[i] = orig - h
            down = float(make_loss().detach())
            with torch.no_grad():
                flat[i] = orig
            fd = (up - down) / (2.0 * h)
            an = float(g_flat[i])
            err = rel_err(fd, an)
            worst = max(worst, err)
            assert err <= tol, f"grad mismatch at coord {int(i)}: fd={fd} autograd={an} rel={err}"
    return worst
