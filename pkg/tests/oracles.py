"""Independent reference implementations used as test oracles."""

from typing import Callable, Dict, List, Sequence

import numpy as np
import torch

GRAD_STEP = 1e-4
GRAD_TOL = 1e-3
GRAD_FLOOR = 1e-6


def central_difference(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor,
                       step: float = GRAD_STEP) -> torch.Tensor:
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        up = fn(x).item()
        flat[i] = orig - step
        down = fn(x).item()
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return grad


def analytic_gradient(fn: Callable[[torch.Tensor], torch.Tensor], x: torch.Tensor) -> torch.Tensor:
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    return x.grad.detach()


def max_relative_error(analytic: torch.Tensor, numeric: torch.Tensor,
                       floor: float = GRAD_FLOOR) -> float:
    """max_i |a_i - n_i| / max(|a_i|, |n_i|, floor)."""
    denom = torch.maximum(torch.maximum(analytic.abs(), numeric.abs()),
                          torch.full_like(analytic, floor))
    return float(((analytic - numeric).abs() / denom).max())


def gradient_error(fn, x) -> float:
    return max_relative_error(analytic_gradient(fn, x), central_difference(fn, x))


def bucket_by_residue(classes, n_mod: int, l_mod: int) -> Dict[tuple, List[tuple]]:
    out: Dict[tuple, List[tuple]] = {}
    for e, n, h in classes:
        key = (e - n_mod * (e // n_mod), n - n_mod * (n // n_mod), h - l_mod * (h // l_mod))
        out.setdefault(key, []).append((e, n, h))
    return out


def brute_force_recall(q_vecs: np.ndarray, q_xy: np.ndarray, db_vecs: np.ndarray,
                       db_xy: np.ndarray, db_ids: Sequence[str], thresholds: Sequence[int],
                       radius: float) -> Dict[int, float]:
    """Full ranking of every database row per query: score descending, then id ascending."""
    id_rank = np.empty(len(db_ids), dtype=np.int64)
    id_rank[np.argsort(np.asarray(db_ids, dtype=object))] = np.arange(len(db_ids))
    hits = {n: 0 for n in thresholds}
    for q in range(len(q_vecs)):
        scores = db_vecs.astype(np.float64) @ q_vecs[q].astype(np.float64)
        order = np.lexsort((id_rank, -scores))
        dist = np.sqrt(((db_xy[order] - q_xy[q]) ** 2).sum(axis=1))
        ok = np.flatnonzero(dist <= radius)
        for n in thresholds:
            if len(ok) and ok[0] < n:
                hits[n] += 1
    return {n: hits[n] / len(q_vecs) for n in thresholds}
