"""Contrastive, label-smoothed, large-margin cosine and triplet losses plus batch-hard mining.

All losses take feature matrices as torch tensors and return a scalar tensor that
supports autograd. With ``normalize=True`` rows are L2-normalized before any dot
product.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F


@dataclass
class LossConfig:
    tau: float = 0.07
    normalize: bool = True
    epsilon: float = 0.1
    lmcl_scale: float = 30.0
    lmcl_margin: float = 0.40
    triplet_margin: float = 0.1
    triplet_distance: str = "euclidean"
    mining: str = "batch_hard"
    weight_ce: float = 1.0
    weight_cos: float = 1.0
    weight_triplet: float = 1.0

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must lie in [0, 1), got {self.epsilon}")
        if self.lmcl_scale <= 0 or not 0 <= self.lmcl_margin < 1:
            raise ValueError("LMCL needs s > 0 and 0 <= m < 1")
        if self.triplet_margin <= 0:
            raise ValueError("triplet margin must be positive")
        if self.triplet_distance not in ("euclidean", "cosine"):
            raise ValueError(f"unknown distance {self.triplet_distance!r}")
        if self.mining not in ("batch_hard", "random"):
            raise ValueError(f"unknown mining mode {self.mining!r}")


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")


def _unit(x: torch.Tensor) -> torch.Tensor:
    norms = x.norm(dim=-1, keepdim=True)
    if (norms == 0).any():
        raise ValueError("cannot normalize a zero-norm feature row")
    return x / norms


def _maybe_unit(x: torch.Tensor, normalize: bool) -> torch.Tensor:
    return _unit(x) if normalize else x


def image_to_text_loss(visual: torch.Tensor, text: torch.Tensor, tau: float = 0.07,
                       normalize: bool = True) -> torch.Tensor:
    """Mean over images of -log softmax_j(V_i . T_j / tau) at j = i."""
    _check_tau(tau)
    if visual.shape != text.shape:
        raise ValueError(f"paired batch expected, got {tuple(visual.shape)} and {tuple(text.shape)}")
    v, t = _maybe_unit(visual, normalize), _maybe_unit(text, normalize)
    logits = v @ t.T / tau
    return F.cross_entropy(logits, torch.arange(len(v)))


def positive_sets(labels: Sequence[int]) -> Dict[int, List[int]]:
    """Row indices per label present in the batch."""
    out: Dict[int, List[int]] = {}
    for i, y in enumerate(torch.as_tensor(labels).tolist()):
        out.setdefault(y, []).append(i)
    return out


def text_to_image_loss(visual: torch.Tensor, text: torch.Tensor, labels, tau: float = 0.07,
                       normalize: bool = True) -> torch.Tensor:
    """Text row i (prompt of class y_i) scored against every image of the batch.

    The per-token loss averages -log softmax over all images at each image sharing
    label y_i; the result is the mean over text tokens.
    """
    _check_tau(tau)
    labels = torch.as_tensor(labels)
    if visual.shape != text.shape or len(labels) != len(visual):
        raise ValueError("paired batch with one label per row expected")
    v, t = _maybe_unit(visual, normalize), _maybe_unit(text, normalize)
    log_prob = F.log_softmax(t @ v.T / tau, dim=1)
    pos = (labels[:, None] == labels[None, :]).to(log_prob.dtype)
    n_pos = pos.sum(dim=1)
    if (n_pos == 0).any():
        raise ValueError("empty positive set")
    return (-(pos * log_prob).sum(dim=1) / n_pos).mean()


def stage1_loss(visual: torch.Tensor, text: torch.Tensor, labels, tau: float = 0.07,
                normalize: bool = True) -> torch.Tensor:
    return (image_to_text_loss(visual, text, tau, normalize)
            + text_to_image_loss(visual, text, labels, tau, normalize))


def smoothed_targets(targets, num_classes: int, epsilon: float) -> torch.Tensor:
    """Rows q with q_k = (1 - eps) * [k == y] + eps / K."""
    if not 0 <= epsilon < 1:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    targets = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    q = torch.full((len(targets), num_classes), epsilon / num_classes, dtype=torch.float64)
    q[torch.arange(len(targets)), targets] += 1.0 - epsilon
    return q


def smoothed_cross_entropy(visual: torch.Tensor, cache: torch.Tensor, targets,
                           epsilon: float = 0.1, tau: float = 0.07,
                           normalize: bool = True) -> torch.Tensor:
    """Label-smoothed image-to-text cross entropy against frozen per-class text rows.

    ``visual`` is (B, D) or a single (D,) row; ``cache`` is (K, D). Mean over rows.
    """
    _check_tau(tau)
    if visual.ndim == 1:
        visual = visual[None]
    targets = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    if cache.shape[-1] != visual.shape[-1]:
        raise ValueError("feature dim mismatch between visual rows and text cache")
    if len(targets) != len(visual):
        raise ValueError("one target per visual row expected")
    k = cache.shape[0]
    if len(targets) and (targets.min() < 0 or targets.max() >= k):
        raise ValueError(f"target outside the {k}-class cache")
    v, t = _maybe_unit(visual, normalize), _maybe_unit(cache.detach(), normalize)
    log_prob = F.log_softmax(v @ t.T / tau, dim=1)
    q = smoothed_targets(targets, k, epsilon).to(log_prob.dtype)
    return -(q * log_prob).sum(dim=1).mean()


def lmcl_loss(features: torch.Tensor, labels, weight: torch.Tensor, scale: float = 30.0,
              margin: float = 0.40) -> torch.Tensor:
    """Large margin cosine loss: softmax over s*cos with m subtracted at the true class."""
    if scale <= 0 or not 0 <= margin < 1:
        raise ValueError("LMCL needs s > 0 and 0 <= m < 1")
    labels = torch.as_tensor(labels, dtype=torch.long).reshape(-1)
    cos = _unit(features) @ _unit(weight).T
    logits = scale * (cos - margin * F.one_hot(labels, weight.shape[0]).to(cos.dtype))
    return F.cross_entropy(logits, labels)


def pairwise_distance(a: torch.Tensor, b: torch.Tensor, distance: str = "euclidean") -> torch.Tensor:
    if a.shape != b.shape:
        raise ValueError(f"dim mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    if distance == "euclidean":
        return torch.linalg.vector_norm(a - b, dim=-1)
    if distance == "cosine":
        return 1.0 - F.cosine_similarity(a, b, dim=-1)
    raise ValueError(f"unknown distance {distance!r}")


def triplet_loss(anchor: torch.Tensor, positive: torch.Tensor, negative: torch.Tensor,
                 margin: float = 0.1, distance: str = "euclidean") -> torch.Tensor:
    """Mean hinge max(d(a, p) - d(a, n) + margin, 0); zero for an empty batch."""
    if margin <= 0:
        raise ValueError("triplet margin must be positive")
    if anchor.shape != positive.shape or anchor.shape != negative.shape:
        raise ValueError("anchor, positive and negative must share a shape")
    if anchor.ndim == 1:
        anchor, positive, negative = anchor[None], positive[None], negative[None]
    if len(anchor) == 0:
        return anchor.sum() * 0.0
    d_ap = pairwise_distance(anchor, positive, distance)
    d_an = pairwise_distance(anchor, negative, distance)
    return F.relu(d_ap - d_an + margin).mean()


def mine_triplets(features: torch.Tensor, labels, mining: str = "batch_hard",
                  distance: str = "euclidean",
                  rng: Optional[np.random.Generator] = None) -> List[Tuple[int, int, int]]:
    """Index triples (a, p, n) for every anchor that has an in-batch positive.

    batch_hard picks the farthest positive and the nearest negative, lowest index
    on ties; random draws both uniformly from ``rng``.
    """
    x = features.detach().to(torch.float64)
    y = np.asarray(torch.as_tensor(labels).tolist())
    if len(y) < 2:
        return []
    if distance == "euclidean":
        d = torch.cdist(x, x).numpy()
    elif distance == "cosine":
        xn = F.normalize(x, dim=1)
        d = (1.0 - xn @ xn.T).numpy()
    else:
        raise ValueError(f"unknown distance {distance!r}")
    if mining == "random" and rng is None:
        rng = np.random.default_rng(0)
    same = y[:, None] == y[None, :]
    triples = []
    for a in range(len(y)):
        pos = np.flatnonzero(same[a])
        pos = pos[pos != a]
        neg = np.flatnonzero(~same[a])
        if len(pos) == 0 or len(neg) == 0:
            continue
        if mining == "batch_hard":
            p = int(pos[np.argmax(d[a, pos])])
            n = int(neg[np.argmin(d[a, neg])])
        elif mining == "random":
            p, n = int(rng.choice(pos)), int(rng.choice(neg))
        else:
            raise ValueError(f"unknown mining mode {mining!r}")
        triples.append((a, p, n))
    return triples


def stage2_loss(l_ce: torch.Tensor, l_cos: torch.Tensor, l_triplet: torch.Tensor,
                weights: Tuple[float, float, float] = (1.0, 1.0, 1.0)) -> torch.Tensor:
    w_ce, w_cos, w_tri = weights
    if (w_ce, w_cos, w_tri) == (1.0, 1.0, 1.0):
        return l_ce + l_cos + l_triplet
    return w_ce * l_ce + w_cos * l_cos + w_tri * l_triplet
