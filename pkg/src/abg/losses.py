"""Classification, entropy and edge-supervision losses and their combination."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .adversarial import check_simplex
from .errors import LabelOutOfRange, LevelMismatch, ShapeMismatch
from .graph import BipartiteEdgeMap
from .tensor import Tensor

PROB_FLOOR = 1e-7


@dataclass
class SemiMask:
    """Positions (within the target mini-batch) whose labels are revealed."""
    labeled: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.intp))
    batch_size: int = 0

    def __post_init__(self):
        self.labeled = np.asarray(self.labeled, dtype=np.intp)
        self.labels = np.asarray(self.labels, dtype=np.intp)
        if self.labeled.shape != self.labels.shape:
            raise ShapeMismatch("one label per labeled position")
        if self.labeled.size and (self.labeled.min() < 0 or self.labeled.max() >= self.batch_size):
            raise ShapeMismatch("labeled positions outside the batch")

    @property
    def unlabeled(self) -> np.ndarray:
        return np.setdiff1d(np.arange(self.batch_size), self.labeled)

    def __len__(self) -> int:
        return int(self.labeled.size)


def _zero() -> Tensor:
    return Tensor(0.0)


def source_nll(preds: Tensor, labels) -> Tensor:
    labels = np.asarray(labels, dtype=np.intp)
    B, C = preds.shape
    if labels.shape != (B,):
        raise ShapeMismatch(f"{B} predictions but {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= C):
        raise LabelOutOfRange(f"labels must lie in [0, {C})")
    picked = preds[np.arange(B), labels]
    return -T.log(T.clamp(picked, PROB_FLOOR, 1.0)).mean()


def target_entropy(preds: Tensor) -> Tensor:
    check_simplex(preds.data)
    B = preds.shape[0]
    return -(preds * T.log(T.clamp(preds, PROB_FLOOR, 1.0))).sum() * (1.0 / B)


def semi_losses(preds_s: Tensor, labels_s, preds_t: Tensor, mask: SemiMask | None = None):
    """(source-side NLL incl. labeled targets, entropy over unlabeled targets)."""
    mask = mask if mask is not None else SemiMask(batch_size=preds_t.shape[0])
    if mask.batch_size != preds_t.shape[0]:
        raise ShapeMismatch("mask built for a different target batch size")
    l_s = source_nll(preds_s, labels_s)
    if len(mask):
        l_s = l_s + source_nll(T.take(preds_t, mask.labeled), mask.labels)
    rest = mask.unlabeled
    l_t = target_entropy(T.take(preds_t, rest)) if rest.size else _zero()
    return l_s, l_t


def supervised_pairs(n_source: int, labeled: np.ndarray, K: int = 1):
    """Row/column indices of every supervised pair, frames aligned by position."""
    i, j, k = np.meshgrid(np.arange(n_source), labeled, np.arange(K), indexing="ij")
    return (i * K + k).ravel(), (j * K + k).ravel(), i.ravel(), j.ravel()


def edge_supervision(e: BipartiteEdgeMap, source_labels, mask: SemiMask, level: str,
                     kind: str = "bce") -> Tensor:
    """Binary cross-entropy of edge weights against same-class indicators.

    ``kind='sum'`` gives the plain delta-weighted sum of edge weights instead.
    """
    if e.level != level:
        raise LevelMismatch(f"edge map is {e.level}-level, asked for {level}")
    if not len(mask):
        return _zero()
    source_labels = np.asarray(source_labels, dtype=np.intp)
    R, C = e.shape
    B_s = source_labels.size
    K = R // B_s if level == "frame" else 1
    if R != B_s * K or C != mask.batch_size * K:
        raise ShapeMismatch(f"edge map {e.shape} vs {B_s} sources x {mask.batch_size} targets (K={K})")
    rows, cols, i, jpos = supervised_pairs(B_s, mask.labeled, K)
    target_label = dict(zip(mask.labeled.tolist(), mask.labels.tolist()))
    delta = (source_labels[i] == np.array([target_label[j] for j in jpos.tolist()])).astype(np.float64)
    w = T.take(e.matrix.reshape(R * C), rows * C + cols)
    if kind == "sum":
        return (w * delta).sum()
    w = T.clamp(w, PROB_FLOOR, 1.0 - PROB_FLOOR)
    return -(T.log(w) * delta + T.log(1.0 - w) * (1.0 - delta)).mean()


def composite_objective(parts, gamma: float, lam: float, alpha: float, supervised_edges: bool = True):
    """``Lys + gamma*Lyt + lam*(Lev + alpha*Lef)``; edge terms vanish without supervision.

    ``parts`` is ``(Lys, Lyt, Lev, Lef)``, floats or tensors.
    """
    l_ys, l_yt, l_ev, l_ef = parts
    total = l_ys + gamma * l_yt
    if supervised_edges:
        total = total + lam * (l_ev + alpha * l_ef)
    return total
