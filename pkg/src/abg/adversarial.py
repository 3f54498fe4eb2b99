"""Conditional adversarial head: label embedding, domain discriminator, Ld."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import NotASimplex, ShapeMismatch
from .nn import AffineBlock, Linear, ParameterStore
from .tensor import Tensor

PROB_FLOOR = 1e-7
SIMPLEX_TOL = 1e-6


def check_simplex(p: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    p = np.atleast_2d(p)
    if (p < -tol).any() or np.abs(p.sum(axis=1) - 1.0).max() > tol:
        raise NotASimplex("rows must be non-negative and sum to 1")


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


class LabelEmbedder(Linear):
    """Affine map from class vectors (one-hot or predicted) to the feature width."""

    def __init__(self, store: ParameterStore, n_classes: int, width: int):
        super().__init__(store, "l", "label_embed", n_classes, width)


def embed_condition(label_or_pred, emb: LabelEmbedder) -> Tensor:
    """Embed one-hot labels or predicted class distributions.

    Target predictions should arrive detached; this is where the conditional
    path is cut from the classifier.
    """
    x = label_or_pred if isinstance(label_or_pred, Tensor) else Tensor(label_or_pred)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    check_simplex(x.data)
    return emb(x)


class DomainDiscriminator:
    def __init__(self, store: ParameterStore, width: int, hidden: int, norm: bool = True, dropout: float = 0.0):
        self.width = width
        self.net = AffineBlock(store, "d", "discriminator", width, hidden, 1, norm=norm, dropout=dropout)

    def __call__(self, z: Tensor, mode: str = "eval", rng=None) -> Tensor:
        """Clamped probability that each row comes from the source domain."""
        return T.clamp(T.sigmoid(self.net(z, mode, rng)), PROB_FLOOR, 1.0 - PROB_FLOOR)


def domain_adversarial_loss(ns: Tensor, ys: Tensor, nt: Tensor, yt: Tensor, disc: DomainDiscriminator,
                            mode: str = "eval", rng=None, reverse: float | None = None) -> Tensor:
    """``mean log D(ns + ys) + mean log(1 - D(nt + yt))`` (a log-likelihood, <= 0).

    With ``reverse`` set, a gradient-reversal node of that scale sits between
    the conditioned features and the discriminator, so the discriminator sees
    the plain gradient while everything upstream sees it times ``-reverse``.
    """
    if ns.shape != ys.shape or nt.shape != yt.shape or ns.shape[1] != nt.shape[1]:
        raise ShapeMismatch(f"features/conditions disagree: {ns.shape}, {ys.shape}, {nt.shape}, {yt.shape}")
    if ns.shape[1] != disc.width:
        raise ShapeMismatch(f"discriminator expects width {disc.width}, got {ns.shape[1]}")
    bs = ns.shape[0]
    z = T.concat([ns + ys, nt + yt], axis=0)
    if reverse is not None:
        z = T.reverse_gradient(z, reverse)
    p = disc(z, mode, rng)
    return T.log(p[:bs]).mean() + T.log(1.0 - p[bs:]).mean()
