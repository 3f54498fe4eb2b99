"""Cross-domain bipartite graphs: learned edge maps and message passing.

The same code serves the frame level (vertexes are frames, row ``i*K + k`` is
frame ``k`` of video ``i``) and the video level (one vertex per video).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeMismatch
from .nn import AffineBlock, ParameterStore, l1_normalize
from .tensor import Tensor

EDGE_FLOOR = 1e-7


@dataclass
class VertexBatch:
    source: Tensor
    target: Tensor
    level: str = "frame"

    def __post_init__(self):
        if self.source.ndim != 2 or self.target.ndim != 2 or self.source.shape[1] != self.target.shape[1]:
            raise ShapeMismatch(f"vertex widths differ: {self.source.shape} vs {self.target.shape}")


@dataclass
class BipartiteEdgeMap:
    matrix: Tensor
    level: str = "frame"

    @property
    def shape(self) -> tuple:
        return self.matrix.shape


def canonical_order(rows: np.ndarray) -> np.ndarray:
    """Lexicographic row order.

    Reductions over vertexes run in this order, so their results depend on
    the set of vertexes and not on how the caller happened to order them.
    """
    if rows.shape[0] <= 1:
        return np.arange(rows.shape[0])
    return np.lexsort(rows.T[::-1])


def _inverse(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def _edge_map(vs: Tensor, vt: Tensor, metric: AffineBlock, mode: str, rng) -> Tensor:
    if metric.d_in != vs.shape[1] or metric.d_out != 1:
        raise ShapeMismatch(f"metric maps {metric.d_in}->{metric.d_out}, vertexes have width {vs.shape[1]}")
    R, C = vs.shape[0], vt.shape[0]
    h = T.pairwise_absdiff_affine(vs, vt, metric.w1, metric.b1)
    scores = metric.tail(h, mode, rng)
    a = T.clamp(T.sigmoid(scores), EDGE_FLOOR, 1.0 - EDGE_FLOOR).reshape(R, C)
    return l1_normalize(l1_normalize(a, "row"), "column")


def edge_update(v: VertexBatch, metric: AffineBlock, mode: str = "eval", rng=None) -> BipartiteEdgeMap:
    """Sigmoid of the metric on |source - target|, then row- and column-normalized."""
    ps, pt = canonical_order(v.source.data), canonical_order(v.target.data)
    e = _edge_map(T.take(v.source, ps), T.take(v.target, pt), metric, mode, rng)
    e = T.take(T.take(e, _inverse(ps), 0), _inverse(pt), 1)
    return BipartiteEdgeMap(e, v.level)


def node_update(v: VertexBatch, e: BipartiteEdgeMap, updater: AffineBlock,
                mode: str = "eval", rng=None) -> VertexBatch:
    """Each side absorbs the edge-weighted other side through one shared updater."""
    R, C = v.source.shape[0], v.target.shape[0]
    if e.shape != (R, C):
        raise ShapeMismatch(f"edge map {e.shape} does not match {R} source x {C} target vertexes")
    if updater.d_in != 2 * v.source.shape[1]:
        raise ShapeMismatch(f"updater expects {updater.d_in} inputs, got 2x{v.source.shape[1]}")
    ps, pt = canonical_order(v.source.data), canonical_order(v.target.data)
    vs, vt = T.take(v.source, ps), T.take(v.target, pt)
    ec = T.take(T.take(e.matrix, ps, 0), pt, 1)
    msg_s = ec @ vt
    msg_t = ec.T @ vs
    stacked = T.concat([T.concat([vs, msg_s], axis=1), T.concat([vt, msg_t], axis=1)], axis=0)
    out = updater(stacked, mode, rng)
    new_s = T.take(out[:R], _inverse(ps))
    new_t = T.take(out[R:], _inverse(pt))
    return VertexBatch(new_s, new_t, v.level)


class BipartiteGraph:
    """``rounds`` of edge update followed by node update at one level."""

    def __init__(self, store: ParameterStore, level: str, d_in: int, d_out: int, hidden: int,
                 rounds: int = 1, norm: bool = True, dropout: float = 0.0):
        if level not in ("frame", "video"):
            raise ValueError(f"unknown level {level!r}")
        edge_group, node_group = ("fe", "fv") if level == "frame" else ("ve", "vn")
        self.level = level
        self.d_in, self.d_out = d_in, d_out
        self.metrics: list[AffineBlock] = []
        self.updaters: list[AffineBlock] = []
        width = d_in
        for r in range(rounds):
            self.metrics.append(AffineBlock(store, edge_group, f"{level}_metric{r}", width, hidden, 1,
                                            norm=norm, dropout=dropout))
            self.updaters.append(AffineBlock(store, node_group, f"{level}_update{r}", 2 * width, hidden,
                                             d_out, norm=norm, dropout=dropout))
            width = d_out

    @property
    def rounds(self) -> int:
        return len(self.metrics)

    def __call__(self, source: Tensor, target: Tensor, mode: str = "eval",
                 rng=None) -> tuple[VertexBatch, BipartiteEdgeMap]:
        v = VertexBatch(source, target, self.level)
        e = None
        for metric, updater in zip(self.metrics, self.updaters):
            e = edge_update(v, metric, mode, rng)
            v = node_update(v, e, updater, mode, rng)
        return v, e


def frame_vertexes(frames) -> Tensor:
    """``(B, K, D)`` frames to ``(B*K, D)`` vertexes, row ``i*K + k``."""
    frames = frames if isinstance(frames, Tensor) else Tensor(frames)
    b, k, d = frames.shape
    return frames.reshape(b * k, d)
