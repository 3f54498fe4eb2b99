"""Frame aggregation: collapse the K frame vertexes of each video into one vector.

All aggregators take frames shaped ``(B, K, D)`` and return ``(B, d_out)``.
"""
from __future__ import annotations

from itertools import combinations
from math import comb

import numpy as np

from . import tensor as T
from .errors import EmptySequence, ScaleOutOfRange, ShapeMismatch
from .nn import AffineBlock, ParameterStore, _uniform, stream
from .tensor import Tensor


def _frames(x) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim == 2:
        x = x.reshape(1, *x.shape)
    if x.ndim != 3:
        raise ShapeMismatch(f"frames must be (B, K, D), got {x.shape}")
    if x.shape[1] < 1:
        raise EmptySequence("a video needs at least one frame")
    return x


def avg_pool(frames) -> Tensor:
    return T.order_free_mean(_frames(frames), axis=1)


class AvgPool:
    kind = "avg"

    def __init__(self, d_in: int):
        self.d_in = self.d_out = d_in

    def __call__(self, frames, mode="eval", rng=None) -> Tensor:
        return avg_pool(frames)


class RecurrentCell:
    """LSTM (gates i, f, g, o) or GRU (gates r, z, n) with zero initial state."""

    def __init__(self, store: ParameterStore, kind: str, d_in: int, hidden: int, name: str = "cell"):
        if kind not in ("lstm", "gru"):
            raise ValueError(f"unknown recurrent cell {kind!r}")
        self.kind, self.d_in, self.hidden = kind, d_in, hidden
        n_gates = 4 if kind == "lstm" else 3
        rng = store.init_rng("a", name)
        shape_w, shape_u = (d_in, n_gates * hidden), (hidden, n_gates * hidden)
        self.w = store.add("a", f"{name}.w", _uniform(rng, hidden, shape_w))
        self.u = store.add("a", f"{name}.u", _uniform(rng, hidden, shape_u))
        self.b = store.add("a", f"{name}.b", _uniform(rng, hidden, (n_gates * hidden,)))
        # GRU keeps the recurrent bias of the candidate separate (it sits inside r * (...))
        self.bh = store.add("a", f"{name}.bh", _uniform(rng, hidden, (n_gates * hidden,))) if kind == "gru" else None

    def step(self, x: Tensor, h: Tensor, c: Tensor | None):
        H = self.hidden
        if self.kind == "lstm":
            z = x @ self.w + h @ self.u + self.b
            i = T.sigmoid(z[:, :H])
            f = T.sigmoid(z[:, H:2 * H])
            g = T.tanh(z[:, 2 * H:3 * H])
            o = T.sigmoid(z[:, 3 * H:])
            c = f * c + i * g
            return o * T.tanh(c), c
        gx = x @ self.w + self.b
        gh = h @ self.u + self.bh
        r = T.sigmoid(gx[:, :H] + gh[:, :H])
        zg = T.sigmoid(gx[:, H:2 * H] + gh[:, H:2 * H])
        n = T.tanh(gx[:, 2 * H:] + r * gh[:, 2 * H:])
        return (1.0 - zg) * n + zg * h, None


def recurrent_aggregate(frames, cell: RecurrentCell) -> Tensor:
    """Run the cell over frames in order and return the last hidden state."""
    x = _frames(frames)
    B, K, D = x.shape
    if D != cell.d_in:
        raise ShapeMismatch(f"cell expects width {cell.d_in}, frames have {D}")
    h = Tensor(np.zeros((B, cell.hidden)))
    c = Tensor(np.zeros((B, cell.hidden))) if cell.kind == "lstm" else None
    for k in range(K):
        h, c = cell.step(x[:, k, :], h, c)
    return h


class Recurrent:
    def __init__(self, store: ParameterStore, kind: str, d_in: int, d_out: int):
        self.kind = kind
        self.d_in, self.d_out = d_in, d_out
        self.cell = RecurrentCell(store, kind, d_in, d_out)

    def __call__(self, frames, mode="eval", rng=None) -> Tensor:
        return recurrent_aggregate(frames, self.cell)


def relation_tuples(K: int, k: int) -> list[tuple[int, ...]]:
    """All strictly increasing k-tuples of frame indices."""
    if not 2 <= k <= K:
        raise ScaleOutOfRange(f"scale {k} outside 2..{K}")
    return list(combinations(range(K), k))


class TRN:
    """Multi-scale temporal relations: ``sum_k G_k(sum_tuples F_k([v_t1; ...; v_tk])))``.

    Each scale owns its (F, G) pair.  ``max_tuples`` caps the tuples per scale
    with a fixed seeded subsample; by default every tuple is used.
    """
    kind = "trn"

    def __init__(self, store: ParameterStore, K: int, d_in: int, hidden: int, d_out: int,
                 norm: bool = True, dropout: float = 0.0, max_tuples: int | None = None, seed: int = 0):
        if K < 2:
            raise ScaleOutOfRange(f"relation aggregation needs K >= 2, got {K}")
        self.K, self.d_in, self.d_out = K, d_in, d_out
        self.scales: list[tuple[int, np.ndarray, AffineBlock, AffineBlock]] = []
        for k in range(2, K + 1):
            tuples = relation_tuples(K, k)
            if max_tuples is not None and len(tuples) > max_tuples:
                pick = np.sort(stream(seed, "trn_tuples", k).choice(len(tuples), max_tuples, replace=False))
                tuples = [tuples[i] for i in pick]
            f = AffineBlock(store, "a", f"trn_f{k}", k * d_in, hidden, hidden, norm=norm, dropout=dropout)
            g = AffineBlock(store, "a", f"trn_g{k}", hidden, hidden, d_out, norm=norm, dropout=dropout)
            self.scales.append((k, np.array(tuples, dtype=np.intp), f, g))

    @property
    def n_tuples(self) -> int:
        return sum(len(t) for _, t, _, _ in self.scales)

    def __call__(self, frames, mode="eval", rng=None) -> Tensor:
        x = _frames(frames)
        B, K, D = x.shape
        if K != self.K:
            raise ScaleOutOfRange(f"built for K={self.K}, got {K} frames")
        if D != self.d_in:
            raise ShapeMismatch(f"expected frame width {self.d_in}, got {D}")
        flat = x.reshape(B * K, D)
        out = None
        for k, tuples, f, g in self.scales:
            n = len(tuples)
            idx = np.arange(B)[:, None, None] * K + tuples[None, :, :]
            rel = T.take(flat, idx).reshape(B * n, k * D)
            pooled = f(rel, mode, rng).reshape(B, n, f.d_out).sum(axis=1)
            term = g(pooled, mode, rng)
            out = term if out is None else out + term
        return out


def trn_aggregate(frames, trn: TRN, mode="eval", rng=None) -> Tensor:
    return trn(frames, mode, rng)


def n_relation_tuples(K: int) -> int:
    return sum(comb(K, k) for k in range(2, K + 1))


def build_aggregator(store: ParameterStore, kind: str, K: int, d_in: int, d_out: int, hidden: int,
                     norm: bool = True, dropout: float = 0.0, max_tuples: int | None = None, seed: int = 0):
    if kind == "avg":
        return AvgPool(d_in)
    if kind in ("lstm", "gru"):
        return Recurrent(store, kind, d_in, d_out)
    if kind == "trn":
        return TRN(store, K, d_in, hidden, d_out, norm=norm, dropout=dropout, max_tuples=max_tuples, seed=seed)
    raise ValueError(f"unknown aggregator {kind!r}")
