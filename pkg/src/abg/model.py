"""ABG / HABG forward pass over one source and one target mini-batch."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .adversarial import DomainDiscriminator, LabelEmbedder, domain_adversarial_loss, embed_condition, one_hot
from .aggregators import build_aggregator
from .config import TrainConfig
from .graph import BipartiteEdgeMap, BipartiteGraph, frame_vertexes
from .nn import AffineBlock, ParameterStore, stream
from .tensor import Tensor


@dataclass
class Forward:
    rep_s: Tensor                   # classified representation (aggregated or video-vertex)
    rep_t: Tensor | None
    probs_s: Tensor
    probs_t: Tensor | None
    frame_edges: BipartiteEdgeMap | None = None
    video_edges: BipartiteEdgeMap | None = None
    adv: Tensor | None = None       # Ld, the discriminator log-likelihood


class ABGModel:
    """All networks of one run, registered in a single ParameterStore.

    Every network is applied once per step to the stacked source and target
    rows, so normalization statistics are shared by both domains.
    """

    def __init__(self, cfg: TrainConfig, store: ParameterStore | None = None):
        self.cfg = cfg
        self.store = store if store is not None else ParameterStore(cfg.seed)
        s, c = self.store, cfg
        norm, drop = c.batch_norm, c.dropout
        self.frame_graph = None
        width = c.D
        if c.use_graph:
            self.frame_graph = BipartiteGraph(s, "frame", c.D, c.d_v, c.hidden, c.rounds, norm, drop)
            width = c.d_v
        self.aggregator = build_aggregator(s, c.agg, c.K, width, c.d_v, c.hidden, norm=norm, dropout=drop,
                                           max_tuples=c.trn_max_tuples, seed=c.seed)
        width = self.aggregator.d_out
        self.video_graph = None
        if c.variant == "habg":
            self.video_graph = BipartiteGraph(s, "video", width, c.d_n, c.hidden, c.rounds, norm, drop)
            width = c.d_n
        self.rep_width = width
        self.classifier = AffineBlock(s, "y", "classifier", width, c.hidden, c.n_classes, norm=norm, dropout=drop)
        self.embedder = self.discriminator = None
        if c.adversarial and not c.source_only:
            self.embedder = LabelEmbedder(s, c.n_classes, width)
            self.discriminator = DomainDiscriminator(s, width, c.hidden, norm=norm, dropout=drop)

    def _rng(self, part: str, step: int, mode: str):
        return stream(self.cfg.seed, "dropout", part, step) if mode == "train" else None

    def forward(self, xs: np.ndarray, ys, xt: np.ndarray | None, mode: str = "eval", step: int = 0,
                frozen_target_probs: np.ndarray | None = None) -> Forward:
        """Run both domains through the network.

        ``frozen_target_probs`` replaces the (detached) target predictions fed
        to the label embedder; finite-difference audits use it to hold that
        stop-gradient input fixed while parameters move.
        """
        c = self.cfg
        B_s = xs.shape[0]
        B_t = 0 if xt is None else xt.shape[0]
        if xs.shape[1:] != (c.K, c.D) or (xt is not None and xt.shape[1:] != (c.K, c.D)):
            raise ValueError(f"frames must be (B, {c.K}, {c.D})")
        fe = None
        if self.frame_graph is not None and xt is not None:
            v, fe = self.frame_graph(frame_vertexes(xs), frame_vertexes(xt), mode, self._rng("frame", step, mode))
            frames = T.concat([v.source, v.target], axis=0).reshape(B_s + B_t, c.K, self.frame_graph.d_out)
        else:
            frames = Tensor(xs if xt is None else np.concatenate([xs, xt], axis=0))
        h = self.aggregator(frames, mode, self._rng("agg", step, mode))
        hs, ht = h[:B_s], (h[B_s:] if B_t else None)
        ve = None
        if self.video_graph is not None and ht is not None:
            n, ve = self.video_graph(hs, ht, mode, self._rng("video", step, mode))
            hs, ht = n.source, n.target
        rep = hs if ht is None else T.concat([hs, ht], axis=0)
        probs = T.softmax(self.classifier(rep, mode, self._rng("classifier", step, mode)), axis=1)
        ps, pt = probs[:B_s], (probs[B_s:] if B_t else None)
        adv = None
        if self.discriminator is not None and ht is not None:
            cond_t = frozen_target_probs if frozen_target_probs is not None else pt.data
            ys_emb = embed_condition(one_hot(ys, c.n_classes), self.embedder)
            yt_emb = embed_condition(T.detach(cond_t), self.embedder)
            adv = domain_adversarial_loss(hs, ys_emb, ht, yt_emb, self.discriminator, mode,
                                          self._rng("disc", step, mode), reverse=c.beta)
        return Forward(hs, ht, ps, pt, fe, ve, adv)

    def predict(self, xs: np.ndarray, xt: np.ndarray) -> np.ndarray:
        """Eval-mode class probabilities for ``xt`` with ``xs`` as source companions."""
        with T.no_grad():
            out = self.forward(xs, np.zeros(xs.shape[0], dtype=np.intp), xt, mode="eval")
        return out.probs_t.data

    def embed(self, xs: np.ndarray, xt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        with T.no_grad():
            out = self.forward(xs, np.zeros(xs.shape[0], dtype=np.intp), xt, mode="eval")
        return out.rep_s.data, out.rep_t.data
