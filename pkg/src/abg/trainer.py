"""Objectives, per-group gradient routing, the training loop and evaluation."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import VideoBatch, VideoSet, batches, batches_per_epoch, mask_labels, source_batches
from .errors import EmptyDataset, NonFiniteError, NonFiniteLoss
from .losses import SemiMask, edge_supervision, semi_losses
from .model import ABGModel, Forward
from .nn import GROUPS, sgd_step, stream

# Which loss terms drive each parameter group.  "adv" is the discriminator's
# cross-entropy routed through the reversal node: the discriminator descends
# it and everything upstream of the reversal ascends it, both scaled by beta.
GROUP_TERMS: dict[str, tuple[str, ...]] = {
    "d": ("adv",),
    "l": ("adv",),
    "y": ("cls", "adv"),
    "vn": ("cls", "adv"),
    "ve": ("cls", "edge_v", "adv"),
    "a": ("cls", "edge_v", "adv"),
    "fv": ("cls", "edge_v", "adv"),
    "fe": ("cls", "edge_v", "edge_f", "adv"),
}
TERMS = ("cls", "edge_v", "edge_f", "adv")
LOSS_NAMES = ("L_ys", "L_yt", "L_d", "L_ef", "L_ev")
CSV_COLUMNS = (["epoch", "step", *LOSS_NAMES, "lr"] + [f"gn_{g}" for g in GROUPS]
               + [f"gn_adv_{g}" for g in GROUPS])


def lr_schedule(p: float, mu0: float = 0.04, a: float = 10.0, b: float = 0.75) -> float:
    """Annealed learning rate ``mu0 / (1 + a p)^b`` for training progress ``p`` in [0, 1]."""
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {p}")
    return mu0 / (1.0 + a * p) ** b


@dataclass
class StepReport:
    epoch: int
    step: int
    losses: dict[str, float]
    lr: float
    grad_norms: dict[str, float]
    adv_norms: dict[str, float]

    def row(self) -> list:
        return ([self.epoch, self.step] + [self.losses[k] for k in LOSS_NAMES] + [self.lr]
                + [self.grad_norms[g] for g in GROUPS] + [self.adv_norms[g] for g in GROUPS])


def loss_terms(model: ABGModel, fwd: Forward, ys, mask: SemiMask | None):
    """Scalar losses of one forward pass and the tensors each backward pass starts from."""
    cfg = model.cfg
    zero = T.Tensor(0.0)
    if fwd.probs_t is None:
        l_ys, l_yt = semi_losses(fwd.probs_s, ys, fwd.probs_s[:0], SemiMask(batch_size=0))
    else:
        l_ys, l_yt = semi_losses(fwd.probs_s, ys, fwd.probs_t, mask)
    supervised = mask is not None and len(mask) > 0
    l_ef = (edge_supervision(fwd.frame_edges, ys, mask, "frame", cfg.edge_loss)
            if supervised and fwd.frame_edges is not None else zero)
    l_ev = (edge_supervision(fwd.video_edges, ys, mask, "video", cfg.edge_loss)
            if supervised and fwd.video_edges is not None else zero)
    l_d = fwd.adv if fwd.adv is not None else zero
    values = {"L_ys": l_ys.item(), "L_yt": l_yt.item(), "L_d": l_d.item(), "L_ef": l_ef.item(), "L_ev": l_ev.item()}
    terms = {"cls": l_ys + cfg.gamma * l_yt}
    if supervised and fwd.video_edges is not None:
        terms["edge_v"] = cfg.lam * l_ev
    if supervised and fwd.frame_edges is not None:
        terms["edge_f"] = (cfg.lam * cfg.alpha) * l_ef
    if fwd.adv is not None:
        terms["adv"] = -fwd.adv
    return values, terms


def term_gradients(model: ABGModel, terms: dict) -> dict[str, dict]:
    """One backward pass per loss term; returns raw gradients keyed by term."""
    store = model.store
    out: dict[str, dict] = {}
    for name in TERMS:
        if name not in terms:
            continue
        store.zero_grad()
        T.backward(terms[name])
        out[name] = {k: p.grad for k, p in store.params.items() if p.grad is not None}
    store.zero_grad()
    return out


def route(model: ABGModel, per_term: dict[str, dict]) -> dict:
    """Each group's applied gradient is the sum of its own terms only."""
    grads = {}
    for key, p in model.store.params.items():
        g = None
        for term in GROUP_TERMS[key[0]]:
            part = per_term.get(term, {}).get(key)
            if part is not None and term == "adv" and key[0] == "d":
                part = model.cfg.beta * part
            if part is not None:
                g = part.copy() if g is None else g + part
        grads[key] = g if g is not None else np.zeros_like(p.data)
    return grads


def _group_norms(model: ABGModel, grads: dict) -> dict[str, float]:
    sq = {g: 0.0 for g in GROUPS}
    for (g, _), arr in grads.items():
        sq[g] += float(np.sum(arr * arr))
    return {g: math.sqrt(v) for g, v in sq.items()}


def group_gradients(model: ABGModel, xs, ys, xt, mask: SemiMask | None, mode: str = "train",
                    step: int = 0):
    """Forward, one backward per term, and per-group routing.

    Returns ``(loss values, routed grads, raw per-term grads)``.
    """
    try:
        fwd = model.forward(xs, ys, xt, mode, step)
        values, terms = loss_terms(model, fwd, ys, mask)
        per_term = term_gradients(model, terms)
    except NonFiniteError as exc:
        raise NonFiniteLoss(f"step {step}: {exc}") from exc
    return values, route(model, per_term), per_term


def train_step(model: ABGModel, batch_s: VideoBatch, batch_t: VideoBatch | None, mask: SemiMask | None,
               lr: float, epoch: int = 0, step: int = 0) -> StepReport:
    cfg = model.cfg
    xt = None if batch_t is None else batch_t.frames
    values, grads, per_term = group_gradients(model, batch_s.frames, batch_s.labels, xt, mask, "train", step)
    adv = per_term.get("adv", {})
    adv_norms = _group_norms(model, {k: v for k, v in adv.items() if k[0] != "d"})
    adv_norms["d"] = cfg.beta * _group_norms(model, {k: v for k, v in adv.items() if k[0] == "d"})["d"]
    report = StepReport(epoch, step, values, lr, _group_norms(model, grads), adv_norms)
    sgd_step(model.store, grads, lr, cfg.momentum, cfg.weight_decay)
    return report


# -- evaluation ------------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    predictions: np.ndarray
    probs: np.ndarray = field(repr=False, default=None)

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        C = self.confusion.shape[0]
        w.writerow(["true\\pred"] + [str(c) for c in range(C)])
        for c in range(C):
            w.writerow([str(c)] + [str(int(v)) for v in self.confusion[c]])
        return buf.getvalue()


def sample_companions(source: VideoSet, n: int, seed: int) -> np.ndarray:
    """Fixed, seeded indices of the source videos that accompany evaluation batches."""
    n = min(n, len(source))
    return np.sort(stream(seed, "companions").choice(len(source), n, replace=False))


def confusion_matrix(labels, preds, n_classes: int) -> np.ndarray:
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(labels), np.asarray(preds)), 1)
    return conf


def evaluate(model: ABGModel, dataset: VideoSet, companions: np.ndarray, batch: int | None = None) -> EvalResult:
    """Eval-mode accuracy on ``dataset`` placed on the target side of the graph.

    Videos are taken in dataset order, ``batch`` (default ``cfg.bt``) at a
    time, each chunk paired with the same companion source frames.
    """
    if len(dataset) == 0:
        raise EmptyDataset("nothing to evaluate")
    step = batch or model.cfg.bt
    probs = np.concatenate([model.predict(companions, dataset.frames[i:i + step])
                            for i in range(0, len(dataset), step)])
    preds = probs.argmax(axis=1)
    conf = confusion_matrix(dataset.labels, preds, dataset.n_classes)
    return EvalResult(float(np.mean(preds == dataset.labels)), conf, preds, probs)


# -- training loop -------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    target_accuracy: float
    mean_losses: dict[str, float]


def fit(cfg: TrainConfig, source: VideoSet, target: VideoSet, eval_set: VideoSet | None = None,
        on_step: Callable[[StepReport], None] | None = None,
        on_epoch: Callable[[EpochRecord], None] | None = None,
        eval_every: int = 1) -> tuple[ABGModel, list[EpochRecord]]:
    """Train for ``cfg.epochs`` epochs; target labels are only read for masks and measurement."""
    model = ABGModel(cfg)
    eval_set = eval_set if eval_set is not None else target
    companions = source.frames[sample_companions(source, cfg.bs, cfg.seed)]
    for_batch = mask_labels(target, cfg.semi_ratio, cfg.seed)[1] if cfg.semi and not cfg.source_only else None
    if cfg.source_only:
        per_epoch = len(source) // cfg.bs
    else:
        per_epoch = batches_per_epoch(len(source), len(target), cfg.bs, cfg.bt)
    total = max(1, cfg.epochs * per_epoch)
    history: list[EpochRecord] = []
    step = 0
    for epoch in range(cfg.epochs):
        if cfg.source_only:
            stream_ = ((b, None) for b in source_batches(source, cfg.bs, cfg.seed, epoch))
        else:
            stream_ = batches(source, target, cfg.bs, cfg.bt, cfg.seed, epoch)
        sums = {k: 0.0 for k in LOSS_NAMES}
        n = 0
        for bs_, bt_ in stream_:
            mask = for_batch(bt_) if for_batch is not None else None
            lr = lr_schedule(step / total, cfg.lr, cfg.lr_a, cfg.lr_b)
            report = train_step(model, bs_, bt_, mask, lr, epoch, step)
            for k in LOSS_NAMES:
                sums[k] += report.losses[k]
            n += 1
            step += 1
            if on_step is not None:
                on_step(report)
        last = epoch == cfg.epochs - 1
        acc = evaluate(model, eval_set, companions).accuracy if (last or (epoch + 1) % eval_every == 0) else float("nan")
        rec = EpochRecord(epoch, acc, {k: v / max(n, 1) for k, v in sums.items()})
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return model, history
