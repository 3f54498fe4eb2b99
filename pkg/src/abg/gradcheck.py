"""Finite-difference audit of every differentiable op and every per-group objective.

Normalization layers run in eval mode (frozen running statistics) for the
group audit, so each objective is a fixed smooth-almost-everywhere function
of the parameters.  Ops are probed coordinate by coordinate; each group is
probed along random directions through all of its parameters.  Probes that
straddle a leaky-ReLU or |.| kink are detected and redrawn.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .adversarial import DomainDiscriminator, LabelEmbedder, domain_adversarial_loss, embed_condition
from .aggregators import TRN, RecurrentCell, avg_pool, recurrent_aggregate
from .config import TrainConfig
from .errors import NonFiniteEvaluation
from .graph import BipartiteEdgeMap, VertexBatch, edge_update, node_update
from .losses import SemiMask, edge_supervision, source_nll, target_entropy
from .model import ABGModel
from .nn import GROUPS, AffineBlock, ParameterStore, l1_normalize, stream
from .tensor import Tensor
from .trainer import GROUP_TERMS, group_gradients, loss_terms

AGG_CYCLE = ("trn", "lstm", "gru", "avg")
OP_STEP = 1e-4
GROUP_STEP = 1e-4
# directional derivatives smaller than this are below finite-difference resolution
GROUP_FLOOR = 1e-6


@dataclass
class AuditRow:
    kind: str                   # "op" or "group"
    name: str
    max_rel_err: float
    instances: int
    adv_upstream: float = 0.0   # largest norm of the reversed-adversarial gradient reaching this group
    passed: bool = True


@dataclass
class AuditReport:
    rows: list[AuditRow] = field(default_factory=list)
    threshold: float = 1e-4
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def format(self) -> str:
        lines = [f"{'kind':5s} {'name':28s} {'max_rel_err':>12s} {'Ld_upstream':>12s}  result"]
        for r in self.rows:
            up = f"{r.adv_upstream:12.3e}" if r.kind == "group" else f"{'':12s}"
            lines.append(f"{r.kind:5s} {r.name:28s} {r.max_rel_err:12.3e} {up}  {'ok' if r.passed else 'FAIL'}")
        lines.append(f"threshold {self.threshold:g}; {len(self.rows)} rows; {self.seconds:.1f}s; "
                     f"{'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def derivative(phi: Callable[[float], float], h: float) -> tuple[float, bool]:
    """Richardson-extrapolated central difference of ``phi`` at 0, and a smoothness flag.

    Two extrapolations at step ``h`` and ``h/2`` must agree; when they do not,
    the probe straddles a kink and should be redrawn.
    """
    c = [(phi(s) - phi(-s)) / (2.0 * s) for s in (h, h / 2, h / 4)]
    if not all(np.isfinite(c)):
        raise NonFiniteEvaluation("objective is not finite near the probe point")
    r1, r2 = (4 * c[1] - c[0]) / 3, (4 * c[2] - c[1]) / 3
    return r2, abs(r1 - r2) <= 1e-5 * max(abs(r1), abs(r2)) + 1e-9


def _coordinates(target: Tensor, analytic: np.ndarray, value: Callable[[], float], rng: np.random.Generator,
                 h: float = OP_STEP, tries: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Probe every coordinate of ``target`` against ``analytic``."""
    flat = target.data.reshape(-1)
    a_out, n_out = [], []
    for i in range(flat.size):
        for _ in range(tries):
            old = flat[i]

            def phi(t):
                flat[i] = old + t
                try:
                    return value()
                finally:
                    flat[i] = old
            d, smooth = derivative(phi, h)
            if smooth:
                a_out.append(analytic.reshape(-1)[i])
                n_out.append(d)
                break
            i = int(rng.integers(flat.size))
    return np.array(a_out), np.array(n_out)


def _directions(params: list[Tensor], analytic: list[np.ndarray], value: Callable[[], float],
                rng: np.random.Generator, n_dirs: int, h: float = GROUP_STEP, tries: int = 4):
    """Directional derivatives along random Gaussian directions through all of ``params``."""
    base = [p.data.copy() for p in params]
    a_out, n_out = [], []
    for _ in range(n_dirs):
        for _ in range(tries):
            u = [rng.normal(size=b.shape) for b in base]

            def phi(t):
                for p, b, du in zip(params, base, u):
                    p.data = b + t * du
                try:
                    return value()
                finally:
                    for p, b in zip(params, base):
                        p.data = b
            d, smooth = derivative(phi, h)
            if smooth:
                a_out.append(sum(float(np.sum(g * du)) for g, du in zip(analytic, u)))
                n_out.append(d)
                break
    return np.array(a_out), np.array(n_out)


# -- op-level cases -------------------------------------------------------------

def _away(rng, shape, lo=0.2, hi=1.0):
    """Random values bounded away from zero (keeps probes off kinks)."""
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _separated(rng, r, c, d, gap=0.05):
    while True:
        vs, vt = rng.normal(size=(r, d)), rng.normal(size=(c, d))
        if np.abs(vs[:, None, :] - vt[None, :, :]).min() > gap:
            return vs, vt


def _store_case(build: Callable[[ParameterStore, np.random.Generator], tuple[list[Tensor], Callable]]):
    """Wrap a case that also owns parameters: every store tensor becomes an input."""
    def case(rng):
        store = ParameterStore(int(rng.integers(1 << 30)))
        inputs, fn = build(store, rng)
        return inputs + list(store.params.values()), fn
    return case


def _block_case(mode: str, norm: bool = True):
    def build(store, rng):
        blk = AffineBlock(store, "y", "blk", 3, 4, 2, norm=norm)
        x = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
        return [x], lambda: blk(x, mode)
    return _store_case(build)


def _graph_edge(store, rng):
    metric = AffineBlock(store, "fe", "metric", 3, 4, 1)
    vs, vt = _separated(rng, 3, 2, 3)
    s, t = Tensor(vs, requires_grad=True), Tensor(vt, requires_grad=True)
    return [s, t], lambda: edge_update(VertexBatch(s, t, "frame"), metric).matrix


def _graph_node(store, rng):
    upd = AffineBlock(store, "fv", "upd", 6, 4, 2)
    s, t = Tensor(rng.normal(size=(3, 3)), requires_grad=True), Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    e = Tensor(rng.uniform(0.1, 1.0, size=(3, 2)), requires_grad=True)

    def fn():
        return node_update(VertexBatch(s, t, "frame"), BipartiteEdgeMap(e, "frame"), upd).source
    return [s, t, e], fn


def _recurrent(kind):
    def build(store, rng):
        cell = RecurrentCell(store, kind, 3, 4)
        x = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
        return [x], lambda: recurrent_aggregate(x, cell)
    return _store_case(build)


def _trn(store, rng):
    trn = TRN(store, 3, 2, 4, 3)
    x = Tensor(rng.normal(size=(2, 3, 2)), requires_grad=True)
    return [x], lambda: trn(x)


def _adversarial(store, rng):
    emb = LabelEmbedder(store, 3, 4)
    disc = DomainDiscriminator(store, 4, 5)
    ns, nt = Tensor(rng.normal(size=(3, 4)), requires_grad=True), Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    ys = np.eye(3)[rng.integers(3, size=3)]
    yt = rng.dirichlet(np.ones(3), size=2)
    return [ns, nt], lambda: domain_adversarial_loss(ns, embed_condition(ys, emb), nt, embed_condition(yt, emb), disc)


def _simple(make_inputs, fn):
    def case(rng):
        ins = [Tensor(a, requires_grad=True) for a in make_inputs(rng)]
        return ins, lambda: fn(*ins)
    return case


def _edge_bce(rng):
    e = Tensor(rng.uniform(0.1, 0.9, size=(6, 4)), requires_grad=True)
    mask = SemiMask([0, 1], rng.integers(3, size=2), 2)
    ys = rng.integers(3, size=3)
    return [e], lambda: edge_supervision(BipartiteEdgeMap(e, "frame"), ys, mask, "frame")


OP_CASES: dict[str, Callable] = {
    "add": _simple(lambda r: [r.normal(size=(3, 4)), r.normal(size=(4,))], T.add),
    "sub": _simple(lambda r: [r.normal(size=(3, 1)), r.normal(size=(3, 4))], T.sub),
    "mul": _simple(lambda r: [r.normal(size=(3, 4)), r.normal(size=(1, 4))], T.mul),
    "div": _simple(lambda r: [r.normal(size=(3, 4)), _away(r, (3, 4), 0.5, 2.0)], T.div),
    "power": _simple(lambda r: [r.uniform(0.5, 2.0, size=(3, 4))], lambda a: T.power(a, 1.7)),
    "matmul": _simple(lambda r: [r.normal(size=(3, 4)), r.normal(size=(4, 2))], T.matmul),
    "sum": _simple(lambda r: [r.normal(size=(3, 4))], lambda a: T.tsum(a, axis=0, keepdims=True)),
    "mean": _simple(lambda r: [r.normal(size=(3, 4))], lambda a: T.mean(a, axis=1)),
    "order_free_mean": _simple(lambda r: [r.normal(size=(2, 3, 4))], lambda a: T.order_free_mean(a, 1)),
    "reshape": _simple(lambda r: [r.normal(size=(3, 4))], lambda a: T.reshape(a, (2, 6))),
    "transpose": _simple(lambda r: [r.normal(size=(3, 4))], T.transpose),
    "getitem": _simple(lambda r: [r.normal(size=(3, 4))], lambda a: a[[0, 2, 0], 1:]),
    "take": _simple(lambda r: [r.normal(size=(3, 4))], lambda a: T.take(a, np.array([2, 0, 2]), axis=1)),
    "concat": _simple(lambda r: [r.normal(size=(2, 3)), r.normal(size=(1, 3))], lambda a, b: T.concat([a, b], 0)),
    "abs": _simple(lambda r: [_away(r, (3, 4))], T.tabs),
    "exp": _simple(lambda r: [r.normal(size=(3, 4))], T.exp),
    "log": _simple(lambda r: [r.uniform(0.3, 3.0, size=(3, 4))], T.log),
    "sigmoid": _simple(lambda r: [2 * r.normal(size=(3, 4))], T.sigmoid),
    "tanh": _simple(lambda r: [r.normal(size=(3, 4))], T.tanh),
    "leaky_relu": _simple(lambda r: [_away(r, (3, 4))], T.leaky_relu),
    "clamp": _simple(lambda r: [r.choice([-0.5, 0.3, 0.6, 1.5], size=(3, 4)) + r.uniform(-0.05, 0.05, (3, 4))],
                     lambda a: T.clamp(a, 0.0, 1.0)),
    "softmax": _simple(lambda r: [r.normal(size=(3, 4))], lambda a: T.softmax(a, axis=1)),
    "reverse_gradient": _simple(lambda r: [r.normal(size=(3, 4))], lambda a: T.reverse_gradient(a, 0.7) * 1.0),
    "pairwise_absdiff_affine": _simple(
        lambda r: [*_separated(r, 3, 2, 4), r.normal(size=(4, 5)), r.normal(size=(5,))],
        lambda vs, vt, w, b: T.pairwise_absdiff_affine(vs, vt, w, b, chunk=2)),
    "l1_normalize_row": _simple(lambda r: [r.uniform(0.1, 1.0, size=(3, 4))], lambda a: l1_normalize(a, "row")),
    "l1_normalize_column": _simple(lambda r: [r.uniform(0.1, 1.0, size=(3, 4))], lambda a: l1_normalize(a, "column")),
    "affine_block_eval": _block_case("eval"),
    "affine_block_train": _block_case("train"),
    "affine_block_plain": _block_case("eval", norm=False),
    "edge_update": _store_case(_graph_edge),
    "node_update": _store_case(_graph_node),
    "avg_pool": _simple(lambda r: [r.normal(size=(2, 3, 4))], avg_pool),
    "lstm": _recurrent("lstm"),
    "gru": _recurrent("gru"),
    "trn": _store_case(_trn),
    # probabilities are reached through softmax so perturbed inputs stay on the simplex
    "source_nll": _simple(lambda r: [r.normal(size=(3, 4))], lambda z: source_nll(T.softmax(z, 1), [0, 3, 1])),
    "target_entropy": _simple(lambda r: [r.normal(size=(3, 4))], lambda z: target_entropy(T.softmax(z, 1))),
    "edge_bce": _edge_bce,
    "domain_adversarial": _store_case(_adversarial),
}


# ops whose backward deliberately departs from the derivative of their forward
OP_SCALE = {"reverse_gradient": -0.7}


def check_op(name: str, rng: np.random.Generator) -> float:
    """Relative error over all inputs of one random instance of an op."""
    inputs, fn = OP_CASES[name](rng)
    out = fn()
    w = rng.normal(size=out.shape)
    for t in inputs:
        t.grad = None
    T.backward(out, seed=w)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]

    def value():
        with T.no_grad():
            return float(np.sum(fn().data * w))

    pairs = [_coordinates(t, g, value, rng) for t, g in zip(inputs, analytic)]
    a = np.concatenate([p[0] for p in pairs])
    n = np.concatenate([p[1] for p in pairs]) * OP_SCALE.get(name, 1.0)
    probed = sum(t.data.size for t in inputs)
    if a.size < probed // 2:
        return math.inf     # mostly kinks: the instance says nothing
    return T.relative_error(a, n)


# -- per-group objectives -----------------------------------------------------------

def audit_config(cfg: TrainConfig, instance: int) -> TrainConfig:
    """A tiny model carrying ``cfg``'s coefficients, with every group present."""
    return cfg.replace(K=3, D=4, n_classes=3, d_v=4, d_n=4, hidden=5, bs=4, bt=4, variant="habg",
                       use_graph=True, adversarial=True, source_only=False, semi_ratio=0.5,
                       agg=AGG_CYCLE[instance % len(AGG_CYCLE)], rounds=1, dropout=0.0, trn_max_tuples=None)


def group_objective(model: ABGModel, group: str, xs, ys, xt, mask: SemiMask, frozen: np.ndarray) -> float:
    """The scalar each group descends: its own terms, with ``beta * Ld`` upstream of the reversal."""
    with T.no_grad():
        fwd = model.forward(xs, ys, xt, "eval", frozen_target_probs=frozen)
        _, terms = loss_terms(model, fwd, ys, mask)
    total = 0.0
    for name in GROUP_TERMS[group]:
        if name == "adv":
            if fwd.adv is not None:
                total += model.cfg.beta * (-fwd.adv.item() if group == "d" else fwd.adv.item())
        elif name in terms:
            total += terms[name].item()
    return total


def check_groups(cfg: TrainConfig, seed: int, instance: int, n_dirs: int = 3, draws: int = 6):
    """Per-group relative error and upstream adversarial-gradient norm for one instance.

    Inputs are redrawn while any group cannot find ``n_dirs`` smooth probe
    directions (a clamp or activation kink sits right at the base point); a
    group that never does is reported with an infinite error.
    """
    c = audit_config(cfg.replace(seed=seed + instance), instance)
    model = ABGModel(c)
    rng = stream(seed, "gradcheck", instance)
    out: dict[str, tuple[float, float]] = {}
    for _ in range(draws):
        xs = rng.normal(size=(c.bs, c.K, c.D))
        xt = rng.normal(size=(c.bt, c.K, c.D)) + 0.5
        ys = rng.integers(c.n_classes, size=c.bs)
        n_lab = c.bt // 2
        mask = SemiMask(np.arange(n_lab), rng.integers(c.n_classes, size=n_lab), c.bt)
        with T.no_grad():
            frozen = model.forward(xs, ys, xt, "eval").probs_t.data.copy()
        _, grads, per_term = group_gradients(model, xs, ys, xt, mask, "eval")
        adv = per_term.get("adv", {})
        out, complete = {}, True
        for g in GROUPS:
            keys = [k for k in model.store.params if k[0] == g]
            if not keys:
                continue
            up = math.sqrt(sum(float(np.sum(adv[k] ** 2)) for k in keys if k in adv)) if g != "d" else 0.0
            a, n = _directions([model.store.params[k] for k in keys], [grads[k] for k in keys],
                               lambda: group_objective(model, g, xs, ys, xt, mask, frozen), rng, n_dirs)
            complete &= a.size == n_dirs
            out[g] = (T.relative_error(a, n, GROUP_FLOOR) if a.size == n_dirs else math.inf, up)
        if complete:
            break
    return out


def run_gradcheck(cfg: TrainConfig, seed: int = 0, instances: int = 20, threshold: float = 1e-4,
                  ops: bool = True, groups: bool = True) -> AuditReport:
    start = time.perf_counter()
    report = AuditReport(threshold=threshold)
    if ops:
        for name in OP_CASES:
            errs = [check_op(name, stream(seed, "op", name, i)) for i in range(instances)]
            worst = max(errs)
            report.rows.append(AuditRow("op", name, worst, instances, passed=worst <= threshold))
    if groups:
        worst = {g: 0.0 for g in GROUPS}
        upstream = {g: 0.0 for g in GROUPS}
        for i in range(instances):
            for g, (err, up) in check_groups(cfg, seed, i).items():
                worst[g] = max(worst[g], err)
                upstream[g] = max(upstream[g], up)
        for g in GROUPS:
            report.rows.append(AuditRow("group", f"theta_{g}", worst[g], instances, upstream[g],
                                        passed=worst[g] <= threshold))
    report.seconds = time.perf_counter() - start
    return report
