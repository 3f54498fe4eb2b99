"""Synthetic-shift experiments shared by the acceptance suite and scripts/."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .config import TrainConfig, source_only
from .data import ShiftSpec, VideoSet, generate
from .trainer import fit


@dataclass
class Scenario:
    spec: ShiftSpec = field(default_factory=ShiftSpec)
    n_source: int = 512
    n_target: int = 512       # unlabeled (or partly labeled) training targets
    n_test: int = 512         # held-out targets, labels used for measurement only


def make_data(cfg: TrainConfig, scenario: Scenario, seed: int) -> tuple[VideoSet, VideoSet, VideoSet]:
    src, tgt = generate(scenario.spec, scenario.n_source, scenario.n_target + scenario.n_test,
                        cfg.n_classes, cfg.K, cfg.D, seed)
    train, test = tgt.split(scenario.n_target)
    return src, train, test


def target_accuracy(cfg: TrainConfig, data: tuple[VideoSet, VideoSet, VideoSet]) -> float:
    src, train, test = data
    _, hist = fit(cfg, src, train, eval_set=test, eval_every=max(cfg.epochs, 1))
    return hist[-1].target_accuracy


@dataclass
class Comparison:
    accuracies: dict[str, list[float]]
    seconds: float

    def mean(self, name: str) -> float:
        return float(np.mean(self.accuracies[name]))

    def summary(self) -> str:
        parts = [f"{k}={100 * self.mean(k):.1f}" for k in self.accuracies]
        return ", ".join(parts) + f" ({self.seconds:.0f}s)"


def compare(arms: dict[str, TrainConfig], scenario: Scenario, seeds=range(5),
            cache: dict | None = None) -> Comparison:
    """Mean held-out target accuracy of each arm, with data and init seeded per seed.

    Pass the same ``cache`` dict to several comparisons to train identical
    (config, scenario, seed) runs only once.
    """
    start = time.perf_counter()
    acc: dict[str, list[float]] = {k: [] for k in arms}
    for seed in seeds:
        for name, cfg in arms.items():
            c = cfg.replace(seed=seed)
            key = (json.dumps(c.to_dict(), sort_keys=True), repr(scenario))
            if cache is not None and key in cache:
                result = cache[key]
            else:
                result = target_accuracy(c, make_data(c, scenario, seed))
                if cache is not None:
                    cache[key] = result
            acc[name].append(result)
    return Comparison(acc, time.perf_counter() - start)


def transfer_arms(cfg: TrainConfig) -> dict[str, TrainConfig]:
    return {"abg": cfg.replace(agg="avg"), "source_only": source_only(cfg.replace(agg="avg"))}


def aggregator_arms(cfg: TrainConfig) -> dict[str, TrainConfig]:
    return {a: cfg.replace(agg=a) for a in ("avg", "trn", "lstm")}


def graph_arms(cfg: TrainConfig) -> dict[str, TrainConfig]:
    return {"abg": cfg, "no_graph": cfg.replace(use_graph=False)}


def semi_arms(cfg: TrainConfig, ratios=(0.3, 0.5, 0.7, 0.9)) -> dict[str, TrainConfig]:
    arms = {"unsupervised": cfg.replace(semi_ratio=0.0)}
    arms.update({f"semi_{r:g}": cfg.replace(semi_ratio=r) for r in ratios})
    return arms
