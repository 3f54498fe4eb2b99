"""Parameter storage, the two-layer affine block, normalization and SGD."""
from __future__ import annotations

import zlib
from typing import Iterable, Mapping

import numpy as np

from . import tensor as T
from .errors import MissingGradient, ShapeMismatch, ZeroNormSlice
from .tensor import Tensor

GROUPS = ("fe", "fv", "a", "ve", "vn", "l", "y", "d")

LEAKY_SLOPE = 0.01
BN_EPS = 1e-5
BN_DECAY = 0.9


def stream(seed: int, *tags) -> np.random.Generator:
    """Independent generator keyed by ``seed`` and string/int tags.

    Every consumer of randomness gets its own stream, so enabling or
    disabling one component never shifts the draws seen by another.
    """
    key = [int(seed) & 0xFFFFFFFF]
    for t in tags:
        key.append(zlib.crc32(str(t).encode()) if not isinstance(t, (int, np.integer)) else int(t))
    return np.random.default_rng(key)


class ParameterStore:
    """Trainable tensors keyed by ``(group, name)`` plus non-trainable buffers."""

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.params: dict[tuple[str, str], Tensor] = {}
        self.buffers: dict[tuple[str, str], np.ndarray] = {}
        self.momentum: dict[tuple[str, str], np.ndarray] = {}

    def add(self, group: str, name: str, value) -> Tensor:
        if group not in GROUPS:
            raise KeyError(f"unknown parameter group {group!r}")
        key = (group, name)
        if key in self.params:
            raise KeyError(f"duplicate parameter {group}/{name}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self.params[key] = t
        return t

    def init_rng(self, group: str, name: str) -> np.random.Generator:
        return stream(self.seed, "init", group, name)

    def __getitem__(self, key: tuple[str, str]) -> Tensor:
        return self.params[key]

    def __contains__(self, key) -> bool:
        return key in self.params

    def __len__(self) -> int:
        return len(self.params)

    def group(self, group: str) -> dict[str, Tensor]:
        return {n: t for (g, n), t in self.params.items() if g == group}

    def keys(self) -> list[tuple[str, str]]:
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grads(self) -> dict[tuple[str, str], np.ndarray]:
        """Current gradient buffers, zeros where nothing flowed."""
        return {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in self.params.items()}

    def n_params(self, group: str | None = None) -> int:
        return sum(t.size for (g, _), t in self.params.items() if group is None or g == group)

    # -- snapshots ----------------------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        out = {f"param/{g}/{n}": t.data for (g, n), t in self.params.items()}
        out.update({f"buffer/{g}/{n}": b for (g, n), b in self.buffers.items()})
        return out

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for key, arr in state.items():
            kind, g, n = key.split("/", 2)
            target = self.params[(g, n)].data if kind == "param" else self.buffers[(g, n)]
            if target.shape != arr.shape:
                raise ShapeMismatch(f"{key}: stored {arr.shape}, model {target.shape}")
            target[...] = arr


def l1_normalize(m, axis) -> Tensor:
    """Scale each row (``axis='row'``) or column (``'column'``) to unit L1 norm."""
    ax = {"row": 1, "column": 0, 1: 1, 0: 0}[axis]
    m = m if isinstance(m, Tensor) else Tensor(m)
    if m.ndim != 2:
        raise ShapeMismatch(f"expected a matrix, got shape {m.shape}")
    if (m.data < 0).any():
        raise ValueError("l1_normalize expects non-negative entries")
    norms = T.tsum(m, axis=ax, keepdims=True)
    if (norms.data <= 0).any():
        raise ZeroNormSlice(f"a {'row' if ax == 1 else 'column'} has zero L1 norm")
    return m / norms


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Linear:
    """Plain affine map ``x @ w + b``."""

    def __init__(self, store: ParameterStore, group: str, name: str, d_in: int, d_out: int):
        self.d_in, self.d_out = d_in, d_out
        rng = store.init_rng(group, name)
        self.w = store.add(group, f"{name}.w", _uniform(rng, d_in, (d_in, d_out)))
        self.b = store.add(group, f"{name}.b", _uniform(rng, d_in, (d_out,)))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise ShapeMismatch(f"expected width {self.d_in}, got {x.shape[-1]}")
        return x @ self.w + self.b


class AffineBlock:
    """affine -> batch norm -> leaky ReLU -> dropout -> affine, applied per row.

    A 1x1 convolution over node or edge positions is exactly this per-row map.
    In ``train`` mode normalization uses batch statistics (and updates the
    running ones) and dropout draws its mask from ``rng``; ``eval`` mode uses
    running statistics and no dropout, so it is deterministic.
    """

    def __init__(self, store: ParameterStore, group: str, name: str, d_in: int, hidden: int,
                 d_out: int, norm: bool = True, dropout: float = 0.0, slope: float = LEAKY_SLOPE):
        self.store, self.group, self.name = store, group, name
        self.d_in, self.hidden, self.d_out = d_in, hidden, d_out
        self.norm, self.dropout, self.slope = norm, dropout, slope
        rng = store.init_rng(group, name)
        self.w1 = store.add(group, f"{name}.w1", _uniform(rng, d_in, (d_in, hidden)))
        self.b1 = store.add(group, f"{name}.b1", _uniform(rng, d_in, (hidden,)))
        self.w2 = store.add(group, f"{name}.w2", _uniform(rng, hidden, (hidden, d_out)))
        self.b2 = store.add(group, f"{name}.b2", _uniform(rng, hidden, (d_out,)))
        if norm:
            self.scale = store.add(group, f"{name}.bn_scale", np.ones(hidden))
            self.shift = store.add(group, f"{name}.bn_shift", np.zeros(hidden))
            store.buffers[(group, f"{name}.bn_mean")] = np.zeros(hidden)
            store.buffers[(group, f"{name}.bn_var")] = np.ones(hidden)

    def params(self) -> list[Tensor]:
        out = [self.w1, self.b1, self.w2, self.b2]
        return out + ([self.scale, self.shift] if self.norm else [])

    def __call__(self, x: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ShapeMismatch(f"{self.group}/{self.name}: expected (n, {self.d_in}), got {x.shape}")
        if x.shape[0] < 1:
            raise ShapeMismatch(f"{self.group}/{self.name}: empty input")
        return self.tail(x @ self.w1 + self.b1, mode, rng)

    def tail(self, h: Tensor, mode: str = "eval", rng: np.random.Generator | None = None) -> Tensor:
        """Everything after the first affine layer."""
        if self.norm:
            h = self._normalize(h, mode)
        h = T.leaky_relu(h, self.slope)
        if mode == "train" and self.dropout > 0:
            if rng is None:
                raise ValueError("train-mode dropout needs an rng")
            keep = rng.random(h.shape) >= self.dropout
            h = h * (keep / (1.0 - self.dropout))
        return h @ self.w2 + self.b2

    def _normalize(self, h: Tensor, mode: str) -> Tensor:
        rm = self.store.buffers[(self.group, f"{self.name}.bn_mean")]
        rv = self.store.buffers[(self.group, f"{self.name}.bn_var")]
        if mode == "train":
            mu = h.mean(axis=0, keepdims=True)
            centered = h - mu
            var = (centered * centered).mean(axis=0, keepdims=True)
            rm *= BN_DECAY
            rm += (1.0 - BN_DECAY) * mu.data[0]
            rv *= BN_DECAY
            rv += (1.0 - BN_DECAY) * var.data[0]
            hn = centered / T.power(var + BN_EPS, 0.5)
        else:
            hn = (h - rm) * (1.0 / np.sqrt(rv + BN_EPS))
        return hn * self.scale + self.shift


def sgd_step(store: ParameterStore, grads: Mapping[tuple[str, str], np.ndarray], lr: float,
             momentum: float = 0.9, weight_decay: float = 1e-4,
             groups: Iterable[str] = GROUPS) -> None:
    """``v <- momentum*v + grad + wd*param``; ``param <- param - lr*v`` on the selected groups."""
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    selected = set(groups)
    for key, p in store.params.items():
        if key[0] not in selected:
            continue
        if key not in grads:
            raise MissingGradient(f"no gradient for {key[0]}/{key[1]}")
        g = grads[key] + weight_decay * p.data
        v = store.momentum.get(key)
        v = g if v is None else momentum * v + g
        store.momentum[key] = v
        p.data -= lr * v
