"""Synthetic cross-domain video features, the ABGD file format, batching, label masks."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .config import coerce_kv, read_kv
from .errors import (BadMagic, BatchLargerThanSet, DimMismatch, InvalidSpec, TruncatedFile,
                     VersionMismatch)
from .losses import SemiMask
from .nn import stream

DOMAINS = ("source", "target")


@dataclass
class VideoSet:
    frames: np.ndarray          # (N, K, D) float64
    labels: np.ndarray          # (N,) int
    domain: str = "source"
    n_classes: int = 2

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.frames.ndim != 3 or self.frames.shape[0] != self.labels.shape[0]:
            raise DimMismatch(f"frames {self.frames.shape} vs labels {self.labels.shape}")
        if self.domain not in DOMAINS:
            raise InvalidSpec(f"domain must be one of {DOMAINS}")

    def __len__(self) -> int:
        return int(self.frames.shape[0])

    @property
    def K(self) -> int:
        return int(self.frames.shape[1])

    @property
    def D(self) -> int:
        return int(self.frames.shape[2])

    def subset(self, idx) -> "VideoSet":
        idx = np.asarray(idx, dtype=np.intp)
        return VideoSet(self.frames[idx], self.labels[idx], self.domain, self.n_classes)

    def split(self, n_first: int) -> tuple["VideoSet", "VideoSet"]:
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))

    def equals(self, other: "VideoSet") -> bool:
        return (self.domain == other.domain and self.n_classes == other.n_classes
                and self.frames.shape == other.frames.shape
                and np.array_equal(self.frames, other.frames) and np.array_equal(self.labels, other.labels))


@dataclass
class ShiftSpec:
    """How the target domain departs from the source domain."""
    rotation: float = math.pi / 3       # angle in a random 2-plane
    bias: float = 2.0                   # norm of the target offset vector
    noise_source: float = 1.0
    noise_target: float = 1.0
    proto_scale: float = 0.3            # per-coordinate std of class prototypes
    temporal_scale: float = 0.6         # per-coordinate std of the temporal direction
    order: bool = False                 # odd classes replay their partner's frames reversed
    aligned: bool = True                # rotate and bias inside the span of the class prototypes

    def validate(self) -> None:
        for f in ("bias", "noise_source", "noise_target", "proto_scale", "temporal_scale"):
            v = getattr(self, f)
            if not (math.isfinite(v) and v >= 0):
                raise InvalidSpec(f"{f} must be finite and non-negative")
        if not math.isfinite(self.rotation):
            raise InvalidSpec("rotation must be finite")

    @classmethod
    def from_file(cls, path) -> tuple["ShiftSpec", dict]:
        """Read a key=value file; keys that are not shift fields are returned separately."""
        raw = read_kv(path)
        own = {f.name for f in fields(cls)}
        spec = cls(**coerce_kv(cls, {k: v for k, v in raw.items() if k in own}))
        spec.validate()
        return spec, {k: v for k, v in raw.items() if k not in own}


def _span_basis(span: np.ndarray, rng: np.random.Generator, min_rank: int = 2) -> np.ndarray:
    """Orthonormal basis of ``span``'s columns, topped up with random directions to ``min_rank``."""
    u, sv, _ = np.linalg.svd(span, full_matrices=False)
    basis = u[:, sv > 1e-9 * max(sv.max(initial=0.0), 1e-300)]
    while basis.shape[1] < min_rank:
        v = rng.normal(size=span.shape[0])
        v -= basis @ (basis.T @ v)
        basis = np.concatenate([basis, (v / np.linalg.norm(v))[:, None]], axis=1)
    return basis


def rotation_matrix(D: int, angle: float, rng: np.random.Generator, basis: np.ndarray | None = None) -> np.ndarray:
    """Rotation by ``angle`` in a random 2-plane (inside ``basis``'s column space when given)."""
    mix = rng.normal(size=(D, 2)) if basis is None else basis @ rng.normal(size=(basis.shape[1], 2))
    plane, _ = np.linalg.qr(mix)
    u, v = plane[:, 0], plane[:, 1]
    c, s = math.cos(angle), math.sin(angle)
    return (np.eye(D) + (c - 1.0) * (np.outer(u, u) + np.outer(v, v))
            + s * (np.outer(v, u) - np.outer(u, v)))


def _templates(C: int, K: int, D: int, spec: ShiftSpec, rng: np.random.Generator) -> np.ndarray:
    mu = rng.normal(scale=spec.proto_scale, size=(C, D))
    phi = rng.normal(scale=spec.temporal_scale, size=(C, D))
    rho = rng.uniform(0, 2 * math.pi, size=C)
    k = np.arange(K)
    waves = np.sin(2 * math.pi * k[None, :] / K + rho[:, None])           # (C, K)
    tpl = mu[:, None, :] + waves[:, :, None] * phi[:, None, :]            # (C, K, D)
    if spec.order:
        for c in range(1, C, 2):
            tpl[c] = tpl[c - 1][::-1]
    return tpl


def _sample(tpl: np.ndarray, n: int, noise: float, rng: np.random.Generator):
    C = tpl.shape[0]
    labels = rng.permutation(np.arange(n) % C)
    frames = tpl[labels] + noise * rng.normal(size=(n,) + tpl.shape[1:])
    return frames, labels


def generate(spec: ShiftSpec, N_s: int, N_t: int, C: int, K: int, D: int, seed: int = 0):
    """Source and target sets drawn from shared class templates; the target is shifted.

    Frame ``k`` of a class-``c`` video is ``mu_c + sin(2 pi k / K + rho_c) phi_c``
    plus Gaussian noise.  Target frames are then rotated in a random plane and
    offset by a random vector of norm ``spec.bias``.  With ``spec.aligned`` the
    plane and the offset lie in the span of the centered class prototypes, so
    the shift moves exactly the directions a frame-averaging classifier relies
    on.  Features are rounded to float32 precision, like stored backbone features.
    """
    spec.validate()
    if C < 2 or min(K, D) < 1 or min(N_s, N_t) < 0:
        raise InvalidSpec("need C >= 2, K, D >= 1 and non-negative set sizes")
    if spec.order and C % 2:
        raise InvalidSpec("order-dependent classes come in pairs; C must be even")
    world = stream(seed, "world")
    tpl = _templates(C, K, D, spec, world)
    basis = None
    if spec.aligned and D >= 2:
        mu = tpl.mean(axis=1)
        basis = _span_basis((mu - mu.mean(axis=0)).T, world)
    rot = rotation_matrix(D, spec.rotation, world, basis) if D >= 2 else np.eye(D)
    direction = world.normal(size=D) if basis is None else basis @ world.normal(size=basis.shape[1])
    offset = spec.bias * direction / np.linalg.norm(direction)

    xs, ys = _sample(tpl, N_s, spec.noise_source, stream(seed, "sample", "source"))
    xt, yt = _sample(tpl, N_t, spec.noise_target, stream(seed, "sample", "target"))
    xt = xt @ rot.T + offset
    f32 = lambda a: a.astype(np.float32).astype(np.float64)  # noqa: E731
    return (VideoSet(f32(xs), ys, "source", C), VideoSet(f32(xt), yt, "target", C))


# -- ABGD binary format --------------------------------------------------------

MAGIC = b"ABGD"
VERSION = 1
_HEADER = struct.Struct("<4sHIHIHB")   # magic, version, N, K, D, C, domain


def write_dataset(path, vs: VideoSet) -> None:
    N, K, D = vs.frames.shape
    header = _HEADER.pack(MAGIC, VERSION, N, K, D, vs.n_classes, DOMAINS.index(vs.domain))
    labels = vs.labels.astype("<u4").reshape(N, 1).view(np.uint8)
    feats = vs.frames.astype("<f4").reshape(N, K * D).view(np.uint8)
    body = np.concatenate([labels, feats], axis=1) if N else np.zeros((0, 0), np.uint8)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body.tobytes())


def read_dataset(path) -> VideoSet:
    blob = Path(path).read_bytes()
    if len(blob) < 4 or blob[:4] != MAGIC:
        raise BadMagic(f"{path}: not an ABGD file")
    if len(blob) < _HEADER.size:
        raise TruncatedFile(f"{path}: header cut short")
    _, version, N, K, D, C, dom = _HEADER.unpack_from(blob)
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {VERSION}")
    if dom >= len(DOMAINS):
        raise DimMismatch(f"{path}: unknown domain tag {dom}")
    row = 4 + 4 * K * D
    payload = len(blob) - _HEADER.size
    if payload < N * row:
        raise TruncatedFile(f"{path}: {payload} payload bytes, header promises {N * row}")
    if payload > N * row:
        raise DimMismatch(f"{path}: {payload - N * row} bytes beyond the declared payload")
    rows = np.frombuffer(blob, dtype=np.uint8, offset=_HEADER.size).reshape(N, row)
    labels = rows[:, :4].copy().view("<u4").reshape(N).astype(np.int64)
    frames = rows[:, 4:].copy().view("<f4").reshape(N, K, D).astype(np.float64)
    if N and labels.max() >= C:
        raise DimMismatch(f"{path}: label {labels.max()} outside {C} classes")
    return VideoSet(frames, labels, DOMAINS[dom], C)


# -- batching ------------------------------------------------------------------

@dataclass
class VideoBatch:
    idx: np.ndarray
    frames: np.ndarray
    labels: np.ndarray
    domain: str

    def __len__(self) -> int:
        return int(self.idx.size)


def batches_per_epoch(N_s: int, N_t: int, B_s: int, B_t: int) -> int:
    return max(N_s // B_s, N_t // B_t)


def _side_chunks(N: int, B: int, n: int, rng: np.random.Generator) -> list[np.ndarray]:
    chunks: list[np.ndarray] = []
    while len(chunks) < n:
        perm = rng.permutation(N)
        chunks.extend(perm[i * B:(i + 1) * B] for i in range(N // B))
    return chunks[:n]


def batches(set_s: VideoSet, set_t: VideoSet, B_s: int, B_t: int, seed: int,
            epoch: int) -> Iterator[tuple[VideoBatch, VideoBatch]]:
    """One epoch of fixed-size (source, target) batch pairs.

    Each side is shuffled independently; the side with fewer full batches
    reshuffles and keeps going until the longer side is exhausted.
    Partial batches are dropped.
    """
    if B_s > len(set_s) or B_t > len(set_t):
        raise BatchLargerThanSet(f"batch sizes ({B_s}, {B_t}) exceed set sizes ({len(set_s)}, {len(set_t)})")
    n = batches_per_epoch(len(set_s), len(set_t), B_s, B_t)
    cs = _side_chunks(len(set_s), B_s, n, stream(seed, "batches", epoch, "source"))
    ct = _side_chunks(len(set_t), B_t, n, stream(seed, "batches", epoch, "target"))
    for a, b in zip(cs, ct):
        yield (VideoBatch(a, set_s.frames[a], set_s.labels[a], set_s.domain),
               VideoBatch(b, set_t.frames[b], set_t.labels[b], set_t.domain))


def source_batches(set_s: VideoSet, B_s: int, seed: int, epoch: int) -> Iterator[VideoBatch]:
    """Source-only stream for baselines that never touch target data."""
    if B_s > len(set_s):
        raise BatchLargerThanSet(f"batch size {B_s} exceeds set size {len(set_s)}")
    for a in _side_chunks(len(set_s), B_s, len(set_s) // B_s, stream(seed, "batches", epoch, "source")):
        yield VideoBatch(a, set_s.frames[a], set_s.labels[a], set_s.domain)


# -- semi-supervised masks ------------------------------------------------------

def labeled_subset(n: int, ratio: float, seed: int) -> np.ndarray:
    """Sorted indices of the ``round(ratio * n)`` target videos whose labels are revealed."""
    if not 0.0 <= ratio <= 1.0:
        raise InvalidSpec("ratio must lie in [0, 1]")
    count = int(math.floor(ratio * n + 0.5))
    return np.sort(stream(seed, "semi_mask").permutation(n)[:count])


def mask_labels(target: VideoSet, ratio: float, seed: int):
    """Fixed labeled subset of the target set and a per-batch mask builder."""
    chosen = labeled_subset(len(target), ratio, seed)
    member = np.zeros(len(target), dtype=bool)
    member[chosen] = True

    def for_batch(batch: VideoBatch) -> SemiMask:
        pos = np.flatnonzero(member[batch.idx])
        return SemiMask(pos, target.labels[batch.idx[pos]], len(batch))

    return chosen, for_batch
