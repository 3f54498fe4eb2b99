import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from abg.errors import LabelOutOfRange, LevelMismatch, NotASimplex
from abg.graph import BipartiteEdgeMap
from abg.losses import SemiMask, composite_objective, edge_supervision, semi_losses, source_nll, target_entropy
from abg.tensor import Tensor


def test_nll_perfect_predictions_hit_the_clamp():
    assert source_nll(Tensor(np.eye(3)), [0, 1, 2]).item() == pytest.approx(0.0, abs=1e-12)


def test_nll_uniform_four_classes():
    assert source_nll(Tensor(np.full((5, 4), 0.25)), [0, 1, 2, 3, 0]).item() == pytest.approx(math.log(4), abs=1e-12)


def test_nll_hand_batch():
    p = np.array([[0.7, 0.2, 0.1], [0.1, 0.6, 0.3], [0.3, 0.3, 0.4]])
    want = -(math.log(0.7) + math.log(0.3) + math.log(0.3)) / 3
    assert source_nll(Tensor(p), [0, 2, 1]).item() == pytest.approx(want, abs=1e-14)


def test_nll_label_range():
    with pytest.raises(LabelOutOfRange):
        source_nll(Tensor(np.full((1, 2), 0.5)), [2])


def test_entropy_examples():
    assert target_entropy(Tensor(np.eye(4))).item() == pytest.approx(0.0, abs=1e-5)
    assert target_entropy(Tensor(np.full((3, 3), 1 / 3))).item() == pytest.approx(math.log(3), abs=1e-12)
    h = target_entropy(Tensor(np.array([[0.5, 0.5], [0.9, 0.1]]))).item()
    assert h == pytest.approx(0.50912, abs=1e-5)
    with pytest.raises(NotASimplex):
        target_entropy(Tensor(np.array([[0.5, 0.7]])))


@given(st.integers(0, 10_000), st.integers(2, 6))
def test_entropy_bounded_by_log_c(seed, C):
    p = np.random.default_rng(seed).dirichlet(np.ones(C), size=4)
    h = target_entropy(Tensor(p)).item()
    assert -1e-12 <= h <= math.log(C) + 1e-12


def test_semi_ratio_zero_is_plain_unsupervised(rng):
    ps, pt = rng.dirichlet(np.ones(3), 4), rng.dirichlet(np.ones(3), 4)
    ys = [0, 1, 2, 0]
    a, b = semi_losses(Tensor(ps), ys, Tensor(pt), SemiMask(batch_size=4))
    assert a.item() == source_nll(Tensor(ps), ys).item()
    assert b.item() == target_entropy(Tensor(pt)).item()


def test_semi_ratio_one_has_no_entropy(rng):
    ps, pt = rng.dirichlet(np.ones(3), 2), rng.dirichlet(np.ones(3), 3)
    a, b = semi_losses(Tensor(ps), [0, 1], Tensor(pt), SemiMask([0, 1, 2], [2, 2, 1], 3))
    assert b.item() == 0.0
    want = source_nll(Tensor(ps), [0, 1]).item() + source_nll(Tensor(pt), [2, 2, 1]).item()
    assert a.item() == pytest.approx(want, abs=1e-14)


def test_semi_hand_split(rng):
    ps, pt = rng.dirichlet(np.ones(3), 2), rng.dirichlet(np.ones(3), 4)
    a, b = semi_losses(Tensor(ps), [1, 2], Tensor(pt), SemiMask([1, 3], [0, 2], 4))
    nll_s = -(math.log(ps[0, 1]) + math.log(ps[1, 2])) / 2
    nll_t = -(math.log(pt[1, 0]) + math.log(pt[3, 2])) / 2
    ent = -sum(pt[j, c] * math.log(pt[j, c]) for j in (0, 2) for c in range(3)) / 2
    assert a.item() == pytest.approx(nll_s + nll_t, abs=1e-13)
    assert b.item() == pytest.approx(ent, abs=1e-13)


def test_edge_loss_without_labels_is_zero():
    e = BipartiteEdgeMap(Tensor(np.full((2, 2), 0.5)), "video")
    assert edge_supervision(e, [0, 1], SemiMask(batch_size=2), "video").item() == 0.0


@given(st.lists(st.integers(0, 2), min_size=2, max_size=2), st.lists(st.integers(0, 2), min_size=2, max_size=2))
def test_edge_loss_at_one_half_is_log_two(ys, yt):
    e = BipartiteEdgeMap(Tensor(np.full((2, 2), 0.5)), "video")
    v = edge_supervision(e, ys, SemiMask([0, 1], yt, 2), "video").item()
    assert v == pytest.approx(math.log(2), abs=1e-12)


def test_edge_loss_two_by_two_hand_value():
    e = BipartiteEdgeMap(Tensor(np.array([[0.8, 0.3], [0.2, 0.7]])), "video")
    v = edge_supervision(e, [0, 1], SemiMask([0, 1], [0, 1], 2), "video").item()
    assert v == pytest.approx(-(2 * math.log(0.8) + 2 * math.log(0.7)) / 4, abs=1e-12)
    assert v == pytest.approx(0.28990, abs=1e-5)


def test_frame_level_pairs_align_frames():
    # 1 source and 1 target video of K=2 frames; only the diagonal frame pairs are supervised
    e = np.array([[0.9, 0.1], [0.4, 0.6]])
    m = BipartiteEdgeMap(Tensor(e), "frame")
    v = edge_supervision(m, [1], SemiMask([0], [1], 1), "frame").item()
    assert v == pytest.approx(-(math.log(0.9) + math.log(0.6)) / 2, abs=1e-14)


def test_edge_level_mismatch():
    with pytest.raises(LevelMismatch):
        edge_supervision(BipartiteEdgeMap(Tensor(np.eye(2)), "frame"), [0, 1], SemiMask([0], [0], 2), "video")


def test_composite_examples():
    assert composite_objective((1.0, 0.5, 0.2, 0.4), 0.3, 1.0, 0.1) == pytest.approx(1.39, abs=1e-12)
    assert composite_objective((1.0, 0.5, 0.2, 0.4), 0.0, 0.0, 0.1) == 1.0
    assert composite_objective((1.0, 0.5, 0.2, 0.4), 0.3, 1.0, 0.1, supervised_edges=False) == pytest.approx(1.15)
