import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from abg import tensor as T
from abg.adversarial import (DomainDiscriminator, LabelEmbedder, check_simplex, domain_adversarial_loss,
                             embed_condition, one_hot)
from abg.errors import NotASimplex, ShapeMismatch
from abg.nn import ParameterStore
from abg.tensor import Tensor

from oracles import affine_row, sigmoid


def _embedder(C=3, W=4, seed=0):
    emb = LabelEmbedder(ParameterStore(seed), C, W)
    emb.b.data[...] = 0.0
    return emb


def test_one_hot_picks_embedding_row():
    emb = _embedder()
    out = embed_condition(one_hot([2], 3), emb).data
    np.testing.assert_array_equal(out[0], emb.w.data[2])


def test_uniform_condition_gives_mean_row():
    emb = _embedder()
    out = embed_condition(np.full(3, 1 / 3), emb).data
    np.testing.assert_allclose(out[0], emb.w.data.mean(axis=0), rtol=0, atol=1e-15)


def test_embedding_matches_loop_oracle(rng):
    emb = LabelEmbedder(ParameterStore(3), 4, 5)
    p = rng.dirichlet(np.ones(4))
    want = [emb.b.data[o] + sum(p[c] * emb.w.data[c, o] for c in range(4)) for o in range(5)]
    np.testing.assert_allclose(embed_condition(p, emb).data[0], want, rtol=0, atol=1e-14)


def test_non_simplex_condition_is_rejected():
    with pytest.raises(NotASimplex):
        embed_condition(np.array([0.7, 0.7, -0.4]) * 2, _embedder())
    with pytest.raises(NotASimplex):
        check_simplex(np.array([[0.5, 0.6]]))


def _constant_disc(width, value):
    d = DomainDiscriminator(ParameterStore(), width, 3, norm=False)
    for p in d.net.params():
        p.data[...] = 0.0
    d.net.b2.data[...] = math.log(value / (1 - value))
    return d


def test_uninformative_discriminator_value(rng):
    d = _constant_disc(3, 0.5)
    z = lambda n: Tensor(rng.normal(size=(n, 3)))
    ld = domain_adversarial_loss(z(3), z(3), z(2), z(2), d).item()
    assert ld == pytest.approx(2 * math.log(0.5), abs=1e-12)


def test_perfect_discriminator_is_clamped_near_zero(rng):
    d = DomainDiscriminator(ParameterStore(), 2, 3, norm=False)
    for p in d.net.params():
        p.data[...] = 0.0
    d.net.w2.data[...] = 1000.0
    d.net.w1.data[0, :] = 1.0
    ns = Tensor(np.array([[5.0, 0.0], [6.0, 0.0]]))
    nt = Tensor(np.array([[-5.0, 0.0], [-6.0, 0.0]]))
    zero = Tensor(np.zeros((2, 2)))
    ld = domain_adversarial_loss(ns, zero, nt, zero, d).item()
    assert ld == pytest.approx(2 * math.log(1 - 1e-7), abs=1e-15)
    assert -3e-7 < ld < 0


def test_two_plus_two_hand_oracle(rng):
    d = DomainDiscriminator(ParameterStore(7), 3, 4, norm=False)
    ns, ys, nt, yt = (rng.normal(size=(2, 3)) for _ in range(4))
    ld = domain_adversarial_loss(Tensor(ns), Tensor(ys), Tensor(nt), Tensor(yt), d).item()
    ps = [sigmoid(affine_row(ns[i] + ys[i], d.net)[0]) for i in range(2)]
    pt = [sigmoid(affine_row(nt[i] + yt[i], d.net)[0]) for i in range(2)]
    want = (math.log(ps[0]) + math.log(ps[1])) / 2 + (math.log(1 - pt[0]) + math.log(1 - pt[1])) / 2
    assert ld == pytest.approx(want, abs=1e-12)


@given(st.floats(0.01, 0.99), st.floats(0.01, 0.99))
def test_loss_is_monotone_in_discriminator_outputs(a, b):
    def ld(ps, pt):
        return math.log(ps) + math.log(1 - pt)
    assert ld(min(a + 0.005, 0.999), b) > ld(a, b)
    assert ld(a, max(b - 0.005, 0.001)) > ld(a, b)
    assert ld(a, b) <= 0


def test_zero_reversal_blocks_upstream_gradient(rng):
    d = DomainDiscriminator(ParameterStore(1), 3, 4, norm=False)
    ns = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    nt = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    zero = Tensor(np.zeros((2, 3)))
    T.backward(domain_adversarial_loss(ns, zero, nt, zero, d, reverse=0.0))
    assert not ns.grad.any() and not nt.grad.any()
    assert d.net.w2.grad.any()


def test_reversal_flips_sum_gradient():
    x = Tensor(np.arange(4.0), requires_grad=True)
    T.backward(T.reverse_gradient(x, 1.0).sum())
    np.testing.assert_array_equal(x.grad, -np.ones(4))


def test_shape_checks():
    d = DomainDiscriminator(ParameterStore(), 3, 4)
    a, b = Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4)))
    with pytest.raises(ShapeMismatch):
        domain_adversarial_loss(a, b, a, a, d)
    with pytest.raises(ShapeMismatch):
        domain_adversarial_loss(b, b, b, b, d)
