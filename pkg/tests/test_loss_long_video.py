import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from granvos.gradcheck import check_gradients
from granvos.loss_long_video import (ConfigError, InstanceBank, MatchPair, aggregate_global, bank_embedding,
                                     consistency_mask, geometric_consistency, global_loss, instance_probabilities,
                                     long_term_loss, long_term_surrogate, pairwise_affinity, pooled_embedding,
                                     segment_bounds)
from granvos.network import TransformParams
from oracles import enumerate_long_term, random_tau


def random_pair(g, h=4, w=4, c=5):
    x_i = torch.tensor(g.standard_normal((c, h, w)))
    x_j = torch.tensor(g.standard_normal((c, h, w)))
    return x_i, x_j


def test_affinity_columns_sum_to_one(rng):
    x_i, x_j = random_pair(rng)
    a = pairwise_affinity(x_i, x_j)
    assert a.shape == (16, 16)
    assert torch.allclose(a.sum(0), torch.ones(16, dtype=a.dtype), atol=1e-6)
    assert ((a >= 0) & (a <= 1)).all()
    with pytest.raises(ValueError):
        pairwise_affinity(x_i, x_j[:, :3])


def test_affinity_diagonal_dominates_for_orthogonal_features():
    c = 9
    x = (torch.eye(c) * 2.0 * math.sqrt(c)).reshape(c, 3, 3)
    a = pairwise_affinity(x, x)
    assert torch.equal(a.argmax(dim=0), torch.arange(9))
    off = a - torch.diag(torch.diag(a))
    assert (torch.diag(a)[None, :] > off).all()


def test_affinity_row_permutation_equivariance(rng):
    x_i, x_j = random_pair(rng)
    perm = torch.as_tensor(rng.permutation(16))
    xi_p = x_i.reshape(5, 16)[:, perm].reshape(5, 4, 4)
    a = pairwise_affinity(x_i, x_j)
    a_p = pairwise_affinity(xi_p, x_j)
    assert torch.allclose(a_p, a[perm], atol=1e-12)


def test_geometric_consistency_examples():
    ident = TransformParams.identity(torch.float64)
    m = torch.tensor([2.0, 3.0], dtype=torch.float64)
    assert geometric_consistency(m, m, ident) == 1
    assert geometric_consistency(m, m + torch.tensor([2.0, 0.0], dtype=torch.float64), ident) == 0
    shift = TransformParams.translation(1.0, 0.0, torch.float64)
    o = m - torch.tensor([1.0, 0.0], dtype=torch.float64) + torch.tensor([0.5, 0.0], dtype=torch.float64)
    assert geometric_consistency(m, o, shift) == 1


def test_long_term_zero_when_nothing_consistent(rng):
    x_i, x_j = random_pair(rng)
    far = TransformParams.translation(100.0, 0.0, torch.float64)
    pair = MatchPair(0, 8, pairwise_affinity(x_i, x_j), pairwise_affinity(x_j, x_i), far, far, (4, 4))
    assert long_term_loss(pair).item() == 0.0


def test_long_term_full_mass_when_all_consistent(rng):
    # on a 1x2 grid every pair of cells is within distance 1
    x_i = torch.tensor(rng.standard_normal((3, 1, 2)))
    x_j = torch.tensor(rng.standard_normal((3, 1, 2)))
    ident = TransformParams.identity(torch.float64)
    pair = MatchPair(0, 6, pairwise_affinity(x_i, x_j), pairwise_affinity(x_j, x_i), ident, ident, (1, 2))
    assert consistency_mask(1, 2, ident).sum() == 4
    assert long_term_loss(pair).item() == pytest.approx(-2 * 2, abs=1e-12)


def test_long_term_hand_built_four_cells():
    # 2x2 grid, identity tau: diagonal and 4-neighbours are consistent, diagonals across are not
    a = torch.tensor([[0.4, 0.1, 0.2, 0.3],
                      [0.1, 0.5, 0.1, 0.2],
                      [0.2, 0.1, 0.6, 0.1],
                      [0.3, 0.3, 0.1, 0.4]], dtype=torch.float64)
    ident = TransformParams.identity(torch.float64)
    pair = MatchPair(0, 6, a, a, ident, ident, (2, 2))
    # positions: 0=(0,0) 1=(1,0) 2=(0,1) 3=(1,1); inconsistent pairs: (0,3),(3,0),(1,2),(2,1)
    excluded = a[0, 3] + a[3, 0] + a[1, 2] + a[2, 1]
    expected = -2 * (a.sum() - excluded)
    assert long_term_loss(pair).item() == pytest.approx(expected.item(), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_long_term_matches_enumeration(seed):
    g = np.random.default_rng(seed)
    x_i, x_j = random_pair(g)
    a_ij, a_ji = pairwise_affinity(x_i, x_j), pairwise_affinity(x_j, x_i)
    t_ij, t_ji = random_tau(g), random_tau(g)
    pair = MatchPair(0, 7, a_ij, a_ji, t_ij, t_ji, (4, 4))
    assert long_term_loss(pair).item() == pytest.approx(enumerate_long_term(a_ij, a_ji, t_ij, t_ji, 4, 4), abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_long_term_bounds(seed):
    g = np.random.default_rng(seed)
    x_i, x_j = random_pair(g, 3, 3, 4)
    pair = MatchPair(1, 9, pairwise_affinity(x_i, x_j), pairwise_affinity(x_j, x_i), random_tau(g), random_tau(g), (3, 3))
    val = long_term_loss(pair).item()
    assert -2 * 9 - 1e-9 <= val <= 0


def test_match_pair_gap():
    a = torch.eye(4)
    ident = TransformParams.identity()
    with pytest.raises(ValueError):
        MatchPair(0, 5, a, a, ident, ident, (2, 2))


def test_long_term_gradient_wrt_features():
    g = torch.Generator().manual_seed(2)
    x_i = torch.randn(4, 3, 3, dtype=torch.float64, generator=g, requires_grad=True)
    x_j = torch.randn(4, 3, 3, dtype=torch.float64, generator=g, requires_grad=True)
    tau = TransformParams.translation(0.3, -0.2, torch.float64)

    def fn():
        return long_term_loss(MatchPair(0, 6, pairwise_affinity(x_i, x_j), pairwise_affinity(x_j, x_i), tau, tau, (3, 3)))

    res = check_gradients(fn, [x_i, x_j], h=1e-3)
    assert res.passed(rtol=1e-2), res


def test_surrogate_gives_transform_gradient():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(4, 3, 3, dtype=torch.float64, generator=g)
    raw = torch.zeros(6, dtype=torch.float64, requires_grad=True)
    a = pairwise_affinity(x, x)

    def fn():
        tau = TransformParams.from_raw(raw + torch.tensor([0.4, 0.1, 0.05, 0.0, 0.0, 0.0], dtype=torch.float64))
        return long_term_surrogate(MatchPair(0, 6, a, a, tau, tau, (3, 3)))

    res = check_gradients(fn, [raw], h=1e-3)
    assert res.passed(rtol=1e-2), res
    assert raw.grad.abs().sum() > 0


def orthogonal_abstract(k=4, scale=3.0):
    c, h, w = 9, 3, 3
    x = (torch.eye(c, dtype=torch.float64) * scale * math.sqrt(c)).reshape(c, h, w)
    return torch.stack([x] * k)


def test_aggregate_recovers_query_with_unique_cells():
    feats = orthogonal_abstract()
    r = aggregate_global(feats, 1)
    x_prime, x = r[:9], r[9:]
    cos = torch.nn.functional.cosine_similarity(x_prime.reshape(9, -1), x.reshape(9, -1), dim=0)
    assert (cos >= 0.99).all()


def test_aggregate_shape_and_concat(rng):
    feats = torch.tensor(rng.standard_normal((8, 5, 4, 4)))
    r = aggregate_global(feats, 3)
    assert r.shape == (10, 4, 4)
    assert torch.equal(r[5:], feats[3])
    with pytest.raises(ConfigError):
        aggregate_global(feats[:1], 0)


def test_aggregate_reference_order_invariant(rng):
    feats = torch.tensor(rng.standard_normal((6, 5, 3, 3)))
    order = [0, 5, 3, 1, 4, 2]  # query 0 stays first
    r0 = aggregate_global(feats, 0)
    r1 = aggregate_global(feats[order], 0)
    assert torch.allclose(r0, r1, atol=1e-5)


def test_segment_bounds_cover_video():
    for t in (8, 13, 24, 100):
        b = segment_bounds(t, 8)
        assert len(b) == 8 and b[0][0] == 0 and b[-1][1] == t
        assert all(lo < hi for lo, hi in b)


def test_instance_probability_examples(rng):
    q = torch.tensor(rng.standard_normal(6))
    assert torch.allclose(instance_probabilities(q, InstanceBank(q[None] * 2)), torch.ones(1, dtype=q.dtype))
    bank = torch.eye(4, dtype=torch.float64)
    p = instance_probabilities(bank[2], bank, temperature=0.1)
    assert p.sum().item() == pytest.approx(1.0, abs=1e-6)
    assert p.argmax().item() == 2
    expected = math.exp(10) / (math.exp(10) + 3)
    assert p[2].item() == pytest.approx(expected, rel=1e-9)
    with pytest.raises(ConfigError):
        instance_probabilities(q, torch.zeros(0, 6))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 6))
def test_probabilities_normalized_per_query(seed, n):
    g = torch.Generator().manual_seed(seed)
    queries = torch.randn(n, 8, generator=g, dtype=torch.float64)
    bank = torch.randn(n, 8, generator=g, dtype=torch.float64)
    p = instance_probabilities(queries, bank)
    assert torch.allclose(p.sum(dim=1), torch.ones(n, dtype=torch.float64), atol=1e-6)


def test_global_loss_examples():
    q = torch.randn(1, 6)
    assert global_loss(q, q).item() == pytest.approx(0.0, abs=1e-5)
    same = torch.ones(2, 6)
    assert global_loss(same, same).item() == pytest.approx(4 * math.log(2), abs=1e-5)
    bank = torch.eye(3, 6, dtype=torch.float64)
    base = torch.tensor([[1.0, 0.5, 0.5, 0, 0, 0], [0.2, 1, 0.1, 0, 0, 0], [0.3, 0.3, 1, 0, 0, 0]],
                        dtype=torch.float64)
    better = base.clone()
    better[0, 0] = 2.0  # more similar to its own instance
    assert global_loss(better, bank) < global_loss(base, bank)
    assert global_loss(base, bank) >= 0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_gap_gram_identity(seed):
    g = torch.Generator().manual_seed(seed)
    ra = torch.randn(6, 4, 5, generator=g, dtype=torch.float64)
    rb = torch.randn(6, 3, 2, generator=g, dtype=torch.float64)
    gram = ra.reshape(6, -1).T @ rb.reshape(6, -1)
    assert gram.mean().item() == pytest.approx(float(pooled_embedding(ra) @ pooled_embedding(rb)), abs=1e-5)


def test_bank_embedding_duplicates(rng):
    x = torch.tensor(rng.standard_normal((4, 3, 3)))
    e = bank_embedding(x)
    assert e.shape == (8,)
    assert torch.equal(e[:4], e[4:])


def test_global_loss_gradient_wrt_features():
    g = torch.Generator().manual_seed(4)
    feats = torch.randn(3, 4, 3, 3, dtype=torch.float64, generator=g, requires_grad=True)
    inst = torch.randn(3, 4, 3, 3, dtype=torch.float64, generator=g, requires_grad=True)

    def fn():
        q = torch.stack([pooled_embedding(torch.cat([feats[n], feats[n]])) for n in range(3)])
        return global_loss(q, bank_embedding(inst))

    res = check_gradients(fn, [feats, inst], h=1e-3)
    assert res.passed(rtol=1e-2), res
