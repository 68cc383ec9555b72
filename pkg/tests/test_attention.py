import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resgcn import tensor as T
from resgcn.attention import PartAttention, part_att_param_count, part_membership
from resgcn.errors import SpecError
from resgcn.gradcheck import check_gradients
from resgcn.graph import load_graph
from resgcn.model import count_params
from resgcn.tensor import RunningStats

G = load_graph()


def make(c=8, r=2, parts=G.parts, v=25, seed=0):
    return PartAttention(c, parts, v, np.random.default_rng(seed), r)


def test_closed_form_counts():
    assert part_att_param_count(256, 4) == 16384 + 81920 + 128 == 98432
    assert part_att_param_count(128, 4) == 4096 + 20480 + 64 == 24640
    assert count_params(make(256, 4)).total == 98432
    with pytest.raises(SpecError):
        part_att_param_count(10, 4)


def test_equal_projections_give_uniform_weights():
    pa = make()
    for w in pa.W_parts[1:]:
        w.data[...] = pa.W_parts[0].data
    x = np.random.default_rng(1).normal(size=(3, 8, 4, 25))
    out = pa(x)
    assert np.allclose(pa.last_attention, 0.2, atol=1e-9, rtol=0)
    assert np.allclose(out.data, x / 5, atol=1e-9, rtol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_weights_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    pa = make(seed=seed)
    pa(rng.normal(size=(3, 8, 5, 25)) * rng.uniform(0.1, 10))
    assert np.allclose(pa.last_attention.sum(axis=2), 1.0, atol=1e-9, rtol=0)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_frame_permutation(seed):
    rng = np.random.default_rng(seed)
    pa = make(seed=seed)
    x = rng.normal(size=(2, 8, 6, 25))
    perm = rng.permutation(6)
    y = pa(x).data
    att = pa.last_attention.copy()
    y_perm = pa(x[:, :, perm]).data
    assert np.allclose(pa.last_attention, att, atol=1e-12, rtol=0)
    assert np.allclose(y_perm, y[:, :, perm], atol=1e-12, rtol=0)


def test_joints_in_a_part_share_weights():
    pa = make()
    x = np.random.default_rng(2).normal(size=(2, 8, 3, 25))
    ratio = pa(x).data / x
    for part in G.parts:
        for j in part[1:]:
            assert np.allclose(ratio[..., j], ratio[..., part[0]], atol=1e-12)


def test_matches_step_by_step_formula():
    # C=4, r=2, V=25; BatchNorm in training mode uses the batch statistics
    rng = np.random.default_rng(3)
    pa = make(4, 2, seed=3)
    pa.bn.gamma.data[...] = rng.normal(size=2)
    pa.bn.beta.data[...] = rng.normal(size=2)
    x = rng.normal(size=(3, 4, 5, 25))
    out = pa(x).data
    n, c = 3, 4
    g = [[sum(x[b, ch, t, v] for t in range(5) for v in range(25)) / 125 for ch in range(c)] for b in range(n)]
    z = [[sum(g[b][ch] * pa.W.data[ch, k] for ch in range(c)) for k in range(2)] for b in range(n)]
    h = [[0.0] * 2 for _ in range(n)]
    for k in range(2):
        mu = sum(z[b][k] for b in range(n)) / n
        var = sum((z[b][k] - mu) ** 2 for b in range(n)) / n
        for b in range(n):
            val = (z[b][k] - mu) / math.sqrt(var + 1e-5) * pa.bn.gamma.data[k] + pa.bn.beta.data[k]
            h[b][k] = max(val, 0.0)
    expected = np.zeros_like(x)
    for b in range(n):
        for ch in range(c):
            logits = [sum(h[b][k] * wp.data[k, ch] for k in range(2)) for wp in pa.W_parts]
            m = max(logits)
            e = [math.exp(l - m) for l in logits]
            att = [v / sum(e) for v in e]
            for p, part in enumerate(G.parts):
                for j in part:
                    expected[b, ch, :, j] = x[b, ch, :, j] * att[p]
    assert np.allclose(out, expected, atol=1e-12, rtol=0)


def test_single_part_is_identity():
    pa = make(parts=(tuple(range(25)),))
    x = np.random.default_rng(4).normal(size=(2, 8, 3, 25))
    assert np.array_equal(pa(x).data, x)


def test_parts_must_partition():
    with pytest.raises(SpecError):
        part_membership(((0, 1), (1, 2)), 3)
    with pytest.raises(SpecError):
        part_membership(((0,), (1,)), 3)
    with pytest.raises(SpecError):
        make(6, 4)


def test_gradients_on_all_weights():
    rng = np.random.default_rng(5)
    pa = make(4, 2, seed=5)
    x = T.Tensor(rng.normal(size=(3, 4, 3, 25)))
    target = rng.normal(size=(3, 4, 3, 25))

    def loss():
        return T.sum_(pa(x) * target)

    params = [pa.W, pa.bn.gamma, pa.bn.beta] + pa.W_parts
    assert max(check_gradients(loss, params)) < 1e-5
