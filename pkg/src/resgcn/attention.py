"""Part-wise attention: one softmax-normalized channel weighting per body part."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import SpecError
from .nn import BatchNorm, Module, fan_out_normal
from .tensor import Parameter


def part_membership(parts, num_joints):
    """[P, V] 0/1 matrix, row p marks the joints of part p."""
    seen = sorted(j for part in parts for j in part)
    if seen != list(range(num_joints)):
        raise SpecError("parts must be disjoint and cover every joint")
    mem = np.zeros((len(parts), num_joints))
    for p, part in enumerate(parts):
        mem[p, list(part)] = 1.0
    return mem


def part_att_param_count(channels, reduction=4, num_parts=5):
    if channels % reduction:
        raise SpecError(f"reduction {reduction} does not divide {channels}")
    inner = channels // reduction
    return channels * inner + num_parts * inner * channels + 2 * inner


class PartAttention(Module):
    def __init__(self, channels, parts, num_joints, rng, reduction=4):
        if channels % reduction:
            raise SpecError(f"reduction {reduction} does not divide {channels} channels")
        inner = channels // reduction
        self.membership = part_membership(parts, num_joints)
        self.W = Parameter(fan_out_normal(rng, (channels, inner), inner))
        self.bn = BatchNorm(inner)
        self.W_parts = [
            Parameter(fan_out_normal(rng, (inner, channels), channels)) for _ in parts
        ]
        self.last_attention = None

    def attention(self, x):
        """[N, C, P] weights; each (sample, channel) row sums to one over parts."""
        g = T.mean_pool(T.as_tensor(x), axes=(2, 3))
        h = T.relu(self.bn(T.matmul(g, self.W)))
        logits = T.stack([T.matmul(h, wp) for wp in self.W_parts], axis=2)
        return T.softmax(logits, axis=2)

    def forward(self, x):
        x = T.as_tensor(x)
        att = self.attention(x)
        self.last_attention = att.data
        n, c, _, v = x.shape
        per_joint = T.matmul(att, T.Tensor(self.membership))  # [N, C, V]
        return x * per_joint.reshape(n, c, 1, v)
