"""Module container and the basic parameterized layers."""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .graph import AdjacencySet, EdgeImportance, masked_adjacency
from .errors import DimensionError
from .tensor import Parameter, RunningStats


class Module:
    training = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _children(self):
        for name, val in vars(self).items():
            if isinstance(val, (Module, Parameter, RunningStats, EdgeImportance)):
                yield name, val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, (Module, Parameter, RunningStats)):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix=""):
        for name, val in self._children():
            full = prefix + name
            if isinstance(val, Parameter):
                yield full, val
            elif isinstance(val, EdgeImportance):
                for d, m in enumerate(val.M):
                    yield f"{full}.M{d}", m
            elif isinstance(val, Module):
                yield from val.named_parameters(full + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, val in self._children():
            if isinstance(val, RunningStats):
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_buffers(prefix + name + ".")

    def modules(self):
        yield self
        for _, val in self._children():
            if isinstance(val, Module):
                yield from val.modules()

    def train(self, flag=True):
        for m in self.modules():
            m.training = flag
        return self

    def eval(self):
        return self.train(False)

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def reset_running_stats(self):
        for _, s in self.named_buffers():
            s.reset()


def fan_out_normal(rng, shape, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / fan_out), size=shape)


class Conv(Module):
    """Temporal ``k x 1`` convolution without bias; ``k == 1`` gives a pointwise layer."""

    def __init__(self, cin, cout, rng, kernel=1, stride=1):
        if kernel % 2 != 1:
            raise DimensionError("temporal kernel length must be odd")
        self.stride = stride
        self.pad = (kernel - 1) // 2
        self.weight = Parameter(fan_out_normal(rng, (cout, cin, kernel, 1), cout * kernel))

    def forward(self, x):
        return T.conv2d(x, self.weight, self.stride, self.pad)


class BatchNorm(Module):
    def __init__(self, channels):
        self.gamma = Parameter(np.ones(channels), decay=False)
        self.beta = Parameter(np.zeros(channels), decay=False)
        self.stats = RunningStats(channels)

    def forward(self, x):
        return T.batchnorm(x, self.gamma, self.beta, self.training, self.stats)


class Linear(Module):
    """``y = x W^T + b`` with ``W`` of shape [out, in]."""

    def __init__(self, cin, cout, rng, std=0.01, bias=True):
        self.weight = Parameter(rng.normal(0.0, std, size=(cout, cin)))
        self.bias = Parameter(np.zeros(cout), decay=False) if bias else None

    def forward(self, x):
        y = T.matmul(x, T.transpose(self.weight, (1, 0)))
        return y + self.bias if self.bias is not None else y


class SpatialGCN(Module):
    """Sum over hop classes d of ``W_d x (A_d * M_d)``, applied frame by frame."""

    def __init__(self, cin, cout, adj: AdjacencySet, rng):
        self.adj = adj
        self.weights = [
            Parameter(fan_out_normal(rng, (cout, cin), cout)) for _ in range(len(adj))
        ]
        self.importance = EdgeImportance(adj.num_joints, adj.max_distance)

    def forward(self, x):
        return spatial_gcn(x, self.weights, masked_adjacency(self.adj, self.importance))


def spatial_gcn(x, weights, adjacency):
    """x: [N, C_in, T, V]; weights: D+1 of [C_out, C_in]; adjacency: D+1 of [V, V]."""
    if len(weights) != len(adjacency):
        raise DimensionError(f"{len(weights)} weights vs {len(adjacency)} adjacency matrices")
    x = T.as_tensor(x)
    for w in weights:
        if w.ndim != 2 or w.shape[1] != x.shape[1]:
            raise DimensionError(f"gcn weight {w.shape} does not fit input {x.shape}")
    for a in adjacency:
        if a.shape != (x.shape[3], x.shape[3]):
            raise DimensionError(f"adjacency {a.shape} does not fit {x.shape[3]} joints")
    W = T.stack(weights)
    A = T.stack(adjacency)
    return T.graph_conv(x, W, A)
