"""Basic / bottleneck blocks, ResGCN modules and whole-model assembly."""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .attention import PartAttention
from .errors import ParseError, SpecError
from .graph import SkeletonGraph, build_adjacency
from .nn import BatchNorm, Conv, Linear, Module, SpatialGCN

RESIDUAL_KINDS = ("none", "block", "module", "dense")
BLOCK_KINDS = {"B": "basic", "N": "bottleneck"}
DEFAULT_CHANNELS = (64, 32, 128, 256)
BRANCH_NAMES = ("joint", "velocity", "bone")


def _check_mid(cout, reduction):
    if reduction < 1 or cout % reduction:
        raise SpecError(f"reduction rate {reduction} does not divide {cout} channels")
    return cout // reduction


class Shortcut(Module):
    """1x1 projection plus BatchNorm, used when channels or stride change."""

    def __init__(self, cin, cout, stride, rng):
        self.conv = Conv(cin, cout, rng, 1, stride)
        self.bn = BatchNorm(cout)

    def forward(self, x):
        return self.bn(self.conv(x))


def make_shortcut(cin, cout, stride, rng):
    if cin == cout and stride == 1:
        return None
    return Shortcut(cin, cout, stride, rng)


class SpatialBasic(Module):
    def __init__(self, cin, cout, adj, rng):
        self.gcn = SpatialGCN(cin, cout, adj, rng)
        self.bn = BatchNorm(cout)

    def forward(self, x):
        return self.bn(self.gcn(x))


class TemporalBasic(Module):
    def __init__(self, channels, stride, window, rng):
        self.conv = Conv(channels, channels, rng, window, stride)
        self.bn = BatchNorm(channels)

    def forward(self, x):
        return self.bn(self.conv(x))


class SpatialBottleneck(Module):
    def __init__(self, cin, cout, adj, rng, reduction=4):
        mid = _check_mid(cout, reduction)
        self.reduce = Conv(cin, mid, rng)
        self.bn_reduce = BatchNorm(mid)
        self.gcn = SpatialGCN(mid, mid, adj, rng)
        self.bn = BatchNorm(mid)
        self.expand = Conv(mid, cout, rng)
        self.bn_expand = BatchNorm(cout)

    def forward(self, x):
        h = T.relu(self.bn_reduce(self.reduce(x)))
        h = T.relu(self.bn(self.gcn(h)))
        return self.bn_expand(self.expand(h))


class TemporalBottleneck(Module):
    def __init__(self, channels, stride, window, rng, reduction=4):
        mid = _check_mid(channels, reduction)
        self.reduce = Conv(channels, mid, rng)
        self.bn_reduce = BatchNorm(mid)
        self.conv = Conv(mid, mid, rng, window, stride)
        self.bn = BatchNorm(mid)
        self.expand = Conv(mid, channels, rng)
        self.bn_expand = BatchNorm(channels)

    def forward(self, x):
        h = T.relu(self.bn_reduce(self.reduce(x)))
        h = T.relu(self.bn(self.conv(h)))
        return self.bn_expand(self.expand(h))


class ResGCNModule(Module):
    """Spatial block then temporal block; residual sums enter before each block's ReLU."""

    def __init__(self, cin, cout, adj, rng, kind="bottleneck", stride=1,
                 residual="block", reduction=4, window=9):
        if residual not in RESIDUAL_KINDS:
            raise SpecError(f"unknown residual kind {residual!r}")
        if stride not in (1, 2):
            raise SpecError(f"temporal stride must be 1 or 2, got {stride}")
        self.residual = residual
        if kind == "basic":
            self.spatial = SpatialBasic(cin, cout, adj, rng)
            self.temporal = TemporalBasic(cout, stride, window, rng)
        elif kind == "bottleneck":
            self.spatial = SpatialBottleneck(cin, cout, adj, rng, reduction)
            self.temporal = TemporalBottleneck(cout, stride, window, rng, reduction)
        else:
            raise SpecError(f"unknown block kind {kind!r}")
        block_links = residual in ("block", "dense")
        module_link = residual in ("module", "dense")
        self.spatial_shortcut = make_shortcut(cin, cout, 1, rng) if block_links else None
        self.temporal_shortcut = make_shortcut(cout, cout, stride, rng) if block_links else None
        self.module_shortcut = make_shortcut(cin, cout, stride, rng) if module_link else None

    def forward(self, x):
        block_links = self.residual in ("block", "dense")
        s = self.spatial(x)
        if block_links:
            s = s + (self.spatial_shortcut(x) if self.spatial_shortcut else x)
        s = T.relu(s)
        t = self.temporal(s)
        if block_links:
            t = t + (self.temporal_shortcut(s) if self.temporal_shortcut else s)
        if self.residual in ("module", "dense"):
            t = t + (self.module_shortcut(x) if self.module_shortcut else x)
        return T.relu(t)


_STRUCT_ITEM = re.compile(r"\s*([A-Za-z])(\d+)\s*")


def parse_structure(s):
    """``"[B1,N2,N3,N3]"`` -> ``[("B", 1), ("N", 2), ("N", 3), ("N", 3)]``."""
    text = s.strip()
    if not text.startswith("["):
        raise ParseError("structure must start with '['", position=0)
    if not text.endswith("]"):
        raise ParseError("structure must end with ']'", position=len(text))
    out = []
    pos = 1
    for chunk in text[1:-1].split(","):
        m = _STRUCT_ITEM.fullmatch(chunk)
        if not m:
            raise ParseError(f"malformed entry {chunk.strip()!r}", position=pos)
        kind, count = m.group(1), int(m.group(2))
        if kind not in BLOCK_KINDS:
            raise ParseError(f"block kind must be B or N, got {kind!r}", position=pos + m.start(1))
        if count < 1:
            raise ParseError("module count must be >= 1", position=pos + m.start(2))
        out.append((kind, count))
        pos += len(chunk) + 1
    if len(out) != 4:
        raise ParseError(f"structure needs exactly 4 entries, got {len(out)}", position=len(text) - 1)
    return out


def format_structure(structure):
    return "[" + ",".join(f"{k}{n}" for k, n in structure) + "]"


@dataclass
class ModelSpec:
    structure: list
    num_classes: int = 60
    channels: tuple = DEFAULT_CHANNELS
    with_part_attention: bool = False
    residual: str = "block"
    reduction: int = 4
    attention_reduction: int = 4
    max_distance: int = 2
    window: int = 9
    in_channels: int = 6
    branches: tuple = BRANCH_NAMES
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.structure, str):
            self.structure = parse_structure(self.structure)
        self.structure = [tuple(x) for x in self.structure]
        self.channels = tuple(self.channels)
        self.branches = tuple(self.branches)
        if len(self.structure) != 4 or any(n < 1 for _, n in self.structure):
            raise SpecError("structure needs 4 parts with counts >= 1")
        if len(self.channels) != len(self.structure):
            raise SpecError("channel plan length must match the structure")
        if self.residual not in RESIDUAL_KINDS:
            raise SpecError(f"unknown residual kind {self.residual!r}")
        if not self.branches or any(b not in BRANCH_NAMES for b in self.branches):
            raise SpecError(f"branches must be a subset of {BRANCH_NAMES}")
        if self.num_classes < 1:
            raise SpecError("num_classes must be positive")

    @property
    def name(self):
        prefix = "PA-" if self.with_part_attention else ""
        return f"{prefix}ResGCN{format_structure(self.structure)}"

    def to_json(self):
        doc = asdict(self)
        doc["structure"] = format_structure(self.structure)
        doc["channels"] = list(self.channels)
        doc["branches"] = list(self.branches)
        return doc

    @classmethod
    def from_json(cls, doc):
        return cls(**doc)

    def with_blocks(self, kind):
        """Same depths with every part switched to ``basic`` or kept as given."""
        if kind == "bottleneck":
            return self
        if kind != "basic":
            raise SpecError(f"unknown block kind {kind!r}")
        doc = self.to_json()
        doc["structure"] = [("B", n) for _, n in self.structure]
        return ModelSpec.from_json(doc)


class InputBranch(Module):
    def __init__(self, spec: ModelSpec, adj, rng):
        w_in, w_out = spec.channels[0], spec.channels[1]
        self.modules_ = []
        c = spec.in_channels
        (k1, n1), (k2, n2) = spec.structure[0], spec.structure[1]
        for _ in range(n1):
            self.modules_.append(self._module(c, w_in, adj, rng, k1, spec))
            c = w_in
        for i in range(n2):
            cout = w_out if i == n2 - 1 else w_in
            self.modules_.append(self._module(c, cout, adj, rng, k2, spec))
            c = cout
        self.out_channels = c

    @staticmethod
    def _module(cin, cout, adj, rng, kind, spec, stride=1):
        return ResGCNModule(cin, cout, adj, rng, BLOCK_KINDS[kind], stride,
                            spec.residual, spec.reduction, spec.window)

    def forward(self, x):
        for m in self.modules_:
            x = m(x)
        return x


class ResGCN(Module):
    """Input branches fused by channel concatenation, a two-part mainstream,
    global mean pooling over (T, V) and a linear classifier.

    ``forward`` takes an array [N, B, 6, T, V, M] (B = number of branches) and
    returns logits [N, num_classes]; bodies are folded into the batch and the
    logits of non-empty bodies are averaged.
    """

    def __init__(self, spec: ModelSpec, graph: SkeletonGraph):
        self.spec = spec
        self.graph = graph
        rng = np.random.default_rng(spec.seed)
        adj = build_adjacency(graph.edges, graph.num_joints, spec.max_distance)
        self.input_branches = [InputBranch(spec, adj, rng) for _ in spec.branches]
        c = sum(b.out_channels for b in self.input_branches)
        self.mainstream = []
        self.attention = []
        for (kind, n), width in zip(spec.structure[2:], spec.channels[2:]):
            for i in range(n):
                stride = 2 if i == 0 else 1
                self.mainstream.append(
                    InputBranch._module(c, width, adj, rng, kind, spec, stride)
                )
                if spec.with_part_attention:
                    self.attention.append(
                        PartAttention(width, graph.parts, graph.num_joints, rng,
                                      spec.attention_reduction)
                    )
                c = width
        self.feature_channels = c
        self.classifier = Linear(c, spec.num_classes, rng)
        self.last_features = None
        self.last_body_weights = None

    def body_weights(self, x):
        """[N, M] averaging weights over non-empty bodies (body 0 if all are empty)."""
        present = np.abs(x).reshape(x.shape[0], -1, x.shape[-1]).max(axis=1) > 0
        present[~present.any(axis=1), 0] = True
        return present / present.sum(axis=1, keepdims=True)

    def features(self, x):
        """Last feature map before pooling: [N*M, C, T', V]."""
        data = x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)
        n, b, c, t, v, m = data.shape
        if b != len(self.input_branches):
            raise SpecError(f"model expects {len(self.input_branches)} branches, input has {b}")
        folded = T.as_tensor(x).transpose(0, 5, 1, 2, 3, 4).reshape(n * m, b, c, t, v)
        outs = [branch(folded[:, i]) for i, branch in enumerate(self.input_branches)]
        h = T.concat(outs, axis=1) if len(outs) > 1 else outs[0]
        for i, mod in enumerate(self.mainstream):
            h = mod(h)
            if self.attention:
                h = self.attention[i](h)
        return h

    def forward(self, x):
        data = x.data if isinstance(x, T.Tensor) else np.asarray(x, dtype=np.float64)
        n, m = data.shape[0], data.shape[-1]
        feats = self.features(x)
        self.last_features = feats
        pooled = T.mean_pool(feats, axes=(2, 3))
        logits = self.classifier(pooled).reshape(n, m, self.spec.num_classes)
        w = self.body_weights(data)
        self.last_body_weights = w
        return T.sum_(logits * w[:, :, None], axis=1)

    def predict(self, x):
        return self.forward(x).data.argmax(axis=1)

    def num_modules(self):
        return sum(len(b.modules_) for b in self.input_branches) + len(self.mainstream)


def build_model(spec: ModelSpec, graph: SkeletonGraph) -> ResGCN:
    return ResGCN(spec, graph)


@dataclass
class ParamCount:
    total: int
    by_module: dict = field(default_factory=dict)
    by_category: dict = field(default_factory=dict)

    def to_json(self):
        return asdict(self)


def _category(name):
    leaf = name.rsplit(".", 1)[-1]
    if name.startswith("classifier"):
        return "classifier"
    if name.startswith("attention"):
        return "attention"
    if leaf in ("gamma", "beta"):
        return "batchnorm"
    if re.fullmatch(r"M\d+", leaf):
        return "edge_mask"
    return "conv"


def _module_key(name):
    parts = name.split(".")
    if parts[0] == "input_branches":
        return ".".join(parts[:4])  # input_branches.i.modules_.j
    if parts[0] in ("mainstream", "attention"):
        return ".".join(parts[:2])
    return parts[0]


def count_params(model: Module) -> ParamCount:
    """Trainable scalar counts: total, per top-level module, per category."""
    out = ParamCount(0)
    for name, p in model.named_parameters():
        if not p.trainable:
            continue
        n = int(p.data.size)
        out.total += n
        key = _module_key(name)
        out.by_module[key] = out.by_module.get(key, 0) + n
        cat = _category(name)
        out.by_category[cat] = out.by_category.get(cat, 0) + n
    return out


def structure_hash(model: Module) -> str:
    """SHA-256 of the ordered (name, shape) list of parameters and buffers."""
    doc = [[n, list(p.shape)] for n, p in model.named_parameters()]
    doc += [[n, [s.channels]] for n, s in model.named_buffers()]
    return hashlib.sha256(json.dumps(doc).encode()).hexdigest()
