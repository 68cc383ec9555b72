"""Skeleton topology, hop-distance adjacency and edge-importance masks."""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import DimensionError, SpecError, TopologyError
from .tensor import Parameter, Tensor, mul

NTU_GRAPH_FILE = "ntu25_graph.json"


@dataclass(frozen=True)
class SkeletonGraph:
    """Joint tree with 0-based ``(parent, child)`` edges and a body-part partition."""

    num_joints: int
    edges: tuple
    center_joint: int
    parts: tuple
    part_names: tuple = ()
    name: str = "custom"

    def __post_init__(self):
        v = self.num_joints
        for p, c in self.edges:
            if not (0 <= p < v and 0 <= c < v) or p == c:
                raise TopologyError(f"edge ({p}, {c}) invalid for {v} joints")
        if not 0 <= self.center_joint < v:
            raise TopologyError(f"center joint {self.center_joint} out of range")
        seen = [j for part in self.parts for j in part]
        if len(seen) != len(set(seen)) or sorted(seen) != list(range(v)):
            raise SpecError("body parts must be disjoint and cover every joint")

    @property
    def parents(self):
        """Parent index per joint, -1 for the root."""
        par = np.full(self.num_joints, -1, dtype=int)
        for p, c in self.edges:
            if par[c] != -1:
                raise TopologyError(f"joint {c} has two parents")
            par[c] = p
        return par

    def part_of(self):
        """Part index of every joint."""
        lab = np.empty(self.num_joints, dtype=int)
        for i, part in enumerate(self.parts):
            lab[list(part)] = i
        return lab

    def to_json(self):
        return {
            "name": self.name,
            "num_joints": self.num_joints,
            "indexing": "1-based",
            "center_joint": self.center_joint + 1,
            "edges": [[p + 1, c + 1] for p, c in self.edges],
            "parts": [
                {"name": self.part_names[i] if i < len(self.part_names) else f"part{i}",
                 "joints": [j + 1 for j in part]}
                for i, part in enumerate(self.parts)
            ],
        }

    @classmethod
    def from_json(cls, doc):
        # part order is significant (attention projections are indexed by it),
        # so parts are an ordered list of {"name", "joints"} records or bare lists
        parts = doc["parts"]
        if not isinstance(parts, list):
            raise SpecError("graph 'parts' must be an ordered list")
        if parts and isinstance(parts[0], dict):
            names, lists = tuple(p["name"] for p in parts), [p["joints"] for p in parts]
        else:
            names, lists = (), parts
        return cls(
            num_joints=int(doc["num_joints"]),
            edges=tuple((int(p) - 1, int(c) - 1) for p, c in doc["edges"]),
            center_joint=int(doc["center_joint"]) - 1,
            parts=tuple(tuple(int(j) - 1 for j in part) for part in lists),
            part_names=names,
            name=doc.get("name", "custom"),
        )


def load_graph(path=None) -> SkeletonGraph:
    """Load a graph definition file; the bundled NTU-25 layout when ``path`` is None."""
    if path is None:
        text = resources.files("resgcn").joinpath("data", NTU_GRAPH_FILE).read_text()
    else:
        text = Path(path).read_text()
    return SkeletonGraph.from_json(json.loads(text))


def ntu_graph() -> SkeletonGraph:
    return load_graph()


def chain_graph(num_joints=5, num_parts=5) -> SkeletonGraph:
    """Path graph 0-1-...-(V-1), parts are contiguous runs; handy for small tests."""
    bounds = np.linspace(0, num_joints, num_parts + 1).round().astype(int)
    parts = tuple(tuple(range(bounds[i], bounds[i + 1])) for i in range(num_parts))
    return SkeletonGraph(
        num_joints=num_joints,
        edges=tuple((i, i + 1) for i in range(num_joints - 1)),
        center_joint=num_joints // 2,
        parts=parts,
        name=f"chain{num_joints}",
    )


def graph_distances(edges, num_joints) -> np.ndarray:
    """All-pairs hop counts by breadth-first search from every node."""
    nbrs = [[] for _ in range(num_joints)]
    for a, b in edges:
        nbrs[a].append(b)
        nbrs[b].append(a)
    dist = np.full((num_joints, num_joints), -1, dtype=int)
    for src in range(num_joints):
        dist[src, src] = 0
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for w in nbrs[u]:
                if dist[src, w] < 0:
                    dist[src, w] = dist[src, u] + 1
                    queue.append(w)
    if (dist < 0).any():
        raise TopologyError("graph is disconnected")
    return dist


@dataclass(frozen=True)
class AdjacencySet:
    max_distance: int
    A: tuple
    A_norm: tuple

    @property
    def num_joints(self):
        return self.A[0].shape[0]

    def __len__(self):
        return len(self.A)


def normalize_symmetric(a):
    deg = a.sum(axis=1)
    scale = np.zeros_like(deg, dtype=float)
    nz = deg > 0
    scale[nz] = 1.0 / np.sqrt(deg[nz])
    return a * scale[:, None] * scale[None, :]


def build_adjacency(edges, num_joints, max_distance=2) -> AdjacencySet:
    """Exact-distance hop classes ``A_0..A_D`` and their symmetric normalizations."""
    if max_distance < 0:
        raise SpecError("max_distance must be non-negative")
    dist = graph_distances(edges, num_joints)
    A = tuple((dist == d).astype(float) for d in range(max_distance + 1))
    A_norm = tuple(normalize_symmetric(a) for a in A)
    for a in A + A_norm:
        a.flags.writeable = False
    return AdjacencySet(max_distance, A, A_norm)


class EdgeImportance:
    """One learnable V x V multiplier per hop class, all-ones at start."""

    def __init__(self, num_joints, max_distance=2):
        self.M = [
            Parameter(np.ones((num_joints, num_joints)), name=f"M{d}")
            for d in range(max_distance + 1)
        ]

    def __len__(self):
        return len(self.M)


def masked_adjacency(adj: AdjacencySet, m: EdgeImportance) -> list[Tensor]:
    if len(adj) != len(m):
        raise DimensionError(f"{len(adj)} adjacency matrices vs {len(m)} masks")
    out = []
    for a, mask in zip(adj.A_norm, m.M):
        if mask.shape != a.shape:
            raise DimensionError(f"mask {mask.shape} vs adjacency {a.shape}")
        out.append(mul(Tensor(a), mask))
    return out
