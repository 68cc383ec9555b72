"""RGCN1 parameter files and the JSON model sidecar.

Layout: ``b"RGCN1"``, uint32 LE manifest length, UTF-8 JSON manifest (ordered
``{"name", "shape", "kind"}`` records), then every listed tensor as
little-endian float64 in manifest order.  BatchNorm running statistics are
stored as ``kind == "buffer"`` records after the parameters.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ParseError, StateError
from .graph import SkeletonGraph
from .model import ModelSpec, build_model, structure_hash

MAGIC = b"RGCN1"


def _records(model):
    for name, p in model.named_parameters():
        yield name, "param", p.data
    for name, s in model.named_buffers():
        if s.initialized:
            yield name + ".mean", "buffer", s.mean
            yield name + ".var", "buffer", s.var


def save_parameters(model, path):
    recs = list(_records(model))
    manifest = [{"name": n, "shape": list(a.shape), "kind": k} for n, k, a in recs]
    blob = json.dumps(manifest, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, _, a in recs:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_parameters(path):
    """Ordered ``{name: (kind, array)}`` from an RGCN1 file."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise ParseError(f"{path}: not an RGCN1 file")
    off = len(MAGIC)
    (n,) = struct.unpack_from("<I", raw, off)
    off += 4
    manifest = json.loads(raw[off : off + n].decode())
    off += n
    out = {}
    for rec in manifest:
        size = int(np.prod(rec["shape"], dtype=int))
        if off + 8 * size > len(raw):
            raise ParseError(f"{path}: payload truncated at {rec['name']}")
        arr = np.frombuffer(raw, dtype="<f8", count=size, offset=off).astype(np.float64)
        out[rec["name"]] = (rec["kind"], arr.reshape(rec["shape"]))
        off += 8 * size
    if off != len(raw):
        raise ParseError(f"{path}: {len(raw) - off} trailing bytes")
    return out


def load_parameters(model, path):
    recs = read_parameters(path)
    for name, p in model.named_parameters():
        if name not in recs:
            raise StateError(f"checkpoint lacks parameter {name}")
        arr = recs[name][1]
        if arr.shape != p.data.shape:
            raise StateError(f"{name}: checkpoint shape {arr.shape} vs model {p.data.shape}")
        p.data[...] = arr
    for name, s in model.named_buffers():
        if name + ".mean" in recs:
            s.mean = recs[name + ".mean"][1].copy()
            s.var = recs[name + ".var"][1].copy()
    return model


def save_checkpoint(model, path, graph_ref=None):
    """Write ``path`` (RGCN1) and ``path + '.json'`` (spec, graph, structural hash)."""
    path = Path(path)
    save_parameters(model, path)
    sidecar = {
        "format": "RGCN1",
        "model_spec": model.spec.to_json(),
        "channel_plan": list(model.spec.channels),
        "graph_ref": graph_ref,
        "graph": model.graph.to_json(),
        "structure_hash": structure_hash(model),
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")


def sidecar_path(path):
    path = Path(path)
    return path.with_name(path.name + ".json")


def load_checkpoint(path):
    """Rebuild the model described by the sidecar, verify its structure, bind weights."""
    try:
        meta = json.loads(sidecar_path(path).read_text())
        graph = SkeletonGraph.from_json(meta["graph"])
        model = build_model(ModelSpec.from_json(meta["model_spec"]), graph)
        expected = meta["structure_hash"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ParseError(f"{sidecar_path(path)}: malformed sidecar ({exc!r})") from None
    if structure_hash(model) != expected:
        raise StateError("checkpoint structure hash does not match the rebuilt model")
    return load_parameters(model, path)
