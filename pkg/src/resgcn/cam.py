"""Class activation maps over (frame, joint) and activated-joint extraction."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ParseError, UsageError

CAM_FORMAT = "resgcn-cam/1"


@dataclass
class ActivationMap:
    values: np.ndarray  # [T', V]
    class_id: int
    frame_scale: float

    @property
    def num_frames(self):
        return self.values.shape[0]


def class_activation_map(model, x, class_id=None):
    """CAM of one sequence given as branch features [B, 6, T, V, M].

    ``class_id`` defaults to the predicted class.  Per-body maps are averaged
    with the same weights the model uses to fuse body logits, so the map's mean
    equals ``logit - bias`` for the chosen class.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 5:
        raise UsageError(f"expected one sequence [B, 6, T, V, M], got shape {x.shape}")
    from .train import select_branches

    xb = select_branches(x[None], model)
    k = model.spec.num_classes
    was_training = model.training
    model.eval()
    try:
        feats = model.features(xb).data  # [M, C, T', V]
    finally:
        model.train(was_training)
    weight = model.classifier.weight.data
    if class_id is None:
        pooled = feats.mean(axis=(2, 3))
        logits = (pooled @ weight.T + model.classifier.bias.data)
        class_id = int((model.body_weights(xb)[0] @ logits).argmax())
    if not 0 <= class_id < k:
        raise UsageError(f"class_id {class_id} outside [0, {k})")
    per_body = np.einsum("c,mctv->mtv", weight[class_id], feats)
    values = np.tensordot(model.body_weights(xb)[0], per_body, axes=1)
    return ActivationMap(values, int(class_id), feats.shape[2] / x.shape[2])


def activated_joints(cam: ActivationMap, frames=None, quantile=0.8):
    """``{frame: sorted joints}`` whose score strictly exceeds the map-wide quantile.

    The threshold is an observed score (the ``higher`` quantile rule), so a
    quantile close enough to 1 selects nothing and ties never activate.
    """
    if not 0.0 < quantile < 1.0:
        raise UsageError(f"quantile must lie in (0, 1), got {quantile}")
    t = cam.num_frames
    frames = range(t) if frames is None else frames
    thr = np.quantile(cam.values, quantile, method="higher")
    out = {}
    for f in frames:
        if not 0 <= f < t:
            raise UsageError(f"frame {f} outside [0, {t})")
        out[int(f)] = [int(j) for j in np.flatnonzero(cam.values[f] > thr)]
    return out


def cam_schema():
    return json.loads(resources.files("resgcn").joinpath("data", "cam_schema.json").read_text())


def cam_document(cam: ActivationMap, joints=None, edges=(), quantile=None, class_name=None):
    joints = joints or {}
    frames = []
    for t, row in enumerate(cam.values):
        rec = {"t": t, "scores": [float(s) for s in row]}
        if t in joints:
            rec["activated"] = list(joints[t])
        frames.append(rec)
    return {
        "format": CAM_FORMAT,
        "class_id": cam.class_id,
        "class_name": class_name,
        "frame_scale": cam.frame_scale,
        "num_frames": cam.num_frames,
        "num_joints": int(cam.values.shape[1]),
        "quantile": quantile,
        "frames": frames,
        "edges": [[int(p), int(c)] for p, c in edges],
    }


def export_cam(cam: ActivationMap, joints, path, edges=(), quantile=None, class_name=None):
    """Write the map, activated sets and 0-based edge list as JSON (floats in repr form)."""
    doc = cam_document(cam, joints, edges, quantile, class_name)
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")
    return doc


def import_cam(path):
    """``(ActivationMap, {frame: joints}, document)`` from an exported file."""
    import jsonschema

    doc = json.loads(Path(path).read_text())
    try:
        jsonschema.validate(doc, cam_schema())
    except jsonschema.ValidationError as exc:
        raise ParseError(f"{path}: {exc.message}") from None
    rows = [f["scores"] for f in doc["frames"]]
    if len(rows) != doc["num_frames"] or any(len(r) != doc["num_joints"] for r in rows):
        raise ParseError(f"{path}: score table disagrees with num_frames/num_joints")
    values = np.array(rows, dtype=np.float64).reshape(doc["num_frames"], doc["num_joints"])
    joints = {f["t"]: f["activated"] for f in doc["frames"] if "activated" in f}
    return ActivationMap(values, doc["class_id"], doc["frame_scale"]), joints, doc
