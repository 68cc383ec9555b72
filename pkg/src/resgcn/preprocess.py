"""Joint / velocity / bone input branches, 6 channels each."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import SkeletonGraph
from .errors import ParseError
from .skeleton import (
    DEFAULT_FRAMES,
    DatasetManifest,
    SkeletonSequence,
    build_ntu_manifest,
    load_sequence,
    pad_or_crop,
    read_ntu_skeleton,
    read_array_record,
    write_array_record,
)

BRANCH_KINDS = ("joint", "velocity", "bone")
_TAGS = {"joint": b"JOIN", "velocity": b"VELO", "bone": b"BONE"}


@dataclass
class BranchInput:
    kind: str
    features: np.ndarray  # [6, T, V, M]


def _coords(x):
    return x.coords if isinstance(x, SkeletonSequence) else np.asarray(x, dtype=np.float64)


def joint_branch(x, g: SkeletonGraph) -> BranchInput:
    """Absolute positions followed by positions relative to the center joint."""
    c = _coords(x)
    rel = c - c[:, :, g.center_joint : g.center_joint + 1]
    return BranchInput("joint", np.concatenate([c, rel], axis=0))


def velocity_branch(x) -> BranchInput:
    """Two-step then one-step frame differences; undefined tail frames are zero."""
    c = _coords(x)
    two = np.zeros_like(c)
    one = np.zeros_like(c)
    two[:, :-2] = c[:, 2:] - c[:, :-2]
    one[:, :-1] = c[:, 1:] - c[:, :-1]
    return BranchInput("velocity", np.concatenate([two, one], axis=0))


def bone_vectors(c, g: SkeletonGraph):
    parents = g.parents
    bones = np.zeros_like(c)
    child = np.flatnonzero(parents >= 0)
    bones[:, :, child] = c[:, :, child] - c[:, :, parents[child]]
    return bones


def bone_angles(bones):
    """Angle between each bone and the x, y, z axes; zero-length bones give 0.

    Evaluated as ``atan2(|l_perp|, l_w)``, which equals ``arccos(l_w / |l|)`` but
    stays accurate for nearly axis-aligned bones.
    """
    sq = bones**2
    perp = np.stack([np.sqrt(sq[1] + sq[2]), np.sqrt(sq[0] + sq[2]), np.sqrt(sq[0] + sq[1])])
    ang = np.arctan2(perp, bones)
    return np.where(sq.sum(axis=0) > 0, ang, 0.0)


def bone_branch(x, g: SkeletonGraph) -> BranchInput:
    c = _coords(x)
    bones = bone_vectors(c, g)
    return BranchInput("bone", np.concatenate([bones, bone_angles(bones)], axis=0))


def build_branches(x, g: SkeletonGraph):
    return joint_branch(x, g), velocity_branch(x), bone_branch(x, g)


def stack_branches(branches) -> np.ndarray:
    """[3, 6, T, V, M] array in (joint, velocity, bone) order."""
    return np.stack([b.features for b in branches])


def save_branches(branches, path, valid_frames, label):
    """Three tagged records: 4-byte kind tag, then a 6-channel SKL1 record."""
    with open(path, "wb") as fh:
        for b in branches:
            fh.write(_TAGS[b.kind])
            write_array_record(fh, b.features, valid_frames, label)


def load_branches(path):
    out = []
    valid = label = None
    inv = {v: k for k, v in _TAGS.items()}
    with open(path, "rb") as fh:
        for _ in BRANCH_KINDS:
            tag = fh.read(4)
            if tag not in inv:
                raise ParseError(f"{path}: unknown branch tag {tag!r}")
            feats, valid, label = read_array_record(fh, 6)
            out.append(BranchInput(inv[tag], feats))
    return tuple(out), valid, label


def preprocess_dataset(src_dir, out_dir, graph: SkeletonGraph):
    """Turn a raw SKL1 dataset directory into branch files plus a manifest."""
    src, out = Path(src_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = DatasetManifest.load(src / "manifest.json")
    entries = []
    for e in manifest.entries:
        seq = load_sequence(src / e["path"])
        name = Path(e["path"]).stem + ".br"
        save_branches(build_branches(seq, graph), out / name, seq.valid_frames, seq.label)
        entries.append(dict(e, path=name))
    manifest.entries = entries
    manifest.preprocessed = True
    manifest.save(out / "manifest.json")
    return manifest


def preprocess_ntu(src_dir, out_dir, graph: SkeletonGraph, benchmark="xsub", num_classes=60,
                   frames=DEFAULT_FRAMES, exclude=None):
    """Parse raw ``.skeleton`` files, fix their length and write branch files plus a manifest."""
    src, out = Path(src_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = build_ntu_manifest(src, benchmark, num_classes, exclude)
    entries = []
    for e in manifest.entries:
        seq = pad_or_crop(read_ntu_skeleton(src / e["path"]), frames)
        name = Path(e["path"]).stem + ".br"
        save_branches(build_branches(seq, graph), out / name, seq.valid_frames, e["label"])
        entries.append(dict(e, path=name))
    manifest.entries = entries
    manifest.preprocessed = True
    manifest.extra["frames"] = frames
    manifest.save(out / "manifest.json")
    return manifest
