"""Skeleton recordings: NTU text parsing, fixed-length padding, binary files,
dataset manifests and a synthetic motion generator."""
from __future__ import annotations

import hashlib
import io
import json
import re
import struct
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ParseError, SpecError, UsageError

NUM_JOINTS = 25
MAX_BODIES = 2
DEFAULT_FRAMES = 300
SKL_MAGIC = b"SKL1"
_HEADER = struct.Struct("<4s5i")

# NTU training-side ids per benchmark
NTU60_XSUB_TRAIN = [1, 2, 4, 5, 8, 9, 13, 14, 15, 16, 17, 18, 19, 25, 27, 28, 31, 34, 35, 38]
NTU60_XVIEW_TRAIN = [2, 3]
NTU120_XSUB_TRAIN = NTU60_XSUB_TRAIN + [
    45, 46, 47, 49, 50, 52, 53, 54, 55, 56, 57, 58, 59, 70, 74, 78, 80, 81, 82, 83,
    84, 85, 86, 89, 91, 92, 93, 94, 95, 97, 98, 100, 103,
]
NTU120_XSET_TRAIN = list(range(2, 33, 2))

SPLIT_KEYS = {"cross-subject": "subject", "cross-view": "camera", "cross-setup": "setup"}


@dataclass
class SkeletonSequence:
    coords: np.ndarray  # [3, T, V, M], meters
    valid_frames: int
    label: int | None = None
    name: str = ""

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 4 or self.coords.shape[0] != 3:
            raise SpecError(f"coords must be [3, T, V, M], got {self.coords.shape}")
        if not 0 <= self.valid_frames <= self.coords.shape[1]:
            raise SpecError(f"valid_frames {self.valid_frames} outside [0, {self.coords.shape[1]}]")

    @property
    def num_frames(self):
        return self.coords.shape[1]

    @property
    def num_joints(self):
        return self.coords.shape[2]

    @property
    def num_bodies(self):
        return self.coords.shape[3]

    def body_present(self):
        """Bodies whose block is not all zero."""
        return np.abs(self.coords).reshape(-1, self.num_bodies).max(axis=0) > 0


# --- NTU text format -----------------------------------------------------------

class _Lines:
    def __init__(self, text):
        if not isinstance(text, str):
            text = text.read()
        self.lines = text.splitlines()
        self.pos = 0

    def next(self, what):
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            self.pos += 1
            if line:
                return line, self.pos
        raise ParseError(f"unexpected end of stream, expected {what}", line=self.pos + 1)

    def ints(self, what):
        line, no = self.next(what)
        try:
            return int(line.split()[0]), no
        except ValueError:
            raise ParseError(f"expected integer {what}, got {line!r}", line=no) from None


def parse_ntu_skeleton(text, max_bodies=MAX_BODIES, name="") -> SkeletonSequence:
    """Parse an NTU ``.skeleton`` document (string or text stream)."""
    src = _Lines(text)
    num_frames, _ = src.ints("frame count")
    if num_frames < 0:
        raise ParseError("negative frame count", line=1)
    tracks: dict[str, np.ndarray] = {}
    order: list[str] = []
    for t in range(num_frames):
        nb, _ = src.ints("body count")
        for _ in range(nb):
            meta, no = src.next("body metadata")
            fields = meta.split()
            if len(fields) != 10:
                raise ParseError(f"body metadata needs 10 fields, got {len(fields)}", line=no)
            body_id = fields[0]
            nj, no = src.ints("joint count")
            if nj != NUM_JOINTS:
                raise ParseError(f"joint count must be {NUM_JOINTS}, got {nj}", line=no)
            if body_id not in tracks:
                tracks[body_id] = np.zeros((num_frames, NUM_JOINTS, 3))
                order.append(body_id)
            for j in range(NUM_JOINTS):
                line, no = src.next("joint line")
                parts = line.split()
                if len(parts) != 12:
                    raise ParseError(f"joint line needs 12 fields, got {len(parts)}", line=no)
                try:
                    vals = [float(p) for p in parts]
                except ValueError:
                    raise ParseError(f"non-numeric field in {line!r}", line=no) from None
                tracks[body_id][t, j] = vals[:3]
    kept = select_bodies(tracks, order, max_bodies)
    coords = np.zeros((3, num_frames, NUM_JOINTS, max_bodies))
    for m, bid in enumerate(kept):
        coords[..., m] = tracks[bid].transpose(2, 0, 1)
    return SkeletonSequence(coords, valid_frames=num_frames, name=name)


def motion_energy(track):
    """Sum of squared frame-to-frame joint displacement over frames where the body is tracked."""
    present = np.abs(track).reshape(track.shape[0], -1).max(axis=1) > 0
    both = present[1:] & present[:-1]
    diff = track[1:] - track[:-1]
    return float((diff[both] ** 2).sum())


def select_bodies(tracks, order, max_bodies=MAX_BODIES):
    """Keep the ``max_bodies`` most active bodies, ties broken by body id; keep appearance order."""
    if len(order) <= max_bodies:
        return list(order)
    ranked = sorted(order, key=lambda b: (-motion_energy(tracks[b]), b))
    chosen = set(ranked[:max_bodies])
    return [b for b in order if b in chosen]


def serialize_ntu_skeleton(seq: SkeletonSequence) -> str:
    """Write the NTU text layout; absent bodies are omitted, unused tracking fields are zero."""
    out = io.StringIO()
    present = seq.body_present()
    out.write(f"{seq.valid_frames}\n")
    for t in range(seq.valid_frames):
        bodies = [m for m in range(seq.num_bodies) if present[m]]
        out.write(f"{len(bodies)}\n")
        for m in bodies:
            out.write(f"{m + 1} 0 0 0 0 0 0 0 0 2\n{seq.num_joints}\n")
            for j in range(seq.num_joints):
                x, y, z = (repr(float(c)) for c in seq.coords[:, t, j, m])
                out.write(f"{x} {y} {z} 0 0 0 0 0 0 0 0 2\n")
    return out.getvalue()


def read_ntu_skeleton(path, max_bodies=MAX_BODIES) -> SkeletonSequence:
    path = Path(path)
    seq = parse_ntu_skeleton(path.read_text(), max_bodies=max_bodies, name=path.stem)
    info = parse_ntu_name(path.stem)
    if info:
        seq.label = info["action"] - 1
    return seq


_NTU_NAME = re.compile(r"S(\d{3})C(\d{3})P(\d{3})R(\d{3})A(\d{3})")


def parse_ntu_name(stem):
    m = _NTU_NAME.search(stem)
    if not m:
        return None
    keys = ("setup", "camera", "subject", "replication", "action")
    return dict(zip(keys, map(int, m.groups())))


# --- fixed length ------------------------------------------------------------

def pad_or_crop(seq: SkeletonSequence, target_frames=DEFAULT_FRAMES) -> SkeletonSequence:
    """Zero-pad at the end or truncate at the end to exactly ``target_frames``."""
    if target_frames < 1:
        raise UsageError("target_frames must be >= 1")
    t = seq.num_frames
    if t == target_frames:
        coords = seq.coords.copy()
    elif t > target_frames:
        coords = seq.coords[:, :target_frames].copy()
    else:
        coords = np.zeros(seq.coords.shape[:1] + (target_frames,) + seq.coords.shape[2:])
        coords[:, :t] = seq.coords
    coords[:, min(seq.valid_frames, target_frames):] = 0.0
    return replace(seq, coords=coords, valid_frames=min(seq.valid_frames, target_frames))


# --- binary container ------------------------------------------------------------

def write_array_record(fh, arr, valid_frames, label, magic=SKL_MAGIC):
    """One record: magic, T, V, M, valid_frames, label (int32 LE), then float64 LE payload."""
    c, t, v, m = arr.shape
    fh.write(_HEADER.pack(magic, t, v, m, valid_frames, -1 if label is None else label))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_array_record(fh, channels):
    head = fh.read(_HEADER.size)
    if len(head) != _HEADER.size:
        raise ParseError("truncated record header")
    magic, t, v, m, valid, label = _HEADER.unpack(head)
    if magic != SKL_MAGIC:
        raise ParseError(f"bad magic {magic!r}")
    n = channels * t * v * m
    buf = fh.read(8 * n)
    if len(buf) != 8 * n:
        raise ParseError("truncated record payload")
    arr = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(channels, t, v, m)
    return arr, valid, (None if label < 0 else label)


def save_sequence(seq: SkeletonSequence, path):
    with open(path, "wb") as fh:
        write_array_record(fh, seq.coords, seq.valid_frames, seq.label)


def load_sequence(path) -> SkeletonSequence:
    with open(path, "rb") as fh:
        coords, valid, label = read_array_record(fh, 3)
    return SkeletonSequence(coords, valid, label, name=Path(path).stem)


# --- manifests ------------------------------------------------------------------

@dataclass
class DatasetManifest:
    entries: list  # dicts: path, label, subject, camera, setup
    split_rule: dict  # {"kind": cross-subject|cross-view|cross-setup, "train_ids": [...]}
    num_classes: int
    preprocessed: bool = False
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        kind = self.split_rule.get("kind")
        if kind not in SPLIT_KEYS:
            raise SpecError(f"unknown split kind {kind!r}")
        for e in self.entries:
            if not 0 <= e["label"] < self.num_classes:
                raise SpecError(f"label {e['label']} outside [0, {self.num_classes})")

    def is_train(self, entry):
        return entry[SPLIT_KEYS[self.split_rule["kind"]]] in set(self.split_rule["train_ids"])

    def split(self):
        train = [e for e in self.entries if self.is_train(e)]
        held = [e for e in self.entries if not self.is_train(e)]
        return train, held

    def to_json(self):
        doc = {
            "num_classes": self.num_classes,
            "split_rule": self.split_rule,
            "preprocessed": self.preprocessed,
            "entries": self.entries,
        }
        doc.update(self.extra)
        return doc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        extra = {k: v for k, v in doc.items() if k not in ("num_classes", "split_rule", "preprocessed", "entries")}
        return cls(doc["entries"], doc["split_rule"], doc["num_classes"], doc.get("preprocessed", False), extra)


def load_exclusions(path=None):
    """Sample names to skip; lines starting with '#' are comments."""
    if path is None:
        text = resources.files("resgcn").joinpath("data", "ntu_excluded_samples.txt").read_text()
    else:
        text = Path(path).read_text()
    return {ln.strip() for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")}


def build_ntu_manifest(root, benchmark="xsub", num_classes=60, exclude=None):
    """Index NTU ``.skeleton`` files under ``root`` for one benchmark."""
    rules = {
        "xsub": ("cross-subject", NTU60_XSUB_TRAIN),
        "xview": ("cross-view", NTU60_XVIEW_TRAIN),
        "xsub120": ("cross-subject", NTU120_XSUB_TRAIN),
        "xset120": ("cross-setup", NTU120_XSET_TRAIN),
    }
    if benchmark not in rules:
        raise UsageError(f"unknown benchmark {benchmark!r}; choose from {sorted(rules)}")
    kind, train_ids = rules[benchmark]
    skip = load_exclusions(exclude) if exclude is not False else set()
    entries = []
    for p in sorted(Path(root).glob("*.skeleton")):
        info = parse_ntu_name(p.stem)
        if info is None or p.stem in skip or info["action"] > num_classes:
            continue
        entries.append({
            "path": p.name,
            "label": info["action"] - 1,
            "subject": info["subject"],
            "camera": info["camera"],
            "setup": info["setup"],
        })
    return DatasetManifest(entries, {"kind": kind, "train_ids": train_ids}, num_classes)


# --- synthetic data ------------------------------------------------------------------

# rest pose, 1-based NTU joint order, meters (x right-to-left, y up, z depth)
REST_POSE = np.array([
    [0.00, 0.00, 3.00], [0.00, 0.25, 3.00], [0.00, 0.60, 3.00], [0.00, 0.75, 3.00],
    [0.18, 0.50, 3.00], [0.20, 0.25, 3.00], [0.22, 0.02, 3.00], [0.23, -0.05, 3.00],
    [-0.18, 0.50, 3.00], [-0.20, 0.25, 3.00], [-0.22, 0.02, 3.00], [-0.23, -0.05, 3.00],
    [0.10, -0.05, 3.00], [0.10, -0.45, 3.00], [0.10, -0.85, 3.00], [0.10, -0.90, 2.90],
    [-0.10, -0.05, 3.00], [-0.10, -0.45, 3.00], [-0.10, -0.85, 3.00], [-0.10, -0.90, 2.90],
    [0.00, 0.50, 3.00], [0.24, -0.12, 3.00], [0.20, -0.08, 2.97],
    [-0.24, -0.12, 3.00], [-0.20, -0.08, 2.97],
])

# moving joints per limb (0-based), the limb's attachment joint excluded
LIMB_JOINTS = [
    [5, 6, 7, 21, 22],      # left arm
    [9, 10, 11, 23, 24],    # right arm
    [13, 14, 15],           # left leg
    [17, 18, 19],           # right leg
]
_DIRECTIONS = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
SYNTH_NOISE = 0.005
SYNTH_SUBJECTS = 5


@dataclass(frozen=True)
class ClassMotion:
    limb: int
    cycles: int  # full oscillations over the sequence
    amplitude: float  # meters
    direction: tuple

    def moving_joints(self):
        return LIMB_JOINTS[self.limb]


def class_motion(k) -> ClassMotion:
    """Deterministic motion parameters of synthetic class ``k``."""
    return ClassMotion(
        limb=k % 4,
        cycles=1 + (k // 4) % 3,
        amplitude=0.10 + 0.04 * k,
        direction=tuple(_DIRECTIONS[(k // 12) % 3]),
    )


def render_motion(k, frames, rng):
    """One [3, T, 25, 1] sample of class ``k``."""
    mo = class_motion(k)
    t = np.arange(frames)
    phase = rng.uniform(0, 2 * np.pi)
    wave = mo.amplitude * np.sin(2 * np.pi * mo.cycles * t / frames + phase)
    pose = np.repeat(REST_POSE[None], frames, axis=0)  # [T, V, 3]
    pose = pose + rng.uniform(-0.3, 0.3, size=3)
    pose[:, mo.moving_joints()] += wave[:, None, None] * np.asarray(mo.direction)
    pose += rng.normal(0.0, SYNTH_NOISE, size=pose.shape)
    return pose.transpose(2, 0, 1)[..., None]


def synth_dataset(num_classes, per_class, frames, seed):
    """Return ``(manifest, sequences)``; entry ``i`` describes ``sequences[i]``."""
    if num_classes < 2:
        raise UsageError("num_classes must be >= 2")
    if per_class < 1 or frames < 3:
        raise UsageError("per_class must be >= 1 and frames >= 3")
    rng = np.random.default_rng(seed)
    entries, seqs = [], []
    i = 0
    for k in range(num_classes):
        for j in range(per_class):
            name = f"synth_{i:05d}"
            seqs.append(SkeletonSequence(render_motion(k, frames, rng), frames, k, name=name))
            entries.append({
                "path": f"{name}.skl",
                "label": k,
                "subject": j % SYNTH_SUBJECTS + 1,
                "camera": 1,
                "setup": 1,
            })
            i += 1
    split = {"kind": "cross-subject", "train_ids": list(range(1, SYNTH_SUBJECTS))}
    manifest = DatasetManifest(entries, split, num_classes, extra={"frames": frames, "seed": seed})
    return manifest, seqs


def write_dataset(manifest, seqs, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for e, s in zip(manifest.entries, seqs):
        save_sequence(s, out / e["path"])
    manifest.save(out / "manifest.json")
    return dataset_hash(out)


def dataset_hash(root):
    """SHA-256 over the manifest and every file it lists, in manifest order."""
    root = Path(root)
    h = hashlib.sha256()
    h.update((root / "manifest.json").read_bytes())
    for e in DatasetManifest.load(root / "manifest.json").entries:
        h.update((root / e["path"]).read_bytes())
    return h.hexdigest()
