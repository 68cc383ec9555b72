"""SGD/Nesterov training with warmup + step decay, cross-entropy, evaluation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import DimensionError, SpecError, UsageError
from .graph import SkeletonGraph
from .model import BRANCH_NAMES
from .preprocess import build_branches, load_branches, stack_branches
from .skeleton import DatasetManifest, load_sequence

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    base_lr: float = 0.1
    decay_epochs: tuple = (20, 50)
    decay_factor: float = 10.0
    warmup_epochs: int = 10
    max_epochs: int = 70
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        self.decay_epochs = tuple(sorted(self.decay_epochs))
        if self.base_lr <= 0 or self.decay_factor < 1:
            raise SpecError("base_lr must be positive and decay_factor >= 1")
        if self.warmup_epochs < 0 or (self.decay_epochs and self.warmup_epochs >= self.decay_epochs[0]):
            raise SpecError("warmup must end before the first decay epoch")
        if self.batch_size < 2:
            raise SpecError("batch_size must be >= 2 for batch statistics")

    def to_json(self):
        doc = asdict(self)
        doc["decay_epochs"] = list(self.decay_epochs)
        return doc


def lr_at_epoch(epoch, cfg: TrainConfig):
    """Linear warmup ``base*(e+1)/warmup``, then divide by ``decay_factor`` per passed decay epoch."""
    if not 0 <= epoch < cfg.max_epochs:
        raise UsageError(f"epoch {epoch} outside [0, {cfg.max_epochs})")
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * (epoch + 1) / cfg.warmup_epochs
    passed = sum(1 for d in cfg.decay_epochs if epoch >= d)
    return cfg.base_lr / cfg.decay_factor**passed


def cross_entropy(logits, labels):
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels, dtype=int)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"{labels.shape[0] if labels.ndim else 0} labels for {n} rows")
    if (labels < 0).any() or (labels >= k).any():
        raise UsageError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (g * p / n,)

    return T._result("cross_entropy", np.array(loss), (logits,), bw)


class SGD:
    """Nesterov SGD; weight decay only on parameters flagged ``decay``."""

    def __init__(self, params, momentum=0.9, weight_decay=1e-4):
        self.params = [p for p in params if p.trainable]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr):
        sgd_nesterov_step(self.params, self.velocity, lr, self.momentum, self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


def sgd_nesterov_step(params, velocity, lr, momentum=0.9, weight_decay=1e-4):
    for p, v in zip(params, velocity):
        if v.shape != p.data.shape or p.grad.shape != p.data.shape:
            raise DimensionError(f"state {v.shape} / grad {p.grad.shape} vs parameter {p.data.shape}")
        g = p.grad + weight_decay * p.data if getattr(p, "decay", True) else p.grad.copy()
        v *= momentum
        v += g
        p.data -= lr * (g + momentum * v)


# --- data -----------------------------------------------------------------------

@dataclass
class ArrayDataset:
    x: np.ndarray  # [N, B, 6, T, V, M]
    y: np.ndarray
    names: list = field(default_factory=list)

    def __len__(self):
        return len(self.y)


def load_arrays(root, entries, graph: SkeletonGraph, preprocessed):
    xs, ys, names = [], [], []
    for e in entries:
        path = Path(root) / e["path"]
        if preprocessed:
            branches, _, _ = load_branches(path)
        else:
            branches = build_branches(load_sequence(path), graph)
        xs.append(stack_branches(branches))
        ys.append(e["label"])
        names.append(Path(e["path"]).stem)
    if not xs:
        raise UsageError(f"no sequences in split under {root}")
    return ArrayDataset(np.stack(xs), np.asarray(ys, dtype=int), names)


def load_dataset(root, graph: SkeletonGraph):
    """``(manifest, train, held_out)``; raw SKL1 datasets are preprocessed on the fly."""
    manifest = DatasetManifest.load(Path(root) / "manifest.json")
    train_entries, eval_entries = manifest.split()
    if not train_entries or not eval_entries:
        raise UsageError("split rule leaves an empty train or evaluation partition")
    train = load_arrays(root, train_entries, graph, manifest.preprocessed)
    held = load_arrays(root, eval_entries, graph, manifest.preprocessed)
    return manifest, train, held


def select_branches(x, model):
    idx = [BRANCH_NAMES.index(b) for b in model.spec.branches]
    return x if len(idx) == x.shape[1] else x[:, idx]


# --- loops ------------------------------------------------------------------------

def train_step(model, opt, xb, yb, lr):
    opt.zero_grad()
    with T.Tape() as tape:
        logits = model(xb)
        loss = cross_entropy(logits, yb)
        T.backward(loss, tape)
    opt.step(lr)
    return loss.item(), logits.data.argmax(axis=1)


def train(model, data: ArrayDataset, cfg: TrainConfig, held_out: ArrayDataset | None = None,
          on_epoch=None):
    """Run ``cfg.max_epochs`` epochs; returns one log dict per epoch."""
    if len(data) == 0:
        raise UsageError("empty training split")
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.parameters(), cfg.momentum, cfg.weight_decay)
    x_all = select_branches(data.x, model)
    history = []
    for epoch in range(cfg.max_epochs):
        lr = lr_at_epoch(epoch, cfg)
        model.train()
        order = rng.permutation(len(data))
        losses, correct, seen = [], 0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            loss, pred = train_step(model, opt, x_all[idx], data.y[idx], lr)
            losses.append(loss * len(idx))
            correct += int((pred == data.y[idx]).sum())
            seen += len(idx)
        entry = {
            "epoch": epoch,
            "lr": lr,
            "loss": float(np.sum(losses) / seen),
            "train_acc": correct / seen,
        }
        if held_out is not None:
            entry["eval_acc"] = evaluate(model, held_out)["accuracy"]
        history.append(entry)
        log.info("epoch %d lr %.4g loss %.4f acc %.3f", epoch, lr, entry["loss"], entry["train_acc"])
        if on_epoch is not None:
            on_epoch(entry)
    return history


def predict_logits(model, x, batch_size=32):
    model.eval()
    x = select_branches(x, model)
    out = [model(x[i : i + batch_size]).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out)


def evaluate(model, data: ArrayDataset, batch_size=32):
    """Top-1 accuracy, per-class accuracy and the confusion matrix (rows = truth)."""
    if len(data) == 0:
        raise UsageError("empty evaluation split")
    k = model.spec.num_classes
    pred = predict_logits(model, data.x, batch_size).argmax(axis=1)
    conf = np.zeros((k, k), dtype=int)
    np.add.at(conf, (data.y, pred), 1)
    totals = conf.sum(axis=1)
    per_class = [float(conf[i, i] / totals[i]) if totals[i] else None for i in range(k)]
    return {
        "accuracy": float(np.trace(conf) / conf.sum()),
        "per_class": per_class,
        "confusion": conf.tolist(),
    }
