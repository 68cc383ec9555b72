"""``resgcn`` command line: synth | preprocess | train | eval | count-params | cam | bench.

Every subcommand merges its settings as flags > ``--config`` JSON file >
defaults, validates the result against the shipped config schema and writes
machine-readable JSON lines whose first record echoes the effective config.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ResGCNError, SpecError

SEED_ENV = "RESGCN_SEED"
BUILTIN_GRAPH = "builtin:ntu25"


class CliUsage(Exception):
    """Bad or missing settings; reported with the subcommand's usage line."""


# --- argument helpers ------------------------------------------------------------

def _int_list(text):
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _name_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _class_id(text):
    return None if text in ("", "pred", "predicted") else int(text)


def _add(p, flag, help, **kw):
    p.add_argument(flag, help=help, **kw)


def _model_flags(p):
    _add(p, "--structure", "structure string such as [B1,N2,N3,N3] (B = basic, N = bottleneck)")
    _add(p, "--block", "basic forces basic blocks in every part; bottleneck keeps the structure string",
         choices=["basic", "bottleneck"])
    _add(p, "--residual", "residual links", choices=["none", "block", "module", "dense"])
    _add(p, "--r", "bottleneck reduction rate", type=int)
    _add(p, "--attention", "part-wise attention after every mainstream module", choices=["on", "off"])
    _add(p, "--attention-r", "reduction rate inside the part-wise attention", type=int, dest="attention_r")
    _add(p, "--widths", "channel plan w0,w1,w2,w3 (input part 1, input part 2, mainstream parts)",
         type=_int_list)
    _add(p, "--branches", "input branches to use, comma separated from joint,velocity,bone",
         type=_name_list)


MODEL_DEFAULTS = {
    "structure": "[B1,N2,N3,N3]",
    "block": None,
    "residual": "block",
    "r": 4,
    "attention": "on",
    "attention_r": 4,
    "widths": [64, 32, 128, 256],
    "branches": ["joint", "velocity", "bone"],
}


def _common_flags(p, with_seed=True):
    _add(p, "--config", "JSON config file; explicit flags override its values", dest="config_file")
    if with_seed:
        _add(p, "--seed", f"global seed (falls back to ${SEED_ENV}, then 0)", type=int)


# --- subcommand table ------------------------------------------------------------

def _p_synth(p):
    _common_flags(p)
    _add(p, "--out", "output dataset directory")
    _add(p, "--classes", "number of motion classes", type=int)
    _add(p, "--per-class", "sequences per class", type=int, dest="per_class")
    _add(p, "--frames", "frames per sequence", type=int)


def _p_preprocess(p):
    _common_flags(p, with_seed=False)
    _add(p, "--input", "SKL1 dataset directory (with manifest.json) or a folder of NTU .skeleton files")
    _add(p, "--out", "output directory for branch files and manifest")
    _add(p, "--graph", "graph definition JSON (default: bundled NTU-25 layout)")
    _add(p, "--benchmark", "NTU split rule for raw .skeleton input",
         choices=["xsub", "xview", "xsub120", "xset120"])
    _add(p, "--classes", "NTU action classes to keep for raw input", type=int)
    _add(p, "--frames", "fixed sequence length for raw input", type=int)


def _p_train(p):
    _common_flags(p)
    _add(p, "--data", "dataset directory with manifest.json (raw SKL1 or preprocessed)")
    _add(p, "--out", "checkpoint path; the JSON sidecar is written next to it")
    _add(p, "--log", "JSON-lines log file (default: standard output)")
    _add(p, "--graph", "graph definition JSON (default: bundled NTU-25 layout)")
    _model_flags(p)
    _add(p, "--epochs", "number of epochs", type=int)
    _add(p, "--lr", "base learning rate", type=float)
    _add(p, "--warmup", "linear warmup epochs", type=int)
    _add(p, "--decay-epochs", "epochs where the learning rate is divided, comma separated",
         type=_int_list, dest="decay_epochs")
    _add(p, "--decay-factor", "divisor applied at each decay epoch", type=float, dest="decay_factor")
    _add(p, "--momentum", "Nesterov momentum", type=float)
    _add(p, "--weight-decay", "L2 weight decay (not applied to BatchNorm or biases)",
         type=float, dest="weight_decay")
    _add(p, "--batch-size", "mini-batch size", type=int, dest="batch_size")


def _p_eval(p):
    _common_flags(p, with_seed=False)
    _add(p, "--checkpoint", "RGCN1 checkpoint written by train")
    _add(p, "--data", "dataset directory with manifest.json")
    _add(p, "--split", "partition to evaluate", choices=["held-out", "train", "all"])
    _add(p, "--batch-size", "evaluation batch size", type=int, dest="batch_size")
    _add(p, "--out", "also write the report to this JSON file")


def _p_count(p):
    _common_flags(p)
    _model_flags(p)
    _add(p, "--classes", "number of output classes", type=int)


def _p_cam(p):
    _common_flags(p, with_seed=False)
    _add(p, "--checkpoint", "RGCN1 checkpoint written by train")
    _add(p, "--input", "one sequence: a .br branch file or an .skl SKL1 file")
    _add(p, "--class", "class id to explain (default: predicted class)", type=_class_id, dest="class_id")
    _add(p, "--frames", "frame indices (after temporal striding) to list activated joints for",
         type=_int_list, dest="cam_frames")
    _add(p, "--quantile", "activation threshold quantile over the whole map", type=float)
    _add(p, "--out", "output CAM JSON path")


def _p_bench(p):
    _common_flags(p)
    _add(p, "--checkpoint", "benchmark a trained checkpoint instead of a freshly built model")
    _model_flags(p)
    _add(p, "--classes", "number of output classes", type=int)
    _add(p, "--frames", "input frames per sequence", type=int)
    _add(p, "--batch-size", "sequences per forward pass", type=int, dest="batch_size")
    _add(p, "--repeats", "timed forward passes", type=int)


SUBCOMMANDS = {
    "synth": (_p_synth, "write a seeded synthetic skeleton dataset",
              {"out": None, "classes": 4, "per_class": 50, "frames": 64}, ["out"]),
    "preprocess": (_p_preprocess, "build joint/velocity/bone branch files",
                   {"input": None, "out": None, "graph": None, "benchmark": "xsub",
                    "classes": 60, "frames": 300}, ["input", "out"]),
    "train": (_p_train, "train a model and write a checkpoint",
              {**MODEL_DEFAULTS, "data": None, "out": None, "log": None, "graph": None,
               "epochs": 70, "lr": 0.1, "warmup": 10, "decay_epochs": [20, 50],
               "decay_factor": 10.0, "momentum": 0.9, "weight_decay": 1e-4, "batch_size": 16},
              ["data", "out"]),
    "eval": (_p_eval, "evaluate a checkpoint on a dataset split",
             {"checkpoint": None, "data": None, "split": "held-out", "batch_size": 32, "out": None},
             ["checkpoint", "data"]),
    "count-params": (_p_count, "print trainable parameter counts",
                     {**MODEL_DEFAULTS, "attention": "off", "classes": 60}, []),
    "cam": (_p_cam, "class activation map of one sequence",
            {"checkpoint": None, "input": None, "class_id": None, "cam_frames": None,
             "quantile": 0.8, "out": None}, ["checkpoint", "input", "out"]),
    "bench": (_p_bench, "inference throughput in sequences per second",
              {**MODEL_DEFAULTS, "checkpoint": None, "classes": 60, "frames": 300,
               "batch_size": 4, "repeats": 2}, []),
}
SEEDED = {"synth", "train", "count-params", "bench"}


def build_parser():
    parser = argparse.ArgumentParser(prog="resgcn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)
    for name, (adder, help_text, _, _) in SUBCOMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text,
                           argument_default=argparse.SUPPRESS)
        adder(p)
    return parser


def config_schema():
    return json.loads(resources.files("resgcn").joinpath("data", "config_schema.json").read_text())


def effective_config(command, flags, env=None):
    """Merge defaults, the optional config file and explicit flags for ``command``."""
    env = os.environ if env is None else env
    defaults, required = SUBCOMMANDS[command][2], SUBCOMMANDS[command][3]
    cfg = dict(defaults)
    if command in SEEDED:
        cfg["seed"] = 0
        if env.get(SEED_ENV):
            try:
                cfg["seed"] = int(env[SEED_ENV])
            except ValueError:
                raise CliUsage(f"${SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    flags = dict(flags)
    path = flags.pop("config_file", None)
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliUsage(f"cannot read config {path}: {exc}") from None
        _validate(doc, f"config {path}")
        cfg.update({k: v for k, v in doc.items() if k in cfg})
    cfg.update(flags)
    _validate({k: v for k, v in cfg.items() if v is not None}, "effective config")
    missing = [k for k in required if cfg.get(k) is None]
    if missing:
        raise CliUsage("missing required setting(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))
    return cfg


def _validate(doc, what):
    try:
        jsonschema.validate(doc, config_schema())
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "(root)"
        raise CliUsage(f"{what}: {where}: {exc.message}") from None


# --- shared plumbing ---------------------------------------------------------------

class JsonLines:
    def __init__(self, path=None, stream=None):
        self.path = path
        self.stream = stream or sys.stdout
        self._fh = None

    def __enter__(self):
        if self.path is not None:
            Path(self.path).parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "w")
        return self

    def __exit__(self, *exc):
        if self._fh is not None:
            self._fh.close()

    def emit(self, record):
        line = json.dumps(record, sort_keys=True) + "\n"
        (self._fh or self.stream).write(line)
        (self._fh or self.stream).flush()


def _graph(cfg):
    from .graph import load_graph

    return load_graph(cfg.get("graph"))


def _model_spec(cfg, num_classes):
    from .model import ModelSpec

    spec = ModelSpec(
        structure=cfg["structure"],
        num_classes=num_classes,
        channels=tuple(cfg["widths"]),
        with_part_attention=cfg["attention"] == "on",
        residual=cfg["residual"],
        reduction=cfg["r"],
        attention_reduction=cfg["attention_r"],
        branches=tuple(cfg["branches"]),
        seed=cfg.get("seed", 0),
    )
    return spec.with_blocks(cfg["block"] or "bottleneck")


def _require_dir(path, what):
    if not Path(path).is_dir():
        raise CliUsage(f"{what} {path} is not a directory")


def _require_file(path, what):
    if not Path(path).is_file():
        raise CliUsage(f"{what} {path} does not exist")


# --- handlers ---------------------------------------------------------------------

def cmd_synth(cfg, out):
    from .skeleton import synth_dataset, write_dataset

    manifest, seqs = synth_dataset(cfg["classes"], cfg["per_class"], cfg["frames"], cfg["seed"])
    digest = write_dataset(manifest, seqs, cfg["out"])
    train, held = manifest.split()
    out.emit({"event": "synth", "config": cfg, "sequences": len(seqs), "train": len(train),
              "held_out": len(held), "hash": digest})


def cmd_preprocess(cfg, out):
    from .preprocess import preprocess_dataset, preprocess_ntu

    _require_dir(cfg["input"], "--input")
    graph = _graph(cfg)
    src = Path(cfg["input"])
    if (src / "manifest.json").is_file():
        manifest = preprocess_dataset(src, cfg["out"], graph)
    elif any(src.glob("*.skeleton")):
        manifest = preprocess_ntu(src, cfg["out"], graph, cfg["benchmark"], cfg["classes"], cfg["frames"])
    else:
        raise CliUsage(f"--input {src} has neither manifest.json nor .skeleton files")
    out.emit({"event": "preprocess", "config": cfg, "sequences": len(manifest.entries)})


def cmd_train(cfg, out):
    from .checkpoint import save_checkpoint
    from .model import build_model, count_params, structure_hash
    from .train import TrainConfig, load_dataset, train

    _require_dir(cfg["data"], "--data")
    try:
        tcfg = TrainConfig(
            base_lr=cfg["lr"], decay_epochs=tuple(cfg["decay_epochs"]), decay_factor=cfg["decay_factor"],
            warmup_epochs=cfg["warmup"], max_epochs=cfg["epochs"], momentum=cfg["momentum"],
            weight_decay=cfg["weight_decay"], batch_size=cfg["batch_size"], seed=cfg["seed"],
        )
    except SpecError as exc:
        raise CliUsage(str(exc)) from None
    graph = _graph(cfg)
    manifest, train_set, held = load_dataset(cfg["data"], graph)
    model = build_model(_model_spec(cfg, manifest.num_classes), graph)
    with JsonLines(cfg["log"], out.stream) as log:
        log.emit({"event": "config", "config": cfg, "model": model.spec.name,
                  "params": count_params(model).total, "train": len(train_set), "held_out": len(held)})
        history = train(model, train_set, tcfg, held, on_epoch=lambda e: log.emit({"event": "epoch", **e}))
        Path(cfg["out"]).parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, cfg["out"], graph_ref=cfg["graph"] or BUILTIN_GRAPH)
        log.emit({"event": "done", "checkpoint": cfg["out"], "structure_hash": structure_hash(model),
                  "train_acc": history[-1]["train_acc"], "eval_acc": history[-1]["eval_acc"]})


def cmd_eval(cfg, out):
    from .checkpoint import load_checkpoint
    from .skeleton import DatasetManifest
    from .train import evaluate, load_arrays

    _require_file(cfg["checkpoint"], "--checkpoint")
    _require_dir(cfg["data"], "--data")
    model = load_checkpoint(cfg["checkpoint"])
    manifest = DatasetManifest.load(Path(cfg["data"]) / "manifest.json")
    train_entries, held_entries = manifest.split()
    entries = {"held-out": held_entries, "train": train_entries, "all": manifest.entries}[cfg["split"]]
    data = load_arrays(cfg["data"], entries, model.graph, manifest.preprocessed)
    report = evaluate(model, data, cfg["batch_size"])
    record = {"event": "eval", "config": cfg, "sequences": len(data), **report}
    if cfg["out"]:
        Path(cfg["out"]).write_text(json.dumps(record, indent=1, sort_keys=True) + "\n")
    out.emit(record)


def cmd_count(cfg, out):
    from .graph import load_graph
    from .model import build_model, count_params

    model = build_model(_model_spec(cfg, cfg["classes"]), load_graph())
    counts = count_params(model)
    out.emit({"event": "count-params", "config": cfg, "model": model.spec.name, **counts.to_json()})


def cmd_cam(cfg, out):
    from .cam import activated_joints, class_activation_map, export_cam
    from .checkpoint import load_checkpoint
    from .preprocess import build_branches, load_branches, stack_branches
    from .skeleton import load_sequence

    _require_file(cfg["checkpoint"], "--checkpoint")
    _require_file(cfg["input"], "--input")
    model = load_checkpoint(cfg["checkpoint"])
    path = Path(cfg["input"])
    if path.suffix == ".br":
        branches = load_branches(path)[0]
    else:
        branches = build_branches(load_sequence(path), model.graph)
    cam = class_activation_map(model, stack_branches(branches), cfg["class_id"])
    joints = activated_joints(cam, cfg["cam_frames"], cfg["quantile"])
    export_cam(cam, joints, cfg["out"], model.graph.edges, cfg["quantile"])
    out.emit({"event": "cam", "config": cfg, "class_id": cam.class_id, "frames": cam.num_frames,
              "frame_scale": cam.frame_scale, "out": cfg["out"]})


def cmd_bench(cfg, out):
    from .checkpoint import load_checkpoint
    from .graph import load_graph
    from .model import build_model

    if cfg["checkpoint"]:
        _require_file(cfg["checkpoint"], "--checkpoint")
        model = load_checkpoint(cfg["checkpoint"])
    else:
        model = build_model(_model_spec(cfg, cfg["classes"]), load_graph())
    rng = np.random.default_rng(cfg["seed"])
    v = model.graph.num_joints
    x = rng.normal(size=(cfg["batch_size"], len(model.spec.branches), 6, cfg["frames"], v, 2))
    if not cfg["checkpoint"]:
        model.train()
        model(x)  # populate BatchNorm running statistics
    model.eval()
    times = []
    for _ in range(cfg["repeats"]):
        start = time.perf_counter()
        model(x)
        times.append(time.perf_counter() - start)
    best = min(times)
    out.emit({"event": "bench", "config": cfg, "model": model.spec.name,
              "seconds_per_batch": best, "sequences_per_second": cfg["batch_size"] / best})


HANDLERS = {
    "synth": cmd_synth, "preprocess": cmd_preprocess, "train": cmd_train, "eval": cmd_eval,
    "count-params": cmd_count, "cam": cmd_cam, "bench": cmd_bench,
}


def main(argv=None, stdout=None, stderr=None, env=None):
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    sub = parser._subparsers._group_actions[0].choices[command]
    try:
        cfg = effective_config(command, args, env)
        HANDLERS[command](cfg, JsonLines(stream=stdout))
    except CliUsage as exc:
        sub.print_usage(stderr)
        print(f"resgcn {command}: error: {exc}", file=stderr)
        return 2
    except (ResGCNError, ValueError, OSError, RuntimeError) as exc:
        print(f"resgcn {command}: error: {exc}", file=stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
