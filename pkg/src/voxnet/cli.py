"""Command-line entry point: ``voxnet {synth,train,cv,explain,verify,describe}``.

Options resolve in three layers: built-in defaults, then an optional config
file (``--config``, INI style with one ``[command]`` section), then flags.
Every run writes ``effective_config.ini`` holding the resolved values, which
can be fed back through ``--config`` to repeat the run bit for bit.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
"""

import argparse
import configparser
import json
import logging
import os
import sys

import numpy as np

from . import __version__, kernels
from .attention import AXES, export_slices, occlusion_map, upsample_map
from .data import (
    LABELS, TASKS, generate_synthetic, load_dataset, read_volume, save_dataset,
    stratified_folds, write_volume,
)
from .errors import ConfigError, DataError, NumericalAbort, ShapeError, VersionError
from .evaluation import accuracy, cross_validate, roc_auc, tabulate, task_name
from .models import build, describe, load_model, save_model
from .optim import PUBLISHED_DEFAULTS, TrainConfig, train
from .verify import SUITES, run_suites

log = logging.getLogger("voxnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
CONFIG_NAME = "effective_config.ini"

# Defaults per command. ``None`` for lr/batch/epochs means "take the
# architecture's published setting" from ``PUBLISHED_DEFAULTS``.
DEFAULTS = {
    "synth": {"classes": "AD,NC", "per_class": 40, "cube": 32, "separability": 1.0, "seed": 0, "out": None},
    "train": {"arch": "voxcnn", "data": None, "task": "AD,NC", "epochs": None, "lr": None, "batch": None,
              "dropout": 0.5, "val_fold": 0, "folds": 5, "seed": 0, "out": None},
    "cv": {"arch": "voxcnn", "data": None, "task": "AD,NC", "folds": 5, "repeats": 5, "epochs": None,
           "lr": None, "batch": None, "dropout": 0.5, "seed": 0, "out": None},
    "explain": {"model": None, "volume": None, "class_": 1, "box": 7, "stride": 7, "fill": 0.0,
                "slice": None, "out": None},
    "verify": {"suite": "all", "out": None},
    "describe": {"arch": "voxcnn", "cube": 110, "out": None},
}
REQUIRED = {"synth": ("out",), "train": ("data", "out"), "cv": ("data", "out"),
            "explain": ("model", "volume", "out"), "verify": (), "describe": ()}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad usage; 2 is reserved for data errors here.
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _add(p, cmd, flag, type_, help_, dest=None, **kw):
    dest = dest or flag.lstrip("-").replace("-", "_")
    default = DEFAULTS[cmd][dest]
    shown = "per-architecture" if default is None and dest in ("epochs", "lr", "batch") else default
    p.add_argument(flag, dest=dest, type=type_, default=None, help=f"{help_} (default: {shown})", **kw)


def build_parser():
    parser = _Parser(prog="voxnet", description="3-D CNN classification of structural brain volumes.")
    parser.add_argument("--version", action="version", version=f"voxnet {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic labelled dataset")
    _add(p, "synth", "--classes", str, "comma-separated class labels")
    _add(p, "synth", "--per-class", int, "volumes per class")
    _add(p, "synth", "--cube", int, "volume edge length")
    _add(p, "synth", "--separability", float, "class signature amplitude in [0, 1]")
    _add(p, "synth", "--seed", int, "random seed")
    _add(p, "synth", "--out", str, "output directory")

    for cmd in ("train", "cv"):
        p = sub.add_parser(cmd, help="train one model on a train/val split" if cmd == "train"
                           else "repeated stratified cross-validation")
        _add(p, cmd, "--arch", str, "voxcnn or voxresnet", choices=sorted(PUBLISHED_DEFAULTS))
        _add(p, cmd, "--data", str, "dataset directory or manifest")
        _add(p, cmd, "--task", str, "class pair such as AD,NC" + (" or 'all'" if cmd == "cv" else ""))
        _add(p, cmd, "--epochs", int, "training epochs")
        _add(p, cmd, "--lr", float, "learning rate")
        _add(p, cmd, "--batch", int, "mini-batch size")
        _add(p, cmd, "--dropout", float, "VoxCNN dropout probability")
        _add(p, cmd, "--folds", int, "number of folds")
        if cmd == "train":
            _add(p, cmd, "--val-fold", int, "fold held out for validation")
        else:
            _add(p, cmd, "--repeats", int, "number of fold splits")
        _add(p, cmd, "--seed", int, "random seed")
        _add(p, cmd, "--out", str, "output directory")

    p = sub.add_parser("explain", help="occlusion attention map for one volume")
    _add(p, "explain", "--model", str, "model file written by train")
    _add(p, "explain", "--volume", str, "volume file")
    _add(p, "explain", "--class", int, "target class index", dest="class_")
    _add(p, "explain", "--box", int, "occlusion box edge")
    _add(p, "explain", "--stride", int, "occlusion stride")
    _add(p, "explain", "--fill", float, "value written into the occluded box")
    _add(p, "explain", "--slice", int, "slice index for the exports (default: centre)")
    _add(p, "explain", "--out", str, "output directory")

    p = sub.add_parser("verify", help="run the oracle verification suites")
    _add(p, "verify", "--suite", str, "suite name", choices=sorted(SUITES) + ["all"])
    _add(p, "verify", "--out", str, "optional directory for config and results")

    p = sub.add_parser("describe", help="print an architecture table")
    _add(p, "describe", "--arch", str, "voxcnn or voxresnet", choices=sorted(PUBLISHED_DEFAULTS))
    _add(p, "describe", "--cube", int, "input edge length")
    _add(p, "describe", "--out", str, "optional directory for table.txt and table.json")

    for p in sub.choices.values():
        p.add_argument("--config", default=None, help="config file with a [command] section")
    return parser


def _actions(parser, cmd):
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return {a.dest: a for a in sub.choices[cmd]._actions if a.dest in DEFAULTS[cmd]}


def read_config(path, cmd, actions):
    """Values from the ``[cmd]`` section of ``path``; unknown sections or keys are usage errors."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except OSError as exc:
        raise DataError(f"cannot read config {path}: {exc}") from exc
    except configparser.Error as exc:
        raise UsageError(f"malformed config {path}: {exc}") from exc
    extra = [s for s in cp.sections() if s != cmd]
    if extra:
        raise UsageError(f"config {path}: unknown section(s) {extra} for command {cmd!r}")
    values = {}
    if cmd in cp:
        for key, raw in cp[cmd].items():
            dest = key.replace("-", "_")
            dest = "class_" if dest == "class" else dest
            if dest not in actions:
                raise UsageError(f"config {path}: unknown key {key!r} in [{cmd}]")
            if raw.strip() == "":
                continue
            action = actions[dest]
            try:
                value = action.type(raw) if action.type else raw
            except ValueError as exc:
                raise UsageError(f"config {path}: bad value for {key!r}: {raw!r}") from exc
            if action.choices and value not in action.choices:
                raise UsageError(f"config {path}: {key} must be one of {sorted(action.choices)}")
            values[dest] = value
    return values


def resolve(parser, args):
    """Merge defaults, config file and flags into one dict."""
    cmd = args.command
    actions = _actions(parser, cmd)
    resolved = dict(DEFAULTS[cmd])
    if args.config:
        resolved.update(read_config(args.config, cmd, actions))
    for dest in DEFAULTS[cmd]:
        value = getattr(args, dest)
        if value is not None:
            resolved[dest] = value
    for key in ("data", "model", "volume"):
        if resolved.get(key):
            resolved[key] = os.path.abspath(resolved[key])
    missing = [f"--{k.rstrip('_').replace('_', '-')}" for k in REQUIRED[cmd] if resolved[k] is None]
    if missing:
        raise UsageError(f"voxnet {cmd}: missing required option(s) {', '.join(missing)}")
    return resolved


def write_effective_config(out_dir, cmd, values):
    cp = configparser.ConfigParser(interpolation=None)
    cp[cmd] = {("class" if k == "class_" else k): ("" if v is None else str(v)) for k, v in values.items()}
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, CONFIG_NAME)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# voxnet {__version__}, kernel backend {kernels.BACKEND}\n")
        cp.write(fh)
    return path


def _make_out(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc}") from exc
    if not os.access(path, os.W_OK):
        raise DataError(f"output directory {path} is not writable")
    return path


def parse_task(text):
    parts = [t.strip() for t in text.replace(" vs ", ",").replace("-", ",").split(",")]
    if len(parts) != 2 or parts[0] == parts[1] or not all(p in LABELS for p in parts):
        raise UsageError(f"task must name two distinct labels from {LABELS}, got {text!r}")
    return tuple(parts)


def _train_config(c):
    return TrainConfig.for_arch(c["arch"], lr=c["lr"], batch_size=c["batch"], epochs=c["epochs"],
                                dropout_p=c["dropout"], seed=c["seed"])


def _with_resolved(c, cfg):
    # record the concrete per-architecture values, not the None placeholders
    return dict(c, epochs=cfg.epochs, lr=cfg.lr, batch=cfg.batch_size)


# ---------------------------------------------------------------- commands


def cmd_synth(c):
    classes = tuple(s.strip() for s in c["classes"].split(",") if s.strip())
    if len(classes) < 2 or len(set(classes)) != len(classes):
        raise UsageError(f"--classes needs at least two distinct labels, got {c['classes']!r}")
    if c["per_class"] < 1:
        raise DataError("per-class count must be >= 1; refusing to write an empty manifest")
    ds = generate_synthetic(c["per_class"], classes, c["cube"], c["separability"], c["seed"])
    out = _make_out(c["out"])
    manifest = save_dataset(ds, out)
    write_effective_config(out, "synth", c)
    print(f"wrote {len(ds)} volumes and {manifest}")
    return EXIT_OK


def _task_data(c):
    ds = load_dataset(c["data"])
    return ds, parse_task(c["task"])


def cmd_train(c):
    ds, task = _task_data(c)
    cfg = _train_config(c)
    X, y, _ = ds.task_arrays(task)
    folds = stratified_folds(y, c["folds"], 1, seed=c["seed"])
    if not 0 <= c["val_fold"] < c["folds"]:
        raise UsageError(f"--val-fold must lie in [0, {c['folds']})")
    tr, va = folds.split(0, c["val_fold"])
    out = _make_out(c["out"])
    write_effective_config(out, "train", _with_resolved(c, cfg))
    net = build(cfg.arch, 2, X.shape[1], seed=cfg.seed, dropout_p=cfg.dropout_p)
    net.meta["task"] = list(task)
    net, history = train(net, X[tr], y[tr], cfg, val=(X[va], y[va]),
                         checkpoint=os.path.join(out, "last_good.vox"))
    save_model(net, os.path.join(out, "model.vox"))
    history.write_csv(os.path.join(out, "epoch_log.csv"))
    probs = net.predict(X[va][:, None])[:, 1]
    summary = {"task": task_name(task), "n_train": int(len(tr)), "n_val": int(len(va)),
               "val_auc": roc_auc(probs, y[va]), "val_acc": accuracy(probs, y[va])}
    with open(os.path.join(out, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    print(f"{summary['task']}: val AUC {summary['val_auc']:.4f}, acc {summary['val_acc']:.4f}")
    return EXIT_OK


def cmd_cv(c):
    ds = load_dataset(c["data"])
    tasks = list(TASKS) if c["task"] == "all" else [parse_task(c["task"])]
    cfg = _train_config(c)
    out = _make_out(c["out"])
    write_effective_config(out, "cv", _with_resolved(c, cfg))
    summaries = []
    fold_rows = ["task,repeat,fold,seed,auc,acc"]
    for task in tasks:
        tag = f"{task[0]}_{task[1]}"
        _, y, _ = ds.task_arrays(task)
        folds = stratified_folds(y, c["folds"], c["repeats"], seed=c["seed"])
        result = cross_validate(ds, task, cfg, folds=folds)
        summaries.append(result.summary)
        for run in result.runs:
            run_dir = os.path.join(out, "folds", tag, f"r{run.repeat}_f{run.fold}")
            os.makedirs(run_dir, exist_ok=True)
            run.log.write_csv(os.path.join(run_dir, "epoch_log.csv"))
            fold_rows.append(f"{task_name(task)},{run.repeat},{run.fold},{run.seed},{run.auc!r},{run.acc!r}")
        print(f"{task_name(task)}: AUC {result.summary.auc_mean:.4f}, acc {result.summary.acc_mean:.4f}")
    report = tabulate(summaries)
    with open(os.path.join(out, "summary.csv"), "w", encoding="utf-8") as fh:
        fh.write(report.csv)
    with open(os.path.join(out, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(report.text)
    with open(os.path.join(out, "folds.csv"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(fold_rows) + "\n")
    print(report.text, end="")
    return EXIT_OK


def cmd_explain(c):
    try:
        net = load_model(c["model"])
    except FileNotFoundError as exc:
        raise DataError(f"cannot read model: {exc}") from exc
    volume = read_volume(c["volume"], expected_shape=net.input_shape[1:])
    if not 0 <= c["class_"] < net.num_classes:
        raise UsageError(f"--class must lie in [0, {net.num_classes})")
    out = _make_out(c["out"])
    write_effective_config(out, "explain", c)
    amap = occlusion_map(net, volume, c["class_"], box=c["box"], stride=c["stride"], fill=c["fill"])
    heat = upsample_map(amap).astype(np.float32)
    write_volume(os.path.join(out, "attention_grid.vol"), amap.grid.astype(np.float32))
    write_volume(os.path.join(out, "attention_map.vol"), heat)
    written = {}
    for axis in ("axial", "sagittal"):
        n = volume.shape[AXES[axis]]
        index = n // 2 if c["slice"] is None else c["slice"]
        written[axis] = export_slices(volume, heat, axis, index, out)
    info = {"baseline_prob": amap.baseline_prob, "target_class": amap.target_class,
            "box": list(amap.box), "stride": list(amap.stride), "grid_shape": list(amap.grid.shape),
            "max_drop": float(amap.grid.max()), "min_drop": float(amap.grid.min()), "slices": written}
    with open(os.path.join(out, "attention.json"), "w", encoding="utf-8") as fh:
        json.dump(info, fh, indent=2)
    print(f"baseline p={amap.baseline_prob:.4f}; max drop {info['max_drop']:.4f} over grid {amap.grid.shape}")
    return EXIT_OK


def cmd_verify(c):
    results = run_suites([c["suite"]])
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    if c["out"]:
        out = _make_out(c["out"])
        write_effective_config(out, "verify", c)
        with open(os.path.join(out, "verify.txt"), "w", encoding="utf-8") as fh:
            fh.write("".join(r.line() + "\n" for r in results))
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_describe(c):
    table = describe(build(c["arch"], 2, c["cube"]))
    print(table.to_text(), end="")
    if c["out"]:
        out = _make_out(c["out"])
        write_effective_config(out, "describe", c)
        with open(os.path.join(out, "table.txt"), "w", encoding="utf-8") as fh:
            fh.write(table.to_text())
        with open(os.path.join(out, "table.json"), "w", encoding="utf-8") as fh:
            json.dump({"name": table.name, "input_shape": list(table.input_shape),
                       "rows": table.to_records()}, fh, indent=2)
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "cv": cmd_cv, "explain": cmd_explain,
            "verify": cmd_verify, "describe": cmd_describe}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](resolve(parser, args))
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalAbort as exc:
        where = f" (last good parameters in {exc.checkpoint})" if exc.checkpoint else ""
        print(f"numerical abort: {exc}{where}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, ShapeError, VersionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
