"""Command-line entry point: ``colora {train,eval,distill,params,merge-check,synth}``.

Training is driven by a flat UTF-8 config of ``key=value`` lines (``#``
starts a comment); any key can be overridden on the command line with
further ``key=value`` arguments.  Run ``colora keys`` for the list.

Exit codes: 0 success, 1 numeric failure, 2 input or config error, 3 I/O
error while writing outputs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .adapters import Order, merge_equivalence_suite
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import (
    DatasetError,
    DatasetSplits,
    balance_by_first_n,
    distill,
    load_dataset,
    make_blobs_task,
    make_shapes_task,
    save_dataset,
)
from .metrics import evaluate_scores
from .model import (
    HeadSpec,
    ModelGraph,
    build_tiny_resnet,
    build_tiny_vgg,
    count_params,
    inject_cnn_adapter,
    inject_colora,
    merge_all,
    set_trainable,
)
from .plotting import Band, Series, line_plot
from .trainer import NumericError, RunHistory, TrainConfig, multirun

log = logging.getLogger("colora")

EXIT_OK, EXIT_NUMERIC, EXIT_INPUT, EXIT_IO = 0, 1, 2, 3


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

def _int_list(text: str) -> list[int]:
    try:
        vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None
    if not vals:
        raise ConfigError("expected at least one integer")
    return vals


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _choice(*options: str) -> Callable[[str], str]:
    def parse(text: str) -> str:
        if text not in options:
            raise ConfigError(f"expected one of {', '.join(options)}; got {text!r}")
        return text
    return parse


def _order(text: str) -> str:
    try:
        return Order.parse(text).value
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


@dataclass(frozen=True)
class Key:
    parse: Callable
    default: str
    help: str


CONFIG_KEYS: dict[str, Key] = {
    "data.dir": Key(str, "", "dataset directory (required for train)"),
    "data.shape": Key(_int_list, "28,28,1", "input H,W,C when no dataset is loaded (params)"),
    "data.classes": Key(int, "4", "class count when no dataset is loaded (params)"),
    "out.dir": Key(str, "runs/train", "output directory"),
    "arch.kind": Key(_choice("tiny_vgg", "tiny_resnet"), "tiny_vgg", "backbone family"),
    "arch.widths": Key(_int_list, "16,32", "channels per block"),
    "arch.kernel": Key(int, "3", "square kernel size of backbone convolutions"),
    "arch.head_reduce": Key(int, "16", "1x1 head reduction width"),
    "arch.head_hidden": Key(int, "16", "hidden dense width of the head"),
    "adapter.kind": Key(_choice("colora", "cnn_adapter", "none"), "colora", "adapter on backbone convolutions"),
    "colora.order": Key(_order, "pw_then_dw", "factorization order"),
    "colora.targets": Key(str, "all", "'all' or comma-separated conv layer names"),
    "colora.bias_delta": Key(_choice("auto", "true", "false"), "auto", "learn a bias delta"),
    "train.epochs": Key(int, "20", "epochs per run"),
    "train.batch_size": Key(int, "32", "mini-batch size"),
    "train.lr": Key(float, "0.001", "Adam learning rate"),
    "train.beta1": Key(float, "0.9", "Adam first-moment decay"),
    "train.beta2": Key(float, "0.999", "Adam second-moment decay"),
    "train.eps": Key(float, "1e-08", "Adam epsilon"),
    "train.freeze": Key(_choice("auto", "backbone", "head", "full"), "auto",
                        "freeze policy; auto = backbone with an adapter, full without"),
    "merge.interval": Key(int, "1", "merge CoLoRA residuals every N epochs (0 = never)"),
    "init.checkpoint": Key(str, "", "start from these weights instead of a fresh init"),
    "runs": Key(int, "1", "independent runs"),
    "seed": Key(int, "0", "base seed; run r uses seed + r"),
    "workers": Key(int, "1", "parallel runs (1 = single-threaded, byte-reproducible)"),
    "plots": Key(_bool, "false", "also write SVG plots"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in raw:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        raw[key] = value
    return raw


def resolve_config(raw: dict[str, str]) -> dict:
    unknown = sorted(set(raw) - set(CONFIG_KEYS))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    cfg = {}
    for key, spec in CONFIG_KEYS.items():
        text = raw.get(key, spec.default)
        try:
            cfg[key] = spec.parse(text)
        except ConfigError as exc:
            raise ConfigError(f"{key}: {exc}") from None
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {text!r}") from None
    for key in ("train.epochs", "train.batch_size", "runs", "workers", "arch.kernel",
                "arch.head_reduce", "arch.head_hidden", "data.classes"):
        if cfg[key] < 1:
            raise ConfigError(f"{key} must be >= 1")
    if not 0 <= cfg["merge.interval"] <= cfg["train.epochs"]:
        raise ConfigError("merge.interval must lie in [0, train.epochs]")
    if cfg["train.lr"] < 0:
        raise ConfigError("train.lr must be nonnegative")
    if len(cfg["data.shape"]) != 3:
        raise ConfigError("data.shape must be H,W,C")
    return cfg


def load_config(path: Optional[str], overrides: list[str]) -> dict:
    raw: dict[str, str] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except FileNotFoundError:
            raise InputError(f"config file {path} not found") from None
        except UnicodeDecodeError:
            raise ConfigError(f"config file {path} is not UTF-8") from None
        raw = parse_config_text(text, path)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, value = (part.strip() for part in item.split("=", 1))
        raw[key] = value
    return resolve_config(raw)


def config_text(cfg: dict) -> str:
    def show(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, list):
            return ",".join(str(i) for i in v)
        return repr(v) if isinstance(v, float) else str(v)
    return "".join(f"{k}={show(cfg[k])}\n" for k in sorted(cfg))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def git_blob_sha1(data: bytes) -> str:
    """Content hash as computed by ``git hash-object``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _hash_file(path: Path) -> str:
    return git_blob_sha1(path.read_bytes())


def _dataset_hashes(directory: Path) -> dict[str, str]:
    return {str(p): _hash_file(p) for p in sorted(directory.iterdir()) if p.is_file()}


class Outputs:
    """Collects artifacts under one directory and writes the manifest last."""

    def __init__(self, root: Path):
        self.root = root
        self.files: dict[str, Optional[str]] = {}

    def path(self, rel: str) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def text(self, rel: str, content: str, deterministic: bool = True) -> None:
        data = content.encode("utf-8")
        self.path(rel).write_bytes(data)
        self.files[rel] = git_blob_sha1(data) if deterministic else None

    def checkpoint(self, rel: str, g: ModelGraph) -> None:
        p = self.path(rel)
        save_checkpoint(g, p)
        self.files[rel] = _hash_file(p)

    def record(self, rel: str) -> None:
        self.files[rel] = _hash_file(self.root / rel)

    def manifest(self, command: str, config: dict, inputs: dict, extra: Optional[dict] = None) -> None:
        body = {
            "command": command,
            "config": {k: config[k] for k in sorted(config)},
            "seed": config.get("seed"),
            "inputs": inputs,
            "artifacts": {k: self.files[k] for k in sorted(self.files)},
            "nondeterministic": sorted(k for k, v in self.files.items() if v is None),
        }
        if extra:
            body.update(extra)
        self.path("manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n",
                                              encoding="utf-8")


def _load_data(directory: str, num_classes: Optional[int] = None) -> DatasetSplits:
    if not directory:
        raise ConfigError("data.dir is not set")
    try:
        return load_dataset(directory, num_classes)
    except FileNotFoundError as exc:
        raise InputError(str(exc)) from None


def _load_model(path: str) -> ModelGraph:
    try:
        return load_checkpoint(path)
    except FileNotFoundError:
        raise InputError(f"checkpoint {path} not found") from None


def build_graph(cfg: dict, input_shape: tuple, num_classes: int, seed: int) -> ModelGraph:
    head = HeadSpec(cfg["arch.head_reduce"], cfg["arch.head_hidden"], num_classes)
    build = build_tiny_vgg if cfg["arch.kind"] == "tiny_vgg" else build_tiny_resnet
    try:
        return build(tuple(input_shape), cfg["arch.widths"], head, seed=seed, kernel_size=cfg["arch.kernel"])
    except ValueError as exc:
        raise ConfigError(f"cannot build {cfg['arch.kind']}: {exc}") from None


def _init_from(g: ModelGraph, init: ModelGraph) -> None:
    """Copy weights by name; residuals in ``init`` are folded first, a mismatched output layer stays fresh."""
    merge_all(init)
    source = init.named_parameters()
    out_layer = g.layers[-1].name
    for name, t in g.named_parameters().items():
        if name not in source:
            raise ConfigError(f"init.checkpoint has no parameter {name!r}")
        if source[name].shape != t.shape:
            if name.startswith(out_layer + "."):
                log.info("output layer shape differs from init.checkpoint; keeping a fresh %s", name)
                continue
            raise ConfigError(f"init.checkpoint shape {source[name].shape} for {name!r}, graph has {t.shape}")
        t.data = source[name].data.copy()


def make_model(cfg: dict, input_shape: tuple, num_classes: int, seed: int,
               init: Optional[ModelGraph] = None) -> ModelGraph:
    g = build_graph(cfg, input_shape, num_classes, seed)
    if init is not None:
        _init_from(g, init)
    kind = cfg["adapter.kind"]
    freeze = cfg["train.freeze"]
    if freeze == "auto":
        freeze = "full" if kind == "none" else "backbone"
    try:
        if kind == "colora":
            bias_delta = {"auto": None, "true": True, "false": False}[cfg["colora.bias_delta"]]
            return inject_colora(g, cfg["colora.targets"], order=cfg["colora.order"], seed=seed,
                                 freeze=freeze, bias_delta=bias_delta)
        if kind == "cnn_adapter":
            return inject_cnn_adapter(g, cfg["colora.targets"], freeze=freeze)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"adapter injection failed: {exc}") from None
    return set_trainable(g, freeze)


def _curve_plot(curves: dict, metric: str) -> str:
    series, bands = [], []
    for split in ("train", "val", "test"):
        stats = curves[(metric, split)]
        epochs = np.arange(1, len(stats["median"]) + 1)
        series.append(Series(split, epochs, stats["median"]))
        bands.append(Band(split, epochs, stats["q25"], stats["q75"]))
        bands.append(Band(split, epochs, stats["min"], stats["max"], opacity=0.08))
    return line_plot(series, f"{metric}: median, IQR and range over runs", "epoch", metric, bands=bands)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _best_key(hist: RunHistory, split: str, e: int) -> tuple:
    return (-hist.accuracy[split][e], hist.loss[split][e], e)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.overrides)
    if args.out:
        cfg["out.dir"] = args.out
    data_dir = Path(cfg["data.dir"]) if cfg["data.dir"] else None
    data = _load_data(cfg["data.dir"])
    init = _load_model(cfg["init.checkpoint"]) if cfg["init.checkpoint"] else None
    shape, K = data.image_shape, data.num_classes
    # catch construction errors before anything is written
    probe = make_model(cfg, shape, K, cfg["seed"], init.copy() if init is not None else None)
    tcfg = TrainConfig(epochs=cfg["train.epochs"], batch_size=cfg["train.batch_size"], lr=cfg["train.lr"],
                       beta1=cfg["train.beta1"], beta2=cfg["train.beta2"], eps=cfg["train.eps"],
                       merge_interval=cfg["merge.interval"], seed=cfg["seed"], runs=cfg["runs"],
                       workers=cfg["workers"])
    inputs = _dataset_hashes(data_dir)
    if cfg["init.checkpoint"]:
        inputs[cfg["init.checkpoint"]] = _hash_file(Path(cfg["init.checkpoint"]))

    out = Outputs(Path(cfg["out.dir"]))
    out.root.mkdir(parents=True, exist_ok=True)
    out.text("config.txt", config_text(cfg))
    out.text("params.csv", count_params(probe).to_csv())
    best: dict = {}

    def on_epoch(run, epoch, g, hist):
        for split in ("test", "val"):
            key = _best_key(hist, split, epoch - 1)
            if (run, split) not in best or key < best[(run, split)]:
                best[(run, split)] = key
                out.checkpoint(f"run{run:02d}/best_{split}.clr", g)

    result = multirun(lambda s: make_model(cfg, shape, K, s, init.copy() if init is not None else None),
                      data, tcfg, on_epoch=on_epoch)
    timing = ["run,epoch,seconds"]
    summary = ["run,seed,status,best_test_epoch,best_test_accuracy,best_val_epoch,"
               "val_selected_test_accuracy,final_test_accuracy"]
    done = iter(zip(result.histories, result.models))
    for r in range(tcfg.runs):
        seed = tcfg.seed + r
        if r in result.failures:
            summary.append(f"{r},{seed},failed: {result.failures[r].replace(',', ';')},,,,,")
            for split in ("test", "val"):
                if (out.root / f"run{r:02d}/best_{split}.clr").exists():
                    out.record(f"run{r:02d}/best_{split}.clr")
            continue
        hist, g = next(done)
        out.text(f"run{r:02d}/history.csv", hist.to_csv(include_seconds=False))
        out.checkpoint(f"run{r:02d}/final.clr", g)
        out.record(f"run{r:02d}/best_test.clr")
        out.record(f"run{r:02d}/best_val.clr")
        timing += [f"{r},{e + 1},{s!r}" for e, s in enumerate(hist.seconds)]
        bt, bv = hist.best_epoch("test"), hist.best_epoch("val")
        test = hist.accuracy["test"]
        summary.append(f"{r},{seed},ok,{bt + 1},{test[bt]!r},{bv + 1},{test[bv]!r},{test[-1]!r}")
    out.text("timing.csv", "\n".join(timing) + "\n", deterministic=False)
    out.text("summary.csv", "\n".join(summary) + "\n")
    if result.histories:
        out.text("curves.csv", result.curves_csv())
        if cfg["plots"]:
            for metric in ("accuracy", "loss"):
                out.text(f"plots/{metric}.svg", _curve_plot(result.curves, metric))
    out.manifest("train", cfg, inputs, {"failures": {str(k): v for k, v in result.failures.items()},
                                        "rerun": "colora train config.txt"})

    for line in summary[1:]:
        print(line)
    if not result.histories:
        log.error("every run failed")
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_eval(args) -> int:
    g = _load_model(args.checkpoint)
    data = _load_data(args.dataset)
    if data.num_classes != g.num_classes:
        raise InputError(f"model predicts {g.num_classes} classes, dataset has {data.num_classes}")
    if data.image_shape != tuple(g.input_shape):
        raise InputError(f"model expects inputs {tuple(g.input_shape)}, dataset has {data.image_shape}")
    split = data[args.split]
    if len(split) == 0:
        raise InputError(f"split {args.split!r} is empty")
    scores = g.predict_proba(split.images)
    if not np.isfinite(scores).all():
        raise NumericError("model produced non-finite scores")
    report = evaluate_scores(scores, split.labels, data.num_classes)

    out = Outputs(Path(args.out))
    out.root.mkdir(parents=True, exist_ok=True)
    out.text("metrics.csv", report.classes.to_csv(auc=report.aucs))
    out.text("confusion.csv", report.confusion.to_csv())
    for i, roc in enumerate(report.rocs):
        if roc is not None:
            out.text(f"roc/class{i}.csv", roc.to_csv())
    if args.plots:
        names = data.class_names or [str(i) for i in range(data.num_classes)]
        curves = [Series(f"{names[i]} (AUC {roc.auc:.3f})", roc.fpr, roc.tpr)
                  for i, roc in enumerate(report.rocs) if roc is not None]
        curves.append(Series("chance", [0, 1], [0, 1], dashed=True))
        out.text("plots/roc.svg", line_plot(curves, f"one-vs-rest ROC ({args.split})",
                                            "false positive rate", "true positive rate",
                                            xlim=(0, 1), ylim=(0, 1)))
    inputs = {args.checkpoint: _hash_file(Path(args.checkpoint)), **_dataset_hashes(Path(args.dataset))}
    out.manifest("eval", {"checkpoint": args.checkpoint, "dataset": args.dataset, "split": args.split,
                          "plots": bool(args.plots)}, inputs)
    print(f"accuracy {report.accuracy:.6f}")
    print(f"macro_auc {report.macro_auc:.6f}")
    for key in ("recall", "precision", "specificity", "f1"):
        print(f"macro_{key} {report.classes.macro[key]:.6f}")
    return EXIT_OK


def cmd_distill(args) -> int:
    g = _load_model(args.checkpoint)
    data = _load_data(args.dataset)
    if data.num_classes != g.num_classes:
        raise InputError(f"model predicts {g.num_classes} classes, dataset has {data.num_classes}")
    train = data.train
    if args.balance:
        n = args.balance if args.balance == "min" else int(args.balance)
        train = balance_by_first_n(train, n, data.num_classes)
    keep = args.keep
    if keep is None:
        counts = train.class_counts(data.num_classes)
        keep = int(counts.min()) - args.discard_top
        if keep < 0:
            keep = 0
    kept, report = distill(train, g, discard_top=args.discard_top, keep=keep, num_classes=data.num_classes)

    out = Outputs(Path(args.out))
    out.root.mkdir(parents=True, exist_ok=True)
    save_dataset(data.replace(train=kept), out.root)
    for p in sorted(out.root.iterdir()):
        if p.is_file() and p.name != "manifest.json":
            out.record(p.name)
    out.text("distill_report.csv", report.to_csv())
    if args.plots:
        series = [Series(f"class {c}", np.arange(len(rows)), [h for _, h in rows])
                  for c, rows in sorted(report.entropies.items())]
        out.text("plots/entropy.svg", line_plot(series, "sorted predictive entropy per class",
                                                "rank (descending entropy)", "entropy (nats)"))
    inputs = {args.checkpoint: _hash_file(Path(args.checkpoint)), **_dataset_hashes(Path(args.dataset))}
    out.manifest("distill", {"checkpoint": args.checkpoint, "dataset": args.dataset,
                             "discard_top": args.discard_top, "keep": keep, "balance": args.balance or ""},
                 inputs)
    print(f"retained {len(kept)}")
    print(f"discarded {len(report.discarded)}")
    return EXIT_OK


def cmd_params(args) -> int:
    if args.checkpoint:
        g = _load_model(args.checkpoint)
    else:
        cfg = load_config(args.config, args.overrides)
        if cfg["data.dir"] and Path(cfg["data.dir"]).is_dir():
            data = _load_data(cfg["data.dir"])
            shape, K = data.image_shape, data.num_classes
        else:
            shape, K = tuple(cfg["data.shape"]), cfg["data.classes"]
        g = make_model(cfg, shape, K, cfg["seed"])
    report = count_params(g)
    table = report.to_csv()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_merge_check(args) -> int:
    res = merge_equivalence_suite(args.layers, seed=args.seed)
    print(f"layers {res.layers}")
    print(f"max_relative_deviation {res.max_deviation:.3e}")
    print("worst " + " ".join(f"{k}={v}" for k, v in res.worst.items() if k != "deviation"))
    if res.max_deviation > args.tol:
        log.error("deviation %.3e exceeds tolerance %.1e", res.max_deviation, args.tol)
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_synth(args) -> int:
    counts = dict(n_train=args.train, n_val=args.val, n_test=args.test, size=args.size, seed=args.seed)
    if args.task == "blobs":
        ds = make_blobs_task(**counts)
    else:
        ds = make_shapes_task(args.task.split("-", 1)[1], noise=args.noise, **counts)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds.train)}/{len(ds.val)}/{len(ds.test)} samples, "
          f"{ds.num_classes} classes, shape {ds.image_shape} to {args.out}")
    return EXIT_OK


def cmd_keys(args) -> int:
    for key, spec in CONFIG_KEYS.items():
        print(f"{key:20s} default {spec.default!s:12s} {spec.help}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="colora", description="Convolutional low-rank adaptation toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one or more runs from a config")
    p.add_argument("items", nargs="*", metavar="CONFIG|KEY=VALUE",
                   help="optional config file followed by key=value overrides")
    p.add_argument("--out", help="output directory (overrides out.dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="class-wise metrics, confusion matrix and ROC curves")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", default="runs/eval")
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("distill", help="entropy-based distillation of the training split")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="directory for the distilled dataset")
    p.add_argument("--discard-top", type=int, default=10)
    p.add_argument("--keep", type=int, default=None,
                   help="samples kept per class (default: smallest class count minus discard-top)")
    p.add_argument("--balance", default="", help="balance train first: a per-class count or 'min'")
    p.add_argument("--plots", action="store_true")
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("params", help="parameter accounting for a config or checkpoint")
    p.add_argument("items", nargs="*", metavar="CONFIG|KEY=VALUE")
    p.add_argument("--checkpoint")
    p.add_argument("--out", help="also write the table to this CSV")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("merge-check", help="merge-equivalence property suite")
    p.add_argument("--layers", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-5)
    p.set_defaults(func=cmd_merge_check)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("out")
    p.add_argument("--task", default="shapes-source", choices=("blobs", "shapes-source", "shapes-target"))
    p.add_argument("--train", type=int, default=200)
    p.add_argument("--val", type=int, default=50)
    p.add_argument("--test", type=int, default=50)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("keys", help="list config keys and defaults")
    p.set_defaults(func=cmd_keys)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if hasattr(args, "items"):
        # key=value pairs may follow options
        items = args.items + [e for e in extra if "=" in e and not e.startswith("-")]
        extra = [e for e in extra if e not in items]
        args.config = items[0] if items and "=" not in items[0] else None
        args.overrides = items[1:] if args.config else items
    if extra:
        parser.error(f"unrecognized arguments: {' '.join(extra)}")
    try:
        return args.func(args)
    except NumericError as exc:
        log.error("numeric failure: %s", exc)
        return EXIT_NUMERIC
    except (ConfigError, InputError, DatasetError, CheckpointError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except OSError as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
