"""Adam, the training loop with periodic CoLoRA merges, and multi-run aggregation."""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .data import DatasetSplits, Split
from .metrics import evaluate_scores
from .model import (
    ModelGraph,
    count_params,
    inject_cnn_adapter,
    inject_colora,
    layer_seed,
    merge_all,
    reinit_all,
    set_trainable,
)
from .tensor import GradTape, Tensor, backward, no_grad, softmax, softmax_cross_entropy

__all__ = [
    "NumericError",
    "AdamState",
    "Adam",
    "adam_step",
    "TrainConfig",
    "RunHistory",
    "train",
    "evaluate_split",
    "MultiRunResult",
    "multirun",
    "aggregate",
    "pretrain_transfer_protocol",
]

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class NumericError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` and returns the new parameter."""
    g = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(g).all():
        raise NumericError("non-finite gradient")
    state.t += 1
    state.m = beta1 * state.m + (1 - beta1) * g
    state.v = beta2 * state.v + (1 - beta2) * g * g
    m_hat = state.m / (1 - beta1 ** state.t)
    v_hat = state.v / (1 - beta2 ** state.t)
    update = lr * m_hat / (np.sqrt(v_hat) + eps)
    return (param.astype(np.float64) - update).astype(np.float32)


class Adam:
    """Adam over named tensors.  Frozen tensors are skipped and hold no state."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state: dict[str, AdamState] = {}

    def step(self, params: dict[str, Tensor], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for {name!r}")
        for name, t in params.items():
            if not t.requires_grad:
                continue
            st = self.state.get(name)
            if st is None:
                st = self.state[name] = AdamState(np.zeros(t.shape), np.zeros(t.shape))
            g = grads.get(name)
            if g is None:
                g = np.zeros(t.shape)
            t.data = adam_step(t.data, g, st, self.lr, self.beta1, self.beta2, self.eps)

    def reset(self, names) -> None:
        for name in names:
            self.state.pop(name, None)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    merge_interval: int = 1
    seed: int = 0
    runs: int = 1
    workers: int = 1
    # None leaves the graph's freeze mask as built
    freeze: Optional[str] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 <= self.merge_interval <= self.epochs:
            raise ValueError("merge_interval must lie in [0, epochs]")
        if self.runs < 1:
            raise ValueError("runs must be >= 1")
        if self.freeze not in (None, "full", "head", "backbone"):
            raise ValueError(f"unknown freeze policy {self.freeze!r}")


@dataclass
class RunHistory:
    loss: dict = field(default_factory=lambda: {s: [] for s in SPLITS})
    accuracy: dict = field(default_factory=lambda: {s: [] for s in SPLITS})
    seconds: list = field(default_factory=list)
    seed: int = 0

    @property
    def epochs(self) -> int:
        return len(self.seconds)

    def best_epoch(self, split: str = "test") -> int:
        """Highest accuracy on ``split``; ties go to the lower loss, then the earlier epoch."""
        acc = np.asarray(self.accuracy[split])
        loss = np.asarray(self.loss[split])
        return int(np.lexsort((np.arange(len(acc)), loss, -acc))[0])

    def to_csv(self, include_seconds: bool = True) -> str:
        head = "epoch,split,loss,accuracy" + (",seconds" if include_seconds else "")
        lines = [head]
        for e in range(self.epochs):
            for s in SPLITS:
                row = f"{e + 1},{s},{self.loss[s][e]!r},{self.accuracy[s][e]!r}"
                if include_seconds:
                    row += f",{self.seconds[e]!r}"
                lines.append(row)
        return "\n".join(lines) + "\n"


def evaluate_split(g: ModelGraph, split: Split, batch_size: int = 256) -> tuple[float, float, np.ndarray]:
    """Mean cross-entropy, accuracy and softmax scores of ``g`` on ``split``."""
    if len(split) == 0:
        raise ValueError("cannot evaluate an empty split")
    total = 0.0
    scores = []
    with no_grad():
        for start in range(0, len(split), batch_size):
            logits = g.forward(split.images[start:start + batch_size])
            labels = split.labels[start:start + batch_size]
            total += float(softmax_cross_entropy(logits, labels).data) * len(labels)
            scores.append(softmax(logits))
    probs = np.concatenate(scores)
    acc = float(np.mean(probs.argmax(axis=1) == split.labels))
    return total / len(split), acc, probs


def train(g: ModelGraph, data: DatasetSplits, cfg: TrainConfig,
          on_epoch: Optional[Callable[[int, ModelGraph, RunHistory], None]] = None) -> tuple[RunHistory, ModelGraph]:
    """Train ``g`` in place with softmax cross-entropy and Adam.

    When ``cfg.merge_interval`` divides the (1-based) epoch number, every
    CoLoRA residual is merged into its base kernel, re-initialized, and its
    Adam state dropped.  Metrics are logged after the merge.
    """
    if g.num_classes != data.num_classes:
        raise ValueError(f"model has {g.num_classes} outputs, data has {data.num_classes} classes")
    for name in SPLITS:
        if len(data[name]) == 0:
            raise ValueError(f"{name} split is empty")

    if cfg.freeze is not None:
        set_trainable(g, cfg.freeze)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    params = g.trainable_parameters()
    adapter_names = g.adapter_parameter_names()
    hist = RunHistory(seed=cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    train_split = data.train
    n = len(train_split)

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(n)
        for b in range(0, n, cfg.batch_size):
            idx = order[b:b + cfg.batch_size]
            x = Tensor._wrap(train_split.images[idx])
            with GradTape() as tape:
                loss = softmax_cross_entropy(g.forward(x), train_split.labels[idx])
            if not np.isfinite(loss.data):
                raise NumericError(f"loss became {float(loss.data)} in epoch {epoch}")
            grads = backward(tape, loss)
            opt.step(params, grads)
        if cfg.merge_interval and epoch % cfg.merge_interval == 0 and g.colora_layers():
            merge_all(g)
            reinit_all(g, cfg.seed, epoch)
            opt.reset(adapter_names)
        hist.seconds.append(time.perf_counter() - start)

        for name in SPLITS:
            loss_val, acc, _ = evaluate_split(g, data[name])
            hist.loss[name].append(loss_val)
            hist.accuracy[name].append(acc)
        log.debug("epoch %d: train loss %.4f acc %.3f, test acc %.3f", epoch,
                  hist.loss["train"][-1], hist.accuracy["train"][-1], hist.accuracy["test"][-1])
        if on_epoch is not None:
            on_epoch(epoch, g, hist)
    return hist, g


# ---------------------------------------------------------------------------
# multiple runs
# ---------------------------------------------------------------------------

def aggregate(histories: list[RunHistory]) -> dict:
    """Per-epoch median, quartiles and range of every logged curve.

    Returns ``{(metric, split): {"median": ..., "q25": ..., "q75": ..., "min": ..., "max": ...}}``
    with arrays over epochs.
    """
    out = {}
    if not histories:
        return out
    for metric in ("loss", "accuracy"):
        for s in SPLITS:
            vals = np.array([getattr(h, metric)[s] for h in histories], dtype=np.float64)
            out[(metric, s)] = {
                "median": np.median(vals, axis=0),
                "q25": np.percentile(vals, 25, axis=0),
                "q75": np.percentile(vals, 75, axis=0),
                "min": vals.min(axis=0),
                "max": vals.max(axis=0),
            }
    return out


@dataclass
class MultiRunResult:
    histories: list
    models: list
    failures: dict
    curves: dict

    def curves_csv(self) -> str:
        lines = ["metric,split,epoch,median,q25,q75,min,max"]
        for (metric, s), stats in self.curves.items():
            for e in range(len(stats["median"])):
                vals = ",".join(repr(float(stats[k][e])) for k in ("median", "q25", "q75", "min", "max"))
                lines.append(f"{metric},{s},{e + 1},{vals}")
        return "\n".join(lines) + "\n"


def multirun(make_graph: Callable[[int], ModelGraph], data: DatasetSplits, cfg: TrainConfig,
             same_seed: bool = False, on_epoch: Optional[Callable] = None) -> MultiRunResult:
    """Run ``cfg.runs`` independent trainings; run ``r`` uses seed ``cfg.seed + r``.

    ``make_graph(seed)`` builds a fresh graph per run.  ``on_epoch(run,
    epoch, graph, history)`` is called after every evaluated epoch.  Failed
    runs are reported in ``failures`` and left out of the aggregate.
    """
    seeds = [cfg.seed if same_seed else cfg.seed + r for r in range(cfg.runs)]

    def one(r, seed):
        hook = None if on_epoch is None else (lambda e, g, h: on_epoch(r, e, g, h))
        return train(make_graph(seed), data, replace(cfg, seed=seed), on_epoch=hook)

    results: list = [None] * cfg.runs
    failures: dict = {}
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            futures = [pool.submit(one, r, s) for r, s in enumerate(seeds)]
            for r, fut in enumerate(futures):
                try:
                    results[r] = fut.result()
                except (NumericError, ValueError) as exc:
                    failures[r] = str(exc)
    else:
        for r, s in enumerate(seeds):
            try:
                results[r] = one(r, s)
            except (NumericError, ValueError) as exc:
                failures[r] = str(exc)
    done = [res for res in results if res is not None]
    histories = [h for h, _ in done]
    return MultiRunResult(histories, [m for _, m in done], failures, aggregate(histories))


# ---------------------------------------------------------------------------
# transfer protocol
# ---------------------------------------------------------------------------

def _fresh_head(g: ModelGraph, num_classes: int, seed: int) -> ModelGraph:
    """Copy of ``g`` whose output layer is re-drawn for ``num_classes`` classes."""
    from .model import _dense_layer

    out = g.copy()
    last = out.layers[-1]
    n_in = last.weight.shape[0]
    out.layers[-1] = _dense_layer(last.name, n_in, num_classes, np.random.default_rng(seed))
    out.num_classes = num_classes
    return out


ARMS = ("head_only", "full", "cnn_adapter", "colora")


def pretrain_transfer_protocol(source: DatasetSplits, target: DatasetSplits,
                               make_graph: Callable[[int], ModelGraph], cfg: TrainConfig,
                               source_cfg: Optional[TrainConfig] = None,
                               arms=ARMS, order="pw_then_dw") -> list[dict]:
    """Pretrain on ``source``, then fine-tune four ways on ``target``.

    Every arm starts from the same pretrained weights and a fresh output
    layer.  Returns one row per arm with best-test and final accuracy,
    macro AUC of the best-test epoch, parameter counts and median epoch time.
    """
    if source.image_shape != target.image_shape:
        raise ValueError(f"image shapes differ: {source.image_shape} vs {target.image_shape}")
    source_cfg = source_cfg or replace(cfg, merge_interval=0)
    pre = set_trainable(make_graph(cfg.seed), "full")
    train(pre, source, source_cfg)
    start = _fresh_head(pre, target.num_classes, layer_seed(cfg.seed, "head"))

    builders = {
        "head_only": lambda g: set_trainable(g, "head"),
        "full": lambda g: set_trainable(g, "full"),
        "cnn_adapter": lambda g: inject_cnn_adapter(g, "all", freeze="backbone"),
        "colora": lambda g: inject_colora(g, "all", order=order, seed=cfg.seed, freeze="backbone"),
    }
    rows = []
    for arm in arms:
        g = builders[arm](start.copy())
        arm_cfg = cfg if arm == "colora" else replace(cfg, merge_interval=0)
        best_scores = {}

        def keep_scores(epoch, graph, _hist):
            best_scores[epoch] = evaluate_split(graph, target.test)[2]

        hist, g = train(g, target, arm_cfg, on_epoch=keep_scores)
        best = hist.best_epoch("test")
        best_val = hist.best_epoch("val")
        report = evaluate_scores(best_scores[best + 1], target.test.labels, target.num_classes)
        counts = count_params(g)
        rows.append({
            "arm": arm,
            "best_test_epoch": best + 1,
            "test_accuracy": hist.accuracy["test"][best],
            "val_selected_test_accuracy": hist.accuracy["test"][best_val],
            "final_test_accuracy": hist.accuracy["test"][-1],
            "macro_auc": report.macro_auc,
            "trainable_params": counts.trainable,
            "total_params": counts.total,
            "trainable_fraction": counts.trainable_fraction,
            "epoch_seconds": float(np.median(hist.seconds)),
            "history": hist,
        })
    return rows


def protocol_csv(rows: list[dict]) -> str:
    keys = [k for k in rows[0] if k != "history"]
    lines = [",".join(keys)]
    for r in rows:
        lines.append(",".join(str(r[k]) for k in keys))
    return "\n".join(lines) + "\n"
