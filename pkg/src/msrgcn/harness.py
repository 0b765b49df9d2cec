"""Training loop, learning-rate schedule, k-fold driver and ablation runner."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import evalkit, ndnn
from . import rng as rngmod
from .graphcore import build_graph
from .model import (
    GraphBatch,
    ModelConfig,
    Variant,
    backward,
    forward,
    init_params,
    param_shapes,
    scale_features,
)
from .synthdata import N_CLASSES, Dataset, Fold, FoldSpec, group_kfold

log = logging.getLogger(__name__)

MODEL_MAGIC = b"MSRGCNMP"
MODEL_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    max_epochs: int = 100
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_factor: float = 0.3
    lr_patience: int = 10
    min_lr: float = 1e-6
    lr_threshold: float = 1e-4
    k: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.max_epochs < 1 or self.k < 2:
            raise ValueError("batch_size and max_epochs must be >= 1, k >= 2")
        if not 0.0 < self.lr_factor < 1.0:
            raise ValueError("lr_factor must lie in (0, 1)")
        if self.lr <= 0 or self.min_lr < 0 or self.lr_patience < 0:
            raise ValueError("lr must be positive; min_lr and patience non-negative")


class ReduceLROnPlateau:
    """Multiply the learning rate by ``factor`` after ``patience`` epochs without
    a relative improvement of ``threshold`` in the monitored (minimized) value."""

    def __init__(self, lr, factor=0.3, patience=10, min_lr=1e-6, threshold=1e-4):
        self.lr = lr
        self.factor = factor
        self.patience = patience
        self.min_lr = min_lr
        self.threshold = threshold
        self.best = np.inf
        self.bad_epochs = 0

    def step(self, value: float) -> float:
        if value < self.best * (1.0 - self.threshold):
            self.best = value
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
        if self.bad_epochs > self.patience:
            self.lr = max(self.lr * self.factor, self.min_lr)
            self.bad_epochs = 0
        return self.lr


def class_weights(labels, k: int = N_CLASSES) -> np.ndarray:
    """``N / (K * N_c)``; classes absent from ``labels`` get weight 1."""
    counts = np.bincount(np.asarray(labels), minlength=k).astype(np.float64)
    w = np.ones(k)
    present = counts > 0
    w[present] = counts.sum() / (k * counts[present])
    return w


class BatchBuilder:
    """Graphs cached per ``(rows, cols)`` for one variant; features sliced to its scales."""

    def __init__(self, dataset: Dataset, variant: Variant):
        self.dataset = dataset
        self.graph_variant = variant.graph_variant
        self._graphs = {}
        self._features = {}

    def graph(self, rows: int, cols: int):
        key = (rows, cols)
        if key not in self._graphs:
            self._graphs[key] = build_graph(rows, cols, self.graph_variant)
        return self._graphs[key]

    def item(self, image_id: str):
        rec = self.dataset.record(image_id)
        g = self.graph(rec.grid_rows, rec.grid_cols)
        if image_id not in self._features:
            self._features[image_id] = scale_features(
                self.graph_variant, self.dataset.features[image_id], rec.n_locations
            )
        return g, self._features[image_id]

    def batch(self, image_ids) -> GraphBatch:
        items = [self.item(i) for i in image_ids]
        return GraphBatch.from_graphs([g for g, _ in items], [f for _, f in items])

    def labels(self, image_ids) -> np.ndarray:
        return np.array([self.dataset.record(i).label for i in image_ids])


def batch_loss(batch, labels, params, model_config, weights):
    trace = forward(batch, None, params, model_config)
    loss, dlogits = ndnn.weighted_cross_entropy(trace.logits, labels, weights)
    return loss, trace, dlogits


def train_fold(
    dataset: Dataset,
    fold: Fold,
    train_config: TrainConfig,
    model_config: ModelConfig,
    fold_index: int = 0,
):
    """Train on one fold; returns ``(best_params, report_entry)``."""
    if not fold.train or not fold.validation:
        raise TrainingError(f"fold {fold_index}: empty train or validation split")
    tc = train_config
    builder = BatchBuilder(dataset, model_config.variant)
    train_ids = list(fold.train)
    y_train = builder.labels(train_ids)
    weights = class_weights(y_train, model_config.n_classes)
    val_batch = builder.batch(fold.validation)
    y_val = builder.labels(fold.validation)

    params = init_params(model_config, rngmod.stream(tc.seed, rngmod.INIT, fold_index))
    state = ndnn.AdamState()
    sched = ReduceLROnPlateau(tc.lr, tc.lr_factor, tc.lr_patience, tc.min_lr, tc.lr_threshold)
    shuffle = rngmod.stream(tc.seed, rngmod.SHUFFLE, fold_index)
    lr = tc.lr
    best = (np.inf, -1, params)
    history = {"train_loss": [], "val_loss": [], "lr": []}

    for epoch in range(1, tc.max_epochs + 1):
        order = shuffle.permutation(len(train_ids))
        total, wsum = 0.0, 0.0
        for start in range(0, len(order), tc.batch_size):
            idx = order[start : start + tc.batch_size]
            batch = builder.batch([train_ids[i] for i in idx])
            loss, trace, dlogits = batch_loss(batch, y_train[idx], params, model_config, weights)
            if not np.isfinite(loss):
                raise TrainingError(f"fold {fold_index} epoch {epoch}: non-finite training loss {loss}")
            grads = backward(trace, batch, params, dlogits)
            params, state = ndnn.adam_step(params, grads, state, lr, tc.beta1, tc.beta2, tc.adam_eps)
            bw = weights[y_train[idx]].sum()
            total += loss * bw
            wsum += bw
        val_loss = batch_loss(val_batch, y_val, params, model_config, weights)[0]
        if not np.isfinite(val_loss):
            raise TrainingError(f"fold {fold_index} epoch {epoch}: non-finite validation loss {val_loss}")
        history["train_loss"].append(total / wsum)
        history["val_loss"].append(val_loss)
        history["lr"].append(lr)
        if val_loss < best[0]:
            best = (val_loss, epoch, params)
        lr = sched.step(val_loss)

    best_loss, best_epoch, best_params = best
    entry = {
        "fold": fold_index,
        "best_epoch": best_epoch,
        "best_val_loss": best_loss,
        "n_train": len(fold.train),
        "n_validation": len(fold.validation),
        "n_test": len(fold.test),
        "validation": evaluate_ids(builder, fold.validation, best_params, model_config).to_dict(),
        "test": evaluate_ids(builder, fold.test, best_params, model_config).to_dict() if fold.test else None,
        "history": history,
    }
    log.info(
        "%s fold %d: best epoch %d, val loss %.4f",
        model_config.variant,
        fold_index,
        best_epoch,
        best_loss,
    )
    return best_params, entry


def predict_ids(builder: BatchBuilder, image_ids, params, model_config) -> np.ndarray:
    return forward(builder.batch(image_ids), None, params, model_config).probabilities


def evaluate_ids(builder: BatchBuilder, image_ids, params, model_config) -> evalkit.MetricsReport:
    return evalkit.evaluate(builder.labels(image_ids), predict_ids(builder, image_ids, params, model_config))


def _summary(values) -> dict:
    vals = np.array([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return {"mean": None, "std": None, "min": None, "max": None}
    return {
        "mean": float(vals.mean()),
        "std": float(vals.std()),
        "min": float(vals.min()),
        "max": float(vals.max()),
    }


def aggregate(fold_entries: list[dict]) -> dict:
    tests = [e["test"] for e in fold_entries if e["test"] is not None]
    return {
        "macro_auc": _summary(t["macro_auc"] for t in tests),
        "qw_kappa": _summary(t["qw_kappa"] for t in tests),
        "accuracy": _summary(t["accuracy"] for t in tests),
    }


def run_experiment(
    dataset: Dataset,
    train_config: TrainConfig,
    model_config: ModelConfig,
    folds: FoldSpec | None = None,
    model_dir=None,
) -> dict:
    """Train every fold and aggregate test metrics (mean and population std)."""
    if folds is None:
        folds = group_kfold(dataset, train_config.k, train_config.seed)
    entries = []
    for i, fold in enumerate(folds.folds):
        params, entry = train_fold(dataset, fold, train_config, model_config, i)
        entries.append(entry)
        if model_dir is not None:
            save_model(Path(model_dir) / f"fold{i}.model", params, model_config, {"fold": i, "k": folds.k, "fold_seed": folds.seed})
    return {
        "variant": model_config.variant.value,
        "model_config": model_config.to_dict(),
        "train_config": asdict(train_config),
        "folds": entries,
        "aggregate": aggregate(entries),
    }


def ablate(dataset: Dataset, variants, train_config: TrainConfig, model_config: ModelConfig | None = None) -> dict:
    """One run per listed variant, all on the same folds and seeds."""
    base = model_config or ModelConfig(in_dim=next(iter(dataset.features.values())).shape[1])
    folds = group_kfold(dataset, train_config.k, train_config.seed)
    runs, rows = [], []
    for v in variants:
        report = run_experiment(dataset, train_config, replace(base, variant=Variant(v)), folds)
        runs.append(report)
        agg = report["aggregate"]
        rows.append(
            {
                "variant": report["variant"],
                "macro_auc_mean": agg["macro_auc"]["mean"],
                "macro_auc_std": agg["macro_auc"]["std"],
                "qw_kappa_mean": agg["qw_kappa"]["mean"],
                "qw_kappa_std": agg["qw_kappa"]["std"],
                "accuracy_mean": agg["accuracy"]["mean"],
            }
        )
    return {"table": rows, "runs": runs, "folds": json.loads(folds.to_json())}


def report_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


def format_table(table: list[dict]) -> str:
    lines = [f"{'variant':<20} {'macro AUC':>17} {'QW kappa':>17}"]
    for row in table:
        auc = _fmt(row["macro_auc_mean"], row["macro_auc_std"])
        kap = _fmt(row["qw_kappa_mean"], row["qw_kappa_std"])
        lines.append(f"{row['variant']:<20} {auc:>17} {kap:>17}")
    return "\n".join(lines)


def _fmt(mean, std) -> str:
    if mean is None:
        return "n/a"
    return f"{mean:.4f} +- {std:.4f}"


# ---------------------------------------------------------------------------
# model files
#
# Layout (little-endian):
#   8 bytes  magic  b"MSRGCNMP"
#   uint32   format version
#   uint32   byte length L of the config echo
#   L bytes  UTF-8 JSON: {"model": ModelConfig, "tensors": [[name, shape], ...], ...extra}
#   float64  every tensor, flattened row-major, in declaration order


def save_model(path, params: dict, model_config: ModelConfig, extra: dict | None = None) -> None:
    echo = dict(extra or {})
    echo["model"] = model_config.to_dict()
    echo["tensors"] = [[k, list(v.shape)] for k, v in params.items()]
    header = json.dumps(echo, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, len(header)))
        fh.write(header)
        for v in params.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_model(path):
    """Returns ``(params, model_config, echo)``."""
    data = Path(path).read_bytes()
    if data[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    echo = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    config = ModelConfig.from_dict(echo["model"])
    expected = param_shapes(config)
    params, off = {}, 16 + hlen
    for name, shape in echo["tensors"]:
        if tuple(shape) != expected.get(name):
            raise ValueError(f"{path}: tensor {name} has shape {shape}, config implies {expected.get(name)}")
        n = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(data) or set(params) != set(expected):
        raise ValueError(f"{path}: truncated or inconsistent tensor data")
    return params, config, echo


@dataclass
class ExperimentConfig:
    """Contents of a JSON config file: ``{"gen": ..., "model": ..., "train": ...}``."""

    gen: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        unknown = set(data) - {"gen", "model", "train"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(data.get("gen", {}), data.get("model", {}), data.get("train", {}))
