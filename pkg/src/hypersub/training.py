"""Training loop, optimizer, early stopping, evaluation metric, grid search."""

from __future__ import annotations

import itertools
import logging
import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import kernel as K
from . import model as M
from .errors import EmptySplit, NumericalDivergence, ShapeError
from .hypergraph import Hypergraph, theta

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Knobs for one training run. ``monitor`` picks the early stopping
    signal: the full validation objective or its classification part only."""

    learning_rate: float = 0.001
    weight_decay: float = 0.0001
    dropout_rate: float = 0.5
    hidden_dim: int = 300
    num_layers: int = 2
    max_epochs: int = 6000
    patience: int = 10
    reg_weight: float = 1.0
    mode: str = "multiclass"
    batch_size: int = 0          # 0 means full batch
    seed: int = 0
    monitor: str = "total"       # "total" | "classification"
    use_subgraph_attention: bool = True
    leaky_slope: float = 0.01
    threshold: float = 0.5       # multilabel decision cutoff

    def validate(self):
        if self.learning_rate <= 0 or self.weight_decay < 0:
            raise ValueError("learning_rate must be positive, weight_decay non-negative")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")
        if self.hidden_dim < 1 or self.num_layers < 1:
            raise ValueError("hidden_dim and num_layers must be positive")
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be positive")
        if self.reg_weight < 0:
            raise ValueError("reg_weight must be non-negative")
        if self.mode not in ("multiclass", "multilabel"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.batch_size < 0:
            raise ValueError("batch_size must be 0 (full batch) or positive")
        if self.monitor not in ("total", "classification"):
            raise ValueError(f"unknown monitor {self.monitor!r}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")


def config_field_types() -> dict[str, type]:
    return {f.name: f.type if isinstance(f.type, type) else type(f.default)
            for f in fields(TrainConfig)}


@dataclass
class TrainReport:
    train_losses: list[float]
    val_losses: list[float]
    best_epoch: int
    epochs_run: int
    metrics: dict[str, float]
    wall_time: float
    seed: int


# ---------------------------------------------------------------- optimizer

@dataclass
class AdamState:
    step: int = 0
    m: list[np.ndarray] | None = None
    v: list[np.ndarray] | None = None


def adam_step(params: list[K.Tensor], grads: list[np.ndarray], state: AdamState,
              learning_rate: float, weight_decay: float = 0.0,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One Adam update with decoupled weight decay.

    Decay multiplies parameters by (1 - lr * wd) before the moment update, so
    it never leaks into the running gradient statistics.
    """
    if state.m is None:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NumericalDivergence("non-finite gradient")
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1 ** t
    bc2 = 1.0 - beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay != 0.0:
            p.data *= 1.0 - learning_rate * weight_decay
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= learning_rate * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ------------------------------------------------------------ early stopping

class EarlyStopping:
    """Stop when the monitored value has not strictly improved for
    ``patience`` consecutive epochs. Ties count as non-improvements."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.best_epoch = 0
        self.epoch = 0
        self.bad_epochs = 0

    def update(self, value: float) -> bool:
        """Record one epoch's value; True means it improved on the best."""
        self.epoch += 1
        if value < self.best:
            self.best = value
            self.best_epoch = self.epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.bad_epochs >= self.patience


# ------------------------------------------------------------------- metric

def predictions_from_scores(scores: np.ndarray, mode: str,
                            threshold: float = 0.5) -> np.ndarray:
    """Binary decision matrix from class scores: one-hot argmax for
    multiclass, thresholded per cell for multilabel."""
    if mode == "multiclass":
        out = np.zeros_like(scores)
        out[np.arange(scores.shape[0]), scores.argmax(axis=1)] = 1.0
        return out
    if mode == "multilabel":
        return (scores >= threshold).astype(scores.dtype)
    raise ValueError(f"unknown mode {mode!r}")


def micro_f1(predicted: np.ndarray, actual: np.ndarray) -> float:
    """Micro-averaged F1 over all (subject, class) cells: 2TP/(2TP+FP+FN).

    Zero when the denominator is zero (no positives anywhere).
    """
    predicted = np.asarray(predicted)
    actual = np.asarray(actual)
    if predicted.shape != actual.shape:
        raise ShapeError(f"prediction shape {predicted.shape} != label shape {actual.shape}")
    p = predicted > 0.5
    a = actual > 0.5
    tp = int(np.sum(p & a))
    fp = int(np.sum(p & ~a))
    fn = int(np.sum(~p & a))
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 0.0
    return 2.0 * tp / denom


# ----------------------------------------------------------------- training

def _epoch_val_loss(pairs, params, batch, theta_sp, config) -> tuple[float, float]:
    """(monitored, total) validation losses in evaluation mode."""
    with K.no_grad():
        res = M.forward(pairs, params, batch, theta_sp=theta_sp,
                        reg_weight=config.reg_weight, training=False)
    total = float(res.total_loss.data)
    monitored = res.classification_loss if config.monitor == "classification" else total
    return monitored, total


def train(dataset, h: Hypergraph, config: TrainConfig) -> tuple[M.ModelParams, TrainReport]:
    """Train a fresh model on the dataset's train split, early-stopping on the
    validation split, and restore the parameters of the best epoch.

    ``dataset`` provides indices("train"|"val"|"test") and batch(indices);
    see dataio.SubgraphDataset. Deterministic for a fixed config and seed.
    """
    config.validate()
    started = time.monotonic()
    train_idx = dataset.indices("train")
    val_idx = dataset.indices("val")
    if train_idx.size == 0:
        raise EmptySplit("train split has no subjects")
    if val_idx.size == 0:
        raise EmptySplit("val split has no subjects")

    rng = np.random.default_rng(config.seed)
    params = M.init_model(
        num_nodes=h.num_nodes, hidden_dim=config.hidden_dim,
        num_layers=config.num_layers, num_classes=len(dataset.class_vocab),
        rng=rng, mode=config.mode, dropout_rate=config.dropout_rate,
        leaky_slope=config.leaky_slope,
        use_subgraph_attention=config.use_subgraph_attention,
    )
    pairs = M.incidence_pairs(h)
    theta_sp = theta(h)  # built once per run and reused every epoch
    train_batch = dataset.batch(train_idx)
    val_batch = dataset.batch(val_idx)
    tensors = params.parameters()

    stopper = EarlyStopping(config.patience)
    adam = AdamState()
    best_snapshot = [t.data.copy() for t in tensors]
    train_losses: list[float] = []
    val_losses: list[float] = []

    for epoch in range(1, config.max_epochs + 1):
        if config.batch_size and config.batch_size < len(train_batch):
            order = rng.permutation(len(train_batch))
            chunks = [order[i:i + config.batch_size]
                      for i in range(0, order.size, config.batch_size)]
        else:
            chunks = [None]
        ce_sum = 0.0
        reg_last = 0.0
        for chunk in chunks:
            batch = train_batch if chunk is None else train_batch.subset(chunk)
            res = M.forward(pairs, params, batch, theta_sp=theta_sp,
                            reg_weight=config.reg_weight, training=True, rng=rng)
            if not np.isfinite(res.total_loss.data):
                raise NumericalDivergence(f"training loss non-finite at epoch {epoch}")
            for t in tensors:
                t.zero_grad()
            grads = K.backward(res.total_loss, tensors)
            adam_step(tensors, grads, adam,
                      config.learning_rate, config.weight_decay)
            ce_sum += res.classification_loss
            reg_last = res.regularization
        train_losses.append(ce_sum + config.reg_weight * reg_last)

        monitored, total_val = _epoch_val_loss(pairs, params, val_batch,
                                               theta_sp, config)
        if not np.isfinite(total_val):
            raise NumericalDivergence(f"validation loss non-finite at epoch {epoch}")
        val_losses.append(monitored)
        if stopper.update(monitored):
            best_snapshot = [t.data.copy() for t in tensors]
        if stopper.should_stop:
            break

    for t, saved in zip(tensors, best_snapshot):
        t.data[...] = saved

    metrics: dict[str, float] = {}
    for split in ("train", "val", "test"):
        idx = dataset.indices(split)
        if idx.size == 0:
            continue
        batch = dataset.batch(idx)
        scores = M.subgraph_scores(pairs, params, batch)
        pred = predictions_from_scores(scores, config.mode, config.threshold)
        metrics[f"micro_f1_{split}"] = micro_f1(pred, batch.labels)

    report = TrainReport(
        train_losses=train_losses,
        val_losses=val_losses,
        best_epoch=stopper.best_epoch,
        epochs_run=stopper.epoch,
        metrics=metrics,
        wall_time=time.monotonic() - started,
        seed=config.seed,
    )
    return params, report


# -------------------------------------------------------------- grid search

@dataclass
class GridPoint:
    config: TrainConfig
    mean_val_f1: float
    std_val_f1: float
    per_seed: dict[int, float] = field(default_factory=dict)


@dataclass
class GridSearchResult:
    best: GridPoint
    points: list[GridPoint]


def grid_search(dataset, h: Hypergraph, grids: dict[str, list],
                seeds: list[int], base: TrainConfig | None = None) -> GridSearchResult:
    """Exhaustive search over the cartesian product of ``grids``.

    Each combination trains once per seed; combinations are ranked by mean
    validation micro-F1. Axis values are visited in ascending order and only
    strict improvements replace the incumbent, so ties resolve toward the
    smallest values (in particular the lowest learning rate).
    """
    if not grids or any(len(v) == 0 for v in grids.values()):
        raise ValueError("grids must map at least one key to a non-empty list")
    if not seeds:
        raise ValueError("seeds must be non-empty")
    base = base or TrainConfig()
    names = list(grids.keys())
    valid = {f.name for f in fields(TrainConfig)}
    for name in names:
        if name not in valid:
            raise ValueError(f"unknown config key {name!r}")

    points: list[GridPoint] = []
    best: GridPoint | None = None
    for combo in itertools.product(*(sorted(grids[n]) for n in names)):
        config = replace(base, **dict(zip(names, combo)))
        per_seed = {}
        for seed in seeds:
            _, report = train(dataset, h, replace(config, seed=seed))
            per_seed[seed] = report.metrics["micro_f1_val"]
        values = np.array(list(per_seed.values()), dtype=np.float64)
        point = GridPoint(config=config, mean_val_f1=float(values.mean()),
                          std_val_f1=float(values.std()), per_seed=per_seed)
        points.append(point)
        logger.info("grid %s -> val micro-F1 %.4f +/- %.4f",
                    dict(zip(names, combo)), point.mean_val_f1, point.std_val_f1)
        if best is None or point.mean_val_f1 > best.mean_val_f1:
            best = point
    return GridSearchResult(best=best, points=points)
