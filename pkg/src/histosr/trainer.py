"""Training loop: shuffled mini-batches, BCE on residual targets, Adam, early stopping."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from . import unet
from .data import decode_residual, load_split, normalize
from .errors import ConfigError, DataError, NumericalError
from .tensor import AdamState

log = logging.getLogger(__name__)

# reference values reported for the original 1000/320 dataset, not reproducible here
PAPER_RMSE_TRAIN = 0.002
PAPER_RMSE_TEST = 0.003

METRICS_HEADER = ["epoch", "loss", "rmse_train", "rmse_test", "seconds"]


@dataclass
class TrainConfig:
    learning_rate: float = 0.001
    batch_size: int = 2
    max_epochs: int = 900
    patience: int = 100
    min_delta: float = 0.0
    seed: int = 0
    shuffle: bool = True
    eval_every: int = 10
    checkpoint_every: int = 50
    record_time: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if not 1 <= self.patience <= self.max_epochs:
            raise ConfigError(f"patience must be in [1, max_epochs], got {self.patience}")
        if self.learning_rate < 0 or self.min_delta < 0:
            raise ConfigError("learning_rate and min_delta must be non-negative")
        if self.eval_every < 0 or self.checkpoint_every < 0:
            raise ConfigError("eval_every and checkpoint_every must be non-negative")

    def to_dict(self):
        return asdict(self)


@dataclass
class MetricsRecord:
    epoch: int
    loss: float
    rmse_train: float | None = None
    rmse_test: float | None = None
    seconds: float | None = None


@dataclass
class TrainResult:
    weights: unet.ModelWeights
    history: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False


def early_stop_check(losses, patience, min_delta=0.0):
    """True once ``patience`` consecutive epochs failed to beat the best loss by more than ``min_delta``."""
    if not losses:
        raise ConfigError("early stopping needs a non-empty loss history")
    best = losses[0]
    stale = 0
    for loss in losses[1:]:
        if loss < best - min_delta:
            best = loss
            stale = 0
        else:
            stale += 1
    return stale >= patience


# -- evaluation --------------------------------------------------------------------


@dataclass
class RMSEReport:
    reconstruction: float
    residual: float
    baseline: float
    count: int


def relative_mse(pred, truth):
    """sum((pred - truth)^2) / sum(truth^2) over uint8 images scaled to [0, 1], in float64."""
    p = pred.astype(np.float64) / 255.0
    t = truth.astype(np.float64) / 255.0
    denom = float(np.sum(t * t))
    if denom == 0:
        return 0.0 if np.array_equal(p, t) else math.inf
    return float(np.sum((p - t) ** 2)) / denom


def evaluate_rmse(predictor, pairs):
    """Relative MSE of reconstructions (and of residuals) over a split.

    ``predictor`` is a :class:`~histosr.unet.ModelWeights` or any callable
    mapping a uint8 low-resolution image to a uint8 residual image.  The
    baseline is the same measure for the do-nothing reconstruction ``lr``.
    """
    if len(pairs) == 0:
        raise ConfigError("cannot evaluate an empty split")
    if isinstance(predictor, unet.ModelWeights):
        weights = predictor

        def predictor(img):
            return unet.predict_residual(weights, img)

    pred_res = np.stack([predictor(img) for img in pairs.lr])
    recon = np.stack([decode_residual(l, r) for l, r in zip(pairs.lr, pred_res)])
    return RMSEReport(
        reconstruction=relative_mse(recon, pairs.hr),
        residual=relative_mse(pred_res, pairs.residual),
        baseline=relative_mse(pairs.lr, pairs.hr),
        count=len(pairs),
    )


# -- metrics log ----------------------------------------------------------------------


def _fmt(value):
    return "" if value is None else repr(value)


class MetricsLog:
    """Append-only CSV sink; the header is written once, rows are flushed per epoch."""

    def __init__(self, path):
        self.path = path
        try:
            self._f = open(path, "w", newline="", encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot open metrics log {path}: {exc}") from exc
        self._w = csv.writer(self._f, lineterminator="\n")
        self._w.writerow(METRICS_HEADER)
        self._f.flush()

    def append(self, rec):
        try:
            self._w.writerow([rec.epoch, _fmt(rec.loss), _fmt(rec.rmse_train), _fmt(rec.rmse_test), _fmt(rec.seconds)])
            self._f.flush()
        except OSError as exc:
            raise DataError(f"cannot write metrics log {self.path}: {exc}") from exc

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def log_metrics(record, sink):
    """Append ``record`` to a :class:`MetricsLog` (or anything with ``append``)."""
    sink.append(record)
    return sink


def read_metrics(path):
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    out = []
    for r in rows:
        def num(key):
            return float(r[key]) if r[key] != "" else None

        out.append(MetricsRecord(int(r["epoch"]), float(r["loss"]), num("rmse_train"), num("rmse_test"), num("seconds")))
    return out


# -- training -------------------------------------------------------------------------


def fit(config, weights, train_pairs, test_pairs=None, metrics=None, checkpoint=None):
    """Train ``weights`` (a private copy) on in-memory pairs.

    ``metrics`` is an optional :class:`MetricsLog`.  ``checkpoint`` is an
    optional weights path rewritten on each new best loss; the current weights
    also go to ``<checkpoint>.last`` every ``checkpoint_every`` epochs.
    Returns the weights of the lowest-loss epoch.
    """
    if len(train_pairs) == 0:
        raise ConfigError("training split is empty")
    model = weights.copy()
    for img in train_pairs.lr[:1]:
        model.config.check_size(*img.shape[:2])
    x_all = normalize(train_pairs.lr)
    t_all = normalize(train_pairs.residual)
    params = model.params()
    state = AdamState.zeros_like(params)
    rng = T.make_rng(config.seed, 5)
    n = len(train_pairs)

    result = TrainResult(model.copy())
    best_loss = math.inf
    losses = []
    for epoch in range(1, config.max_epochs + 1):
        start = time.perf_counter()
        order = rng.permutation(n) if config.shuffle else np.arange(n)
        total = 0.0
        for b, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            y, cache = unet.forward(model, x_all[idx])
            loss, d_y = T.bce_loss(y, t_all[idx])
            if not math.isfinite(loss):
                raise NumericalError(f"non-finite loss {loss} at epoch {epoch}, batch {b}")
            grads = unet.flat_grads(unet.backward(model, cache, d_y))
            T.adam_step(params, grads, state, config.learning_rate)
            total += loss * len(idx)
        epoch_loss = total / n
        losses.append(epoch_loss)

        rec = MetricsRecord(epoch, epoch_loss)
        if config.eval_every and (epoch % config.eval_every == 0 or epoch == config.max_epochs):
            rec.rmse_train = evaluate_rmse(model, train_pairs).reconstruction
            if test_pairs is not None and len(test_pairs):
                rec.rmse_test = evaluate_rmse(model, test_pairs).reconstruction
        if config.record_time:
            rec.seconds = round(time.perf_counter() - start, 6)
        result.history.append(rec)
        if metrics is not None:
            log_metrics(rec, metrics)
        log.info("epoch %d loss %.6f rmse_train %s rmse_test %s", epoch, epoch_loss, rec.rmse_train, rec.rmse_test)

        improved = epoch_loss < best_loss
        if improved:
            best_loss = epoch_loss
            result.weights = model.copy()
            result.best_epoch = epoch
        if checkpoint is not None:
            if improved:
                unet.save_weights(model, checkpoint)
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                unet.save_weights(model, f"{checkpoint}.last")
        if early_stop_check(losses, config.patience, config.min_delta):
            result.stopped_early = epoch < config.max_epochs
            break
    return result


def train(config, weights, manifest, metrics=None, checkpoint=None):
    """Load the manifest's train (and test, if present) split and run :func:`fit`."""
    train_pairs = load_split(manifest, "train")
    test_pairs = load_split(manifest, "test") if manifest.split_samples("test") else None
    return fit(config, weights, train_pairs, test_pairs, metrics=metrics, checkpoint=checkpoint)
