"""Minibatch SGD with momentum, loss variants, and temperature annealing.

The default loss sums a binary cross-entropy term per class,
-sum_i [y_i log o_i + (1 - y_i) log(1 - o_i)]; plain categorical
cross-entropy (-sum_i y_i log o_i) sits behind ``variant="categorical"``.
Both share one gradient path through the softmax.

Selection temperatures above 0.5 are annealed linearly over the run to
0.9 below their starting value (never under a 0.05 floor); smaller
temperatures stay constant.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import DataError, DivergenceError
from .inference import AveragingConfig, classification_error
from .network import LayerParams, ModelConfig, halve_weights, init_parameters, model_backward, model_forward
from .numerics import RngStream, mix_seed
from .units import MODE_TRAIN_SAMPLE, MODE_TRAIN_SAMPLE_DROPOUT

LOSS_PAPER = "paper"
LOSS_CATEGORICAL = "categorical"

_PROB_FLOOR = 1e-12

# fork labels for the training stream tree
_L_EPOCH = 1
_L_VALID = 2
_L_SHUFFLE = 3


@dataclass
class SgdConfig:
    batch_size: int = 100
    learning_rate: float = 0.05
    lr_decay: float = 0.995  # multiplicative, per epoch
    momentum: float = 0.9
    epochs_max: int = 100
    patience: int = 10
    seed: int = 0
    dropout: bool = True
    valid_evals: int = 10  # model evaluations per validation-error estimate
    loss_variant: str = LOSS_PAPER

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.loss_variant not in (LOSS_PAPER, LOSS_CATEGORICAL):
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")


@dataclass
class LambdaSchedule:
    """Per-layer selection temperatures and their annealing plan.

    A layer anneals iff its starting value exceeds 0.5; the target is
    0.9 below the start, clipped at 0.05.
    """

    initial: tuple[float, ...]
    epochs_total: int
    drop: float = 0.9
    threshold: float = 0.5
    floor: float = 0.05

    def __post_init__(self):
        self.initial = tuple(float(v) for v in self.initial)
        if any(not v > 0 for v in self.initial):
            raise ValueError("all initial lambdas must be positive")
        if self.epochs_total < 0:
            raise ValueError("epochs_total must be >= 0")

    def anneals(self) -> tuple[bool, ...]:
        return tuple(v > self.threshold for v in self.initial)


def schedule_for(config: ModelConfig, epochs_total: int) -> LambdaSchedule:
    """Schedule seeded from the configured layer temperatures (1.0 where unset)."""
    lams = tuple(l.lambda_ if l.lambda_ is not None else 1.0 for l in config.subspace_layers())
    return LambdaSchedule(initial=lams, epochs_total=epochs_total)


def lambda_at(schedule: LambdaSchedule, epoch: int) -> tuple[float, ...]:
    """Temperatures in effect at the start of the given epoch."""
    if not 0 <= epoch <= schedule.epochs_total:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.epochs_total}]")
    out = []
    for lam0, anneal in zip(schedule.initial, schedule.anneals()):
        if not anneal or schedule.epochs_total == 0:
            out.append(lam0)
            continue
        frac = epoch / schedule.epochs_total
        out.append(max(lam0 - schedule.drop * frac, schedule.floor))
    return tuple(out)


def _check_one_hot(y: np.ndarray) -> None:
    if y.ndim == 0 or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=-1) == 1):
        raise DataError("labels must be one-hot vectors")


def cross_entropy(o, y, variant: str = LOSS_PAPER) -> float:
    """Loss of one prediction against a one-hot label."""
    o = np.asarray(o, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if o.shape != y.shape:
        raise DataError(f"prediction shape {o.shape} != label shape {y.shape}")
    _check_one_hot(y)
    oc = np.clip(o, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    if variant == LOSS_CATEGORICAL:
        return float(-(y * np.log(oc)).sum())
    if variant != LOSS_PAPER:
        raise ValueError(f"unknown loss variant {variant!r}")
    return float(-(y * np.log(oc) + (1.0 - y) * np.log(1.0 - oc)).sum())


def loss_and_logit_grad(o: np.ndarray, y: np.ndarray, variant: str = LOSS_PAPER):
    """Mean loss over a batch and its gradient at the softmax inputs.

    o and y are [n, C]; the returned gradient includes the 1/n factor.
    """
    o = np.asarray(o, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_one_hot(y)
    n = o.shape[0]
    oc = np.clip(o, _PROB_FLOOR, 1.0 - _PROB_FLOOR)
    if variant == LOSS_CATEGORICAL:
        loss = float(-(y * np.log(oc)).sum() / n)
        g = -y / oc
    elif variant == LOSS_PAPER:
        loss = float(-(y * np.log(oc) + (1.0 - y) * np.log(1.0 - oc)).sum() / n)
        g = -y / oc + (1.0 - y) / (1.0 - oc)
    else:
        raise ValueError(f"unknown loss variant {variant!r}")
    # chain through the softmax Jacobian: ds = o * (g - <g, o>)
    dlogits = o * (g - (g * o).sum(axis=1, keepdims=True)) / n
    return loss, dlogits


def sgd_step(params, grads, velocity, learning_rate: float, momentum: float):
    """velocity <- momentum*velocity - lr*grad; params <- params + velocity.

    Returns fresh parameter and velocity lists; inputs are not mutated.
    """
    new_params, new_vel = [], []
    for lp, g, v in zip(params, grads, velocity):
        vW = momentum * v.W - learning_rate * g.W
        vb = momentum * v.b - learning_rate * g.b
        new_vel.append(LayerParams(vW, vb))
        new_params.append(LayerParams(lp.W + vW, lp.b + vb))
    return new_params, new_vel


def _zero_like(params) -> list[LayerParams]:
    return [LayerParams(np.zeros_like(p.W), np.zeros_like(p.b)) for p in params]


@dataclass
class HistoryRow:
    epoch: int
    lambdas: tuple[float, ...]
    train_loss: float
    valid_error: float


@dataclass
class History:
    rows: list[HistoryRow] = field(default_factory=list)
    best_epoch: int = -1
    best_valid_error: float = float("inf")

    @property
    def epochs_run(self) -> int:
        return len(self.rows)

    @property
    def epochs_to_best(self) -> int:
        return self.best_epoch + 1

    def write_csv(self, path) -> None:
        if not self.rows:
            header_lams = 0
        else:
            header_lams = len(self.rows[0].lambdas)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(
                ["epoch"]
                + [f"lambda_{i + 1}" for i in range(header_lams)]
                + ["train_loss", "valid_error_percent"]
            )
            for r in self.rows:
                w.writerow(
                    [r.epoch]
                    + [f"{v:.6f}" for v in r.lambdas]
                    + [f"{r.train_loss:.8f}", f"{r.valid_error:.6f}"]
                )


def _one_hot(labels: np.ndarray, classes: int) -> np.ndarray:
    return np.eye(classes, dtype=np.float64)[labels]


def _run_epoch(config, params, velocity, images, labels_1h, cfg, lam, epoch_stream,
               lr, mode):
    n = images.shape[0]
    perm = epoch_stream.fork(_L_SHUFFLE).permutation(n)
    losses = []
    for start in range(0, n, cfg.batch_size):
        idx = perm[start:start + cfg.batch_size]
        xb = images[idx]
        yb = labels_1h[idx]
        batch_stream = epoch_stream.fork(100 + start)
        streams = [batch_stream.fork(j) for j in range(len(idx))]
        res = model_forward(xb, params, config, mode, rng=streams,
                            lambdas=lam, keep_cache=True)
        loss, dlogits = loss_and_logit_grad(res.probs, yb, cfg.loss_variant)
        if not np.isfinite(loss):
            raise DivergenceError("training loss is not finite", epoch=None)
        losses.append(loss)
        grads = model_backward(res, params, config, dlogits)
        params, velocity = sgd_step(params, grads, velocity, lr, cfg.momentum)
    return params, velocity, float(np.mean(losses))


def train(config: ModelConfig, params, train_set, valid_set, cfg: SgdConfig,
          schedule: LambdaSchedule):
    """Minibatch SGD with early stopping on the validation error.

    Stops once the validation error has not improved for more than
    ``cfg.patience`` consecutive epochs and returns the parameters from
    the best epoch together with the training history.
    """
    if len(train_set.images) == 0 or len(valid_set.images) == 0:
        raise DataError("train and validation sets must be non-empty")
    root = RngStream(cfg.seed)
    mode = MODE_TRAIN_SAMPLE_DROPOUT if cfg.dropout else MODE_TRAIN_SAMPLE
    labels_1h = _one_hot(train_set.labels, config.classes)
    velocity = _zero_like(params)
    history = History()
    best_params = [p.copy() for p in params]
    lr = cfg.learning_rate
    since_best = 0
    for epoch in range(cfg.epochs_max):
        lam = lambda_at(schedule, min(epoch, schedule.epochs_total))
        epoch_stream = root.fork(_L_EPOCH).fork(epoch)
        try:
            params, velocity, train_loss = _run_epoch(
                config, params, velocity, train_set.images, labels_1h, cfg, lam,
                epoch_stream, lr, mode)
        except DivergenceError as err:
            raise DivergenceError(str(err), epoch=epoch) from None
        eval_params = halve_weights(params, config) if cfg.dropout else params
        vcfg = AveragingConfig(evaluations=cfg.valid_evals,
                               seed=mix_seed(cfg.seed, _L_VALID, epoch))
        valid_error = classification_error(eval_params, valid_set, config, vcfg, lambdas=lam)
        history.rows.append(HistoryRow(epoch, lam, train_loss, valid_error))
        if valid_error < history.best_valid_error:
            history.best_valid_error = valid_error
            history.best_epoch = epoch
            best_params = [p.copy() for p in params]
            since_best = 0
        else:
            since_best += 1
            if since_best > cfg.patience:
                break
        lr *= cfg.lr_decay
    return best_params, history


def retrain_full(config: ModelConfig, full_train_set, epochs_fixed: int,
                 cfg: SgdConfig, schedule: LambdaSchedule | None = None):
    """Fresh training on the conflated set for exactly ``epochs_fixed`` epochs.

    No early stopping and no validation; the annealing schedule is laid
    out over the fixed epoch budget. Returns (params, history) where the
    history rows carry NaN validation errors.
    """
    if len(full_train_set.images) == 0:
        raise DataError("training set must be non-empty")
    if epochs_fixed < 0:
        raise ValueError("epochs_fixed must be >= 0")
    if schedule is None:
        schedule = schedule_for(config, epochs_fixed)
    else:
        schedule = replace(schedule, epochs_total=epochs_fixed)
    root = RngStream(cfg.seed)
    params = init_parameters(config, root.fork(0))
    mode = MODE_TRAIN_SAMPLE_DROPOUT if cfg.dropout else MODE_TRAIN_SAMPLE
    labels_1h = _one_hot(full_train_set.labels, config.classes)
    velocity = _zero_like(params)
    history = History()
    lr = cfg.learning_rate
    for epoch in range(epochs_fixed):
        lam = lambda_at(schedule, epoch)
        epoch_stream = root.fork(_L_EPOCH).fork(epoch)
        try:
            params, velocity, train_loss = _run_epoch(
                config, params, velocity, full_train_set.images, labels_1h, cfg,
                lam, epoch_stream, lr, mode)
        except DivergenceError as err:
            raise DivergenceError(str(err), epoch=epoch) from None
        history.rows.append(HistoryRow(epoch, lam, train_loss, float("nan")))
        lr *= cfg.lr_decay
    history.best_epoch = epochs_fixed - 1
    return params, history
