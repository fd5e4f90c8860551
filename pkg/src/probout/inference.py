"""Test-time prediction by stochastic model averaging.

predict() averages the softmax outputs of E independently sampled
network instantiations (probability space, not logits) and labels by
the argmax of the average. The caller is expected to have halved the
weights once if the model was trained with dropout; sampling layers
then draw from the plain Boltzmann probabilities, which equal the
dropout-augmented probabilities after rescaling out the dropout mass.

Two deterministic ablations are available: replacing the sampling with
a maximum, or with the probability-weighted expected activation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ModeError
from .network import ModelConfig, model_forward
from .numerics import RngStream, mix_seed
from .units import MODE_INFER_MAX, MODE_INFER_PROB_WEIGHT, MODE_INFER_SAMPLE

MODE_SAMPLE_AVERAGE = "sample-average"
MODE_MAX_AT_TEST = "max-at-test"
MODE_PROB_WEIGHT_AT_TEST = "prob-weight-at-test"

_DETERMINISTIC_MODES = {
    MODE_MAX_AT_TEST: MODE_INFER_MAX,
    MODE_PROB_WEIGHT_AT_TEST: MODE_INFER_PROB_WEIGHT,
}


@dataclass(frozen=True)
class AveragingConfig:
    evaluations: int = 50  # E
    seed: int = 0
    mode: str = MODE_SAMPLE_AVERAGE

    def __post_init__(self):
        if self.mode not in (MODE_SAMPLE_AVERAGE, MODE_MAX_AT_TEST, MODE_PROB_WEIGHT_AT_TEST):
            raise ModeError(f"unknown inference mode {self.mode!r}")
        if self.mode == MODE_SAMPLE_AVERAGE and self.evaluations < 1:
            raise ValueError("need at least one model evaluation")


def predict_deterministic(params, x, config: ModelConfig, mode: str, lambdas=None):
    """Single deterministic pass: max or probability-weighted pooling."""
    if mode not in _DETERMINISTIC_MODES:
        raise ModeError(f"not a deterministic inference mode: {mode!r}")
    res = model_forward(x, params, config, _DETERMINISTIC_MODES[mode], lambdas=lambdas)
    probs = res.probs
    labels = np.argmax(probs, axis=-1)
    return probs, labels


def predict(params, x, config: ModelConfig, cfg: AveragingConfig, lambdas=None):
    """Average E sampled softmax outputs; label by argmax (lowest index on ties).

    Each (example, evaluation) pair gets its own stream forked from the
    seed, so predictions do not depend on batching or evaluation order.
    """
    if cfg.mode in _DETERMINISTIC_MODES:
        return predict_deterministic(params, x, config, cfg.mode, lambdas=lambdas)
    x = np.asarray(x)
    single = x.ndim == 3
    xb = x[None] if single else x
    n = xb.shape[0]
    root = RngStream(cfg.seed)
    example_streams = [root.fork(i) for i in range(n)]
    acc = np.zeros((n, config.classes), dtype=np.float64)
    for e in range(cfg.evaluations):
        streams = [s.fork(e) for s in example_streams]
        res = model_forward(xb, params, config, MODE_INFER_SAMPLE, rng=streams,
                            lambdas=lambdas)
        acc += res.probs
    avg = acc / cfg.evaluations
    labels = np.argmax(avg, axis=-1)
    if single:
        return avg[0], int(labels[0])
    return avg, labels


def classification_error(params, dataset, config: ModelConfig, cfg: AveragingConfig,
                         lambdas=None) -> float:
    """Misclassified percentage of the dataset under the configured inference."""
    if len(dataset.images) == 0:
        raise DataError("dataset is empty")
    _, labels = predict(params, dataset.images, config, cfg, lambdas=lambdas)
    return float(100.0 * np.mean(labels != dataset.labels))


@dataclass
class CurveRow:
    evaluations: int
    mean_error: float
    std_error: float


def averaging_curve(params, dataset, config: ModelConfig, e_values, repeats: int,
                    seed: int = 0, lambdas=None) -> list[CurveRow]:
    """Mean and spread of the error for each model-evaluation count E.

    Every (E, repeat) measurement reruns the full sampled prediction
    with its own derived seed.
    """
    if not e_values:
        raise ValueError("need at least one E value")
    rows = []
    for e in e_values:
        errs = [
            classification_error(
                params, dataset, config,
                AveragingConfig(evaluations=e, seed=mix_seed(seed, e, r)),
                lambdas=lambdas,
            )
            for r in range(repeats)
        ]
        errs = np.asarray(errs)
        std = float(errs.std(ddof=1)) if len(errs) > 1 else 0.0
        rows.append(CurveRow(e, float(errs.mean()), std))
    return rows


def write_curve_csv(rows: list[CurveRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["evaluations", "mean_error_percent", "std_percent"])
        for r in rows:
            w.writerow([r.evaluations, f"{r.mean_error:.6f}", f"{r.std_error:.6f}"])
