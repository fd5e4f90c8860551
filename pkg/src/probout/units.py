"""Maxout and probout subspace pooling for a single unit.

A unit owns k linear responses z of the same input. Maxout emits the
largest response; probout samples one response from a Boltzmann
distribution over the k values, optionally extended with a 50% dropout
outcome folded directly into the same multinomial. Functions here work
on one unit's 1-d response vector; the batched network layer reuses the
same conventions over whole feature maps.

Selection probabilities are always computed in float64 regardless of the
working dtype, so probability identities hold to 1e-12 even when the
activations themselves are float32.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ModeError
from .numerics import RngStream, affine, multinomial_draw

MODE_TRAIN_SAMPLE = "train-sample"
MODE_TRAIN_SAMPLE_DROPOUT = "train-sample-dropout"
MODE_INFER_SAMPLE = "infer-sample"
MODE_INFER_MAX = "infer-max"
MODE_INFER_PROB_WEIGHT = "infer-prob-weight"

MODES = frozenset(
    {
        MODE_TRAIN_SAMPLE,
        MODE_TRAIN_SAMPLE_DROPOUT,
        MODE_INFER_SAMPLE,
        MODE_INFER_MAX,
        MODE_INFER_PROB_WEIGHT,
    }
)

#: Selection index recording that the dropout outcome was drawn.
DROPPED = -1


@dataclass(frozen=True)
class ProboutConfig:
    """Selection temperature and operating mode for one probout unit."""

    lambda_: float
    mode: str = MODE_TRAIN_SAMPLE

    def __post_init__(self):
        if not self.lambda_ > 0:
            raise ValueError(f"lambda must be positive, got {self.lambda_}")
        if self.mode not in MODES:
            raise ModeError(f"unknown mode {self.mode!r}")


@dataclass(frozen=True)
class Selection:
    """Outcome of one subspace selection: which response, and its value."""

    index: int  # position into z, or DROPPED
    value: float

    @property
    def dropped(self) -> bool:
        return self.index == DROPPED


def linear_subspace(v, W, b) -> np.ndarray:
    """The k linear responses z_i = w_i . v + b_i of one unit."""
    return affine(W, v, b)


def maxout_forward(z) -> Selection:
    """Largest response; ties break to the lowest index."""
    z = np.asarray(z)
    idx = int(np.argmax(z))
    return Selection(idx, float(z[idx]))


def boltzmann_probs(z, lambda_: float) -> np.ndarray:
    """Selection probabilities p_i proportional to exp(lambda * z_i).

    Computed with the max subtracted from every response first, which is
    mathematically identical and cannot overflow for any lambda * z.
    """
    if not lambda_ > 0:
        raise ValueError(f"lambda must be positive, got {lambda_}")
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(lambda_ * (z - z.max()))
    return e / e.sum()


def dropout_probs(z, lambda_: float) -> np.ndarray:
    """(k+1)-way probabilities with a fixed 0.5 dropout outcome at index 0."""
    p = boltzmann_probs(z, lambda_)
    return np.concatenate(([0.5], 0.5 * p))


def inference_rescale(p_hat) -> np.ndarray:
    """Strip the dropout outcome and renormalize the remaining mass."""
    p_hat = np.asarray(p_hat, dtype=np.float64)
    keep = 1.0 - p_hat[0]
    if keep <= 0:
        raise ValueError("degenerate dropout probability: no mass left to rescale")
    return p_hat[1:] / keep


def probability_weighted_value(z, lambda_: float) -> float:
    """Deterministic expected activation: sum_i p_i * z_i."""
    z = np.asarray(z, dtype=np.float64)
    return float(boltzmann_probs(z, lambda_) @ z)


def probout_select(z, cfg: ProboutConfig, rng: RngStream | None = None) -> Selection:
    """Sample one response according to the configured mode.

    Sampling modes consume exactly one multinomial draw from ``rng``;
    infer-max consumes nothing. Probability weighting is a deterministic
    value, not a selection, so requesting it here is a mode error.
    """
    z = np.asarray(z)
    if cfg.mode == MODE_INFER_MAX:
        return maxout_forward(z)
    if cfg.mode == MODE_INFER_PROB_WEIGHT:
        raise ModeError("probability weighting has no selection; use probability_weighted_value")
    if rng is None:
        raise ValueError(f"mode {cfg.mode!r} requires an rng stream")
    if cfg.mode == MODE_TRAIN_SAMPLE_DROPOUT:
        outcome = multinomial_draw(dropout_probs(z, cfg.lambda_), rng)
        if outcome == 0:
            return Selection(DROPPED, 0.0)
        return Selection(outcome - 1, float(z[outcome - 1]))
    # train-sample and infer-sample share the plain Boltzmann draw: the
    # test-time rescaling of the dropout-augmented probabilities recovers
    # exactly this distribution.
    idx = multinomial_draw(boltzmann_probs(z, cfg.lambda_), rng)
    return Selection(idx, float(z[idx]))


def subspace_backward(grad_out: float, sel: Selection, k: int) -> np.ndarray:
    """Route the incoming gradient to the selected response.

    The selection index is a constant of the forward pass: no gradient
    flows into the sampling probabilities. A dropped unit blocks all
    flow.
    """
    grad = np.zeros(k, dtype=np.float64)
    if sel.dropped:
        return grad
    if not 0 <= sel.index < k:
        raise IndexError(f"selection index {sel.index} out of range for k={k}")
    grad[sel.index] = grad_out
    return grad
