"""Losses and self-paced learning.

The training objective is the weighted multi-task sum::

    L = l1 * L_blastic + l2 * L_lytic + l3 * L_bq + L_pi

with every task term a v-weighted mean of per-sample cross entropies. Under
soft sharing a squared-Frobenius penalty ties the two backbones' block
outputs together. Self-paced learning picks v in {0, 1}^n by thresholding
per-sample losses against a pace that grows every epoch.
"""
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ops
from .autodiff.tensor import Tensor, as_tensor


class SplError(RuntimeError):
    """Self-paced selection produced an unusable sample set."""


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 2.0  # blastic
    lambda2: float = 2.0  # lytic
    lambda3: float = 2.0  # bone quality (combined)

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class SoftShareWeights:
    lambdas: tuple = (1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "lambdas", tuple(float(x) for x in self.lambdas))
        if len(self.lambdas) != 4 or min(self.lambdas) < 0:
            raise ValueError("soft-share weights are four nonnegative floats")


def smooth_labels(class_index, num_classes, epsilon):
    """Smoothed one-hot: ``1 - eps + eps/K`` on the true class, ``eps/K`` elsewhere."""
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    if not 0 <= class_index < num_classes:
        raise ValueError(f"class index {class_index} out of range for {num_classes} classes")
    if not 0.0 <= epsilon < 1.0:
        raise ValueError(f"epsilon must lie in [0, 1), got {epsilon}")
    off = epsilon / num_classes
    dist = np.full(num_classes, off)
    # fill the true class last so the row sums to 1 up to a single rounding
    dist[class_index] = 1.0 - off * (num_classes - 1)
    return dist


def smooth_targets(labels, num_classes, epsilon):
    """Row-stacked :func:`smooth_labels` for an integer label vector."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError("label out of range")
    off = epsilon / num_classes
    out = np.full((labels.size, num_classes), off)
    out[np.arange(labels.size), labels] = 1.0 - off * (num_classes - 1)
    return out


def task_losses(output, targets):
    """Per-sample cross entropies for each task head.

    ``targets`` maps ``blastic``, ``lytic``, ``bq``, ``pi`` to target
    distributions; returns the same keys mapped to ``[N]`` loss tensors.
    """
    return {
        "blastic": ops.softmax_cross_entropy(output.blastic_logits, targets["blastic"]),
        "lytic": ops.softmax_cross_entropy(output.lytic_logits, targets["lytic"]),
        "bq": ops.softmax_cross_entropy(output.bq_logits, targets["bq"]),
        "pi": ops.softmax_cross_entropy(output.pi_logits, targets["pi"]),
    }


def overall_loss(losses, weights=LossWeights(), v=None):
    """Weighted multi-task objective as a differentiable scalar.

    ``losses`` is a mapping with keys ``blastic``, ``lytic``, ``bq``, ``pi``
    (or a 4-sequence in that order) of per-sample loss vectors. Each term is
    the mean over all n samples of ``v_i * loss_i``.
    """
    if not isinstance(losses, dict):
        losses = dict(zip(("blastic", "lytic", "bq", "pi"), losses))
    terms = {k: as_tensor(losses[k]) for k in ("blastic", "lytic", "bq", "pi")}
    terms = {k: t if t.ndim else ops.mul(t, np.ones(1)) for k, t in terms.items()}
    n = terms["blastic"].shape[0]
    if any(t.shape != (n,) for t in terms.values()):
        raise ValueError("per-task loss vectors must share one length")
    v = np.ones(n) if v is None else np.asarray(v, dtype=np.float64)
    if v.shape != (n,):
        raise ValueError(f"sample weights have shape {v.shape}, expected ({n},)")

    def term(t):
        return ops.mean(ops.mul(t, v))

    coeffs = (weights.lambda1, weights.lambda2, weights.lambda3, 1.0)
    total = None
    for c, key in zip(coeffs, ("blastic", "lytic", "bq", "pi")):
        part = ops.mul(term(terms[key]), c)
        total = part if total is None else ops.add(total, part)
    return total


def per_sample_objective(losses, weights=LossWeights(), include_pi=True):
    """Composite per-sample loss used as the SPL difficulty score (numpy)."""
    data = {k: (v.data if isinstance(v, Tensor) else np.asarray(v)) for k, v in losses.items()}
    score = weights.lambda1 * data["blastic"] + weights.lambda2 * data["lytic"] + weights.lambda3 * data["bq"]
    if include_pi:
        score = score + data["pi"]
    return score


def soft_share_penalty(features_a, features_b, weights=SoftShareWeights()):
    """``sum_i lambda_i * ||f_a^i - f_b^i||_F^2`` over the four dense blocks."""
    if len(features_a) != 4 or len(features_b) != 4:
        raise ValueError("soft-share penalty needs four feature maps per backbone")
    total = None
    for i, (fa, fb, lam) in enumerate(zip(features_a, features_b, weights.lambdas)):
        fa, fb = as_tensor(fa), as_tensor(fb)
        if fa.shape != fb.shape:
            raise ValueError(f"block {i + 1}: feature shapes {fa.shape} and {fb.shape} differ")
        part = ops.mul(ops.square_sum(ops.sub(fa, fb)), lam)
        total = part if total is None else ops.add(total, part)
    return total


# self-paced learning

def spl_weights(losses, pace_lambda):
    """Closed-form sample selection: ``v_i = 1`` iff ``loss_i < pace``."""
    losses = np.asarray(losses, dtype=np.float64)
    if np.isnan(losses).any():
        raise ValueError("NaN in per-sample losses")
    if not pace_lambda > 0:
        raise ValueError(f"pace must be positive, got {pace_lambda}")
    return (losses < pace_lambda).astype(np.int8)


def spl_objective(losses, v, pace_lambda):
    """Inner objective ``sum v_i L_i - lambda * sum v_i`` for fixed model weights."""
    losses = np.asarray(losses, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return float(np.dot(v, losses) - pace_lambda * v.sum())


@dataclass
class SplState:
    """Pace and current selection. ``pace_lambda`` is None until the first epoch."""

    start_percentile: float = 60.0
    mu: float = 1.3
    pace_lambda: float = None
    v: np.ndarray = field(default=None, repr=False)
    epochs_seen: int = 0

    def __post_init__(self):
        if not 0.0 < self.start_percentile < 100.0:
            raise ValueError("start_percentile must lie in (0, 100)")
        if not self.mu > 1.0:
            raise ValueError("mu must exceed 1 for the curriculum to grow")

    @property
    def selected_fraction(self):
        return float(np.mean(self.v)) if self.v is not None and len(self.v) else 0.0


def spl_advance(state, epoch_losses):
    """Grow the pace (percentile on first call, then times mu) and reselect."""
    epoch_losses = np.asarray(epoch_losses, dtype=np.float64)
    if epoch_losses.size == 0:
        raise ValueError("spl_advance needs at least one loss")
    if state.pace_lambda is None:
        pace = float(np.percentile(epoch_losses, state.start_percentile))
    else:
        pace = state.pace_lambda * state.mu
    # a percentile of all-zero losses would give a non-positive pace
    pace = max(pace, np.finfo(float).tiny)
    return replace(state, pace_lambda=pace, v=spl_weights(epoch_losses, pace),
                   epochs_seen=state.epochs_seen + 1)
