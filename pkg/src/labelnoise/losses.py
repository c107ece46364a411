"""The four training objectives.

All take raw logits (batch x c) plus integer labels and return a scalar
Tensor built from gradcore primitives, so every one of them is
differentiable end to end, including through the slack matrix of the
revision loss.  Probabilities are clamped at ``PROB_FLOOR`` before any log.

* baseline: categorical cross-entropy on g(x) = row_softmax(logits)
* forward: cross-entropy of the noise-adjusted posterior, -log((g T)[label])
* reweight: per-sample weight beta = g[label] / (g T)[label] applied to the
  plain cross-entropy term
* revision: the reweighted loss evaluated at a revised matrix built from an
  estimate plus a trainable slack
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import gradcore
from .errors import DomainError, ShapeMismatch
from .gradcore import Tensor
from .transition import RevisionMode, TransitionMatrix, validate

__all__ = [
    "PROB_FLOOR",
    "LossSpec",
    "ce_loss",
    "compute_loss",
    "forward_corrected_loss",
    "reweighted_loss",
    "revision_loss",
]

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossSpec:
    """Which objective to train, plus its matrix/mode configuration."""

    kind: str                                  # baseline_ce | forward | reweight | revision
    matrix: TransitionMatrix | None = None     # required for forward / reweight
    revision_mode: RevisionMode | None = None  # required for revision
    beta_stop_gradient: bool = False

    def __post_init__(self):
        kinds = ("baseline_ce", "forward", "reweight", "revision")
        if self.kind not in kinds:
            raise ValueError(f"kind must be one of {kinds}, got {self.kind!r}")
        needs_matrix = self.kind in ("forward", "reweight")
        if needs_matrix and self.matrix is None:
            raise ValueError(f"{self.kind} loss requires a transition matrix")
        if not needs_matrix and self.matrix is not None:
            raise ValueError(f"{self.kind} loss takes no transition matrix")
        if (self.kind == "revision") != (self.revision_mode is not None):
            raise ValueError("revision_mode is required iff kind == 'revision'")


def _check_labels(logits: Tensor, labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ShapeMismatch(f"need {n} labels for logits {logits.shape}, got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        bad = int(np.argmax((labels < 0) | (labels >= c)))
        raise ShapeMismatch(f"label {labels[bad]} at position {bad} outside [0, {c})")
    return labels


def _matrix_tensor(matrix, bypass_validation: bool = False) -> Tensor:
    entries = np.asarray(getattr(matrix, "entries", matrix), dtype=np.float64)
    already_checked = isinstance(matrix, TransitionMatrix) and matrix.validated
    if not bypass_validation and not already_checked:
        result = validate(entries)
        if not result.ok:
            detail = "; ".join(str(v) for v in result.violations)
            raise ValueError(f"transition matrix is not row-stochastic: {detail}")
    return Tensor(entries)


def _nll(probs: Tensor, labels: np.ndarray) -> Tensor:
    """Per-sample -log(probs[label]) with the probability floor applied."""
    picked = gradcore.gather_per_row(probs, labels)
    return gradcore.scalar_mul(gradcore.log(gradcore.clamp_min(picked, PROB_FLOOR)), -1.0)


def ce_loss(logits, labels) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    logits = gradcore.as_tensor(logits)
    labels = _check_labels(logits, labels)
    g = gradcore.row_softmax(logits)
    return gradcore.tensor_mean(_nll(g, labels))


def forward_corrected_loss(logits, labels, matrix, bypass_validation: bool = False) -> Tensor:
    """Cross-entropy of the transition-adjusted posterior.

    The adjusted noisy posterior for row vectors is ``g @ T`` (equivalently
    T-transpose applied to each column posterior).
    """
    logits = gradcore.as_tensor(logits)
    labels = _check_labels(logits, labels)
    t = _matrix_tensor(matrix, bypass_validation)
    g = gradcore.row_softmax(logits)
    adjusted = gradcore.matmul(g, t)
    return gradcore.tensor_mean(_nll(adjusted, labels))


def _beta_weighted_nll(g: Tensor, t: Tensor, labels: np.ndarray,
                       beta_stop_gradient: bool) -> Tensor:
    """mean over batch of beta * (-log g[label]), beta = g[label]/(gT)[label]."""
    adjusted = gradcore.matmul(g, t)
    numer = gradcore.gather_per_row(g, labels)
    denom = gradcore.gather_per_row(adjusted, labels)
    if np.any(denom.data == 0.0):
        bad = int(np.argmax(denom.data == 0.0))
        raise DomainError(
            f"reweighted loss: adjusted posterior is zero at sample {bad} "
            f"(label {labels[bad]})")
    beta = gradcore.div(numer, denom)
    if beta_stop_gradient:
        beta = gradcore.detach(beta)
    return gradcore.tensor_mean(gradcore.mul(beta, _nll(g, labels)))


def reweighted_loss(logits, labels, matrix, beta_stop_gradient: bool = False,
                    bypass_validation: bool = False) -> Tensor:
    """Importance-reweighted cross-entropy under a known transition matrix."""
    logits = gradcore.as_tensor(logits)
    labels = _check_labels(logits, labels)
    t = _matrix_tensor(matrix, bypass_validation)
    g = gradcore.row_softmax(logits)
    return _beta_weighted_nll(g, t, labels, beta_stop_gradient)


def revision_loss(logits, labels, t_hat, delta: Tensor, mode: RevisionMode,
                  beta_stop_gradient: bool = False) -> Tensor:
    """Reweighted loss through a revised matrix with a trainable slack.

    ``delta`` must be a tape leaf (watch it) so gradients reach it.  alpha
    mode folds in a damped slack and clips negatives: max(0, T + a*delta);
    softmax mode row-normalizes T + delta, which keeps every entry strictly
    positive and the loss nonnegative.
    """
    logits = gradcore.as_tensor(logits)
    labels = _check_labels(logits, labels)
    base = np.asarray(getattr(t_hat, "entries", t_hat), dtype=np.float64)
    if delta.shape != base.shape:
        raise ShapeMismatch(f"delta is {delta.shape}, expected {base.shape}")
    t_base = Tensor(base)

    if mode.mode == "softmax":
        t_eff = gradcore.row_softmax(gradcore.add(t_base, delta))
    else:
        t_eff = gradcore.relu(gradcore.add(t_base, gradcore.scalar_mul(delta, mode.alpha)))
    g = gradcore.row_softmax(logits)
    return _beta_weighted_nll(g, t_eff, labels, beta_stop_gradient)


def compute_loss(spec: LossSpec, logits, labels, delta: Tensor | None = None,
                 t_hat=None, bypass_validation: bool = False) -> Tensor:
    """Dispatch on a LossSpec; revision additionally needs (t_hat, delta)."""
    if spec.kind == "baseline_ce":
        return ce_loss(logits, labels)
    if spec.kind == "forward":
        return forward_corrected_loss(logits, labels, spec.matrix, bypass_validation)
    if spec.kind == "reweight":
        return reweighted_loss(logits, labels, spec.matrix,
                               spec.beta_stop_gradient, bypass_validation)
    if delta is None or t_hat is None:
        raise ValueError("revision loss needs both t_hat and a delta leaf")
    return revision_loss(logits, labels, t_hat, delta, spec.revision_mode,
                         spec.beta_stop_gradient)
