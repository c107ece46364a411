"""Transition matrices: validation, anchor-point estimation, revision
transforms, element-wise averaging, and the relative reconstruction error.

A flip matrix T has ``T[i, j] = P(observed class j | true class i)``; valid
matrices are nonnegative with unit row sums.  Revision produces matrices
that may leave the simplex (alpha mode does not renormalize), so file and
constructor paths accept an explicit validation bypass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError, ParseError, ShapeMismatch

__all__ = [
    "RevisionMode",
    "TransitionMatrix",
    "Violation",
    "ValidationResult",
    "circulant_matrix",
    "effective_matrix",
    "estimate_anchor",
    "load_matrix",
    "mean_matrix",
    "rre",
    "save_matrix",
    "symmetric_matrix",
    "validate",
]

ROW_SUM_ATOL = 1e-6


@dataclass(frozen=True)
class TransitionMatrix:
    """c x c flip-probability matrix; ``validated`` records whether the
    row-stochastic check passed at construction."""

    entries: np.ndarray
    validated: bool = False

    def __post_init__(self):
        entries = np.array(self.entries, dtype=np.float64, order="C")
        if entries.ndim != 2 or entries.shape[0] != entries.shape[1]:
            raise ShapeMismatch(f"transition matrix must be square, got {entries.shape}")
        entries.flags.writeable = False
        object.__setattr__(self, "entries", entries)

    @property
    def c(self) -> int:
        return self.entries.shape[0]


@dataclass(frozen=True)
class RevisionMode:
    """How a slack matrix is folded into an estimate: ``alpha`` adds a damped
    slack then clips negatives; ``softmax`` renormalizes each row."""

    mode: str             # "alpha" | "softmax"
    alpha: float = 0.01

    def __post_init__(self):
        if self.mode not in ("alpha", "softmax"):
            raise ValueError(f"mode must be 'alpha' or 'softmax', got {self.mode!r}")
        if self.mode == "alpha" and self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class Violation:
    kind: str             # "negative_entry" | "row_sum"
    row: int
    col: int | None
    value: float

    def __str__(self) -> str:
        if self.kind == "negative_entry":
            return f"entry ({self.row}, {self.col}) is negative: {self.value!r}"
        return f"row {self.row} sums to {self.value!r}, expected 1 +/- {ROW_SUM_ATOL}"


@dataclass(frozen=True)
class ValidationResult:
    matrix: TransitionMatrix | None
    violations: tuple[Violation, ...]

    @property
    def ok(self) -> bool:
        return not self.violations


def validate(entries, atol: float = ROW_SUM_ATOL) -> ValidationResult:
    """Check nonnegativity and unit row sums; report every violating cell."""
    arr = np.asarray(getattr(entries, "entries", entries), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
        raise ShapeMismatch(f"transition matrix must be square, got {arr.shape}")
    violations: list[Violation] = []
    for i, j in zip(*np.nonzero(arr < 0)):
        violations.append(Violation("negative_entry", int(i), int(j), float(arr[i, j])))
    sums = arr.sum(axis=1)
    for i in np.nonzero(np.abs(sums - 1.0) > atol)[0]:
        violations.append(Violation("row_sum", int(i), None, float(sums[i])))
    if violations:
        return ValidationResult(matrix=None, violations=tuple(violations))
    return ValidationResult(matrix=TransitionMatrix(arr, validated=True), violations=())


def require_valid(entries, what: str = "transition matrix") -> TransitionMatrix:
    """validate() that raises, for call sites where an invalid T is a bug."""
    result = validate(entries)
    if not result.ok:
        detail = "; ".join(str(v) for v in result.violations)
        raise ValueError(f"{what} is not row-stochastic: {detail}")
    return result.matrix


def circulant_matrix(c: int, rate: float) -> TransitionMatrix:
    """Each class flips to the next one (mod c) with the given rate."""
    entries = np.eye(c) * (1.0 - rate)
    for i in range(c):
        entries[i, (i + 1) % c] = rate
    return TransitionMatrix(entries, validated=True)


def symmetric_matrix(c: int, rate: float) -> TransitionMatrix:
    """Each class flips uniformly to every other class, total mass ``rate``."""
    entries = np.full((c, c), rate / (c - 1))
    np.fill_diagonal(entries, 1.0 - rate)
    return TransitionMatrix(entries, validated=True)


def effective_matrix(t_hat, delta, mode: RevisionMode) -> np.ndarray:
    """Fold a slack matrix into an estimate.

    softmax mode: row-softmax of (t_hat + delta) -- strictly positive rows
    summing to 1.  alpha mode: max(0, t_hat + alpha * delta) -- nonnegative,
    rows deliberately NOT renormalized so reconstruction error is measured
    on the raw revised matrix.
    """
    base = np.asarray(getattr(t_hat, "entries", t_hat), dtype=np.float64)
    slack = np.asarray(delta, dtype=np.float64)
    if base.shape != slack.shape:
        raise ShapeMismatch(f"delta is {slack.shape}, expected {base.shape}")
    if mode.mode == "softmax":
        shifted = base + slack
        shifted = shifted - shifted.max(axis=1, keepdims=True)
        out = np.exp(shifted)
        out /= out.sum(axis=1, keepdims=True)
        return out
    return np.maximum(base + mode.alpha * slack, 0.0)


def estimate_anchor(posteriors: np.ndarray, percentile: float = 97.0,
                    top_k: int = 1) -> TransitionMatrix:
    """Anchor-point estimate of the flip matrix from noisy-class posteriors.

    For each class i, samples are ranked by their posterior for noisy class
    i; the sample sitting at the given percentile of that score distribution
    is taken as the anchor (percentile 100 = the single highest scorer).
    Row i is the mean posterior row of the ``top_k`` samples centered on
    that rank, clipped to the valid range.
    """
    post = np.asarray(posteriors, dtype=np.float64)
    if post.ndim != 2:
        raise ShapeMismatch(f"posteriors must be 2-d, got {post.shape}")
    n, c = post.shape
    if not 0.0 < percentile <= 100.0:
        raise ValueError(f"percentile must be in (0, 100], got {percentile}")
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    if n < top_k:
        raise ValueError(f"need at least top_k={top_k} samples, got {n}")

    rows = np.empty((c, c))
    for i in range(c):
        order = np.argsort(-post[:, i], kind="stable")
        rank = int(round((100.0 - percentile) / 100.0 * (n - 1)))
        start = min(max(rank - top_k // 2, 0), n - top_k)
        chosen = order[start:start + top_k]
        rows[i] = post[chosen].mean(axis=0)
    return TransitionMatrix(rows, validated=True)


def rre(reference, estimate) -> float:
    """Relative reconstruction error ||A - B||_F / ||A||_F with A the
    reference matrix."""
    a = np.asarray(getattr(reference, "entries", reference), dtype=np.float64)
    b = np.asarray(getattr(estimate, "entries", estimate), dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"cannot compare {a.shape} with {b.shape}")
    denom = np.linalg.norm(a)
    if denom == 0.0:
        raise DomainError("rre: reference matrix has zero Frobenius norm")
    return float(np.linalg.norm(a - b) / denom)


def mean_matrix(estimates) -> np.ndarray:
    """Element-wise arithmetic mean of a nonempty list of same-shaped matrices."""
    arrays = [np.asarray(getattr(e, "entries", e), dtype=np.float64) for e in estimates]
    if not arrays:
        raise ValueError("mean_matrix: empty list")
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ShapeMismatch(f"mixed shapes {shape} and {a.shape}")
    return np.mean(arrays, axis=0)


def save_matrix(matrix, path) -> None:
    entries = np.asarray(getattr(matrix, "entries", matrix), dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        for row in entries:
            fh.write(" ".join(repr(float(x)) for x in row) + "\n")


def load_matrix(path, validate_rows: bool = True) -> TransitionMatrix:
    """Read a c x c matrix (c lines of c decimals).  Validation can be
    bypassed for revised matrices whose rows need not sum to 1."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise ParseError(f"{path}: empty matrix file")
    c = len(lines)
    entries = np.empty((c, c))
    for i, line in enumerate(lines, start=1):
        parts = line.split()
        if len(parts) != c:
            raise ParseError(f"{path}:{i}: expected {c} values, got {len(parts)}")
        try:
            entries[i - 1] = [float(x) for x in parts]
        except ValueError:
            raise ParseError(f"{path}:{i}: bad numeric value")
    if validate_rows:
        result = validate(entries)
        if not result.ok:
            detail = "; ".join(str(v) for v in result.violations)
            raise ParseError(f"{path}: not row-stochastic ({detail})")
        return result.matrix
    return TransitionMatrix(entries, validated=False)
