"""Synthetic datasets, class-conditional label flipping, splits, and the
dataset text format.

File format (UTF-8 text): first line ``n d c``, then one line per sample
``clean_label,noisy_label,f1,...,fd`` where ``noisy_label`` is ``-`` when
absent.  Floats are written with round-trip precision, so save/load is an
exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ParseError, ShapeMismatch, UsageError

__all__ = [
    "BlobSpec",
    "LabeledDataset",
    "default_blob_spec",
    "empirical_flip_matrix",
    "generate_blobs",
    "inject_noise",
    "load_dataset",
    "save_dataset",
    "simplex_means",
    "split",
]


@dataclass(frozen=True)
class LabeledDataset:
    """Features plus clean labels plus (optionally) noisy labels."""

    features: np.ndarray          # n x d float64
    clean_labels: np.ndarray      # n int64 in [0, c)
    c: int
    noisy_labels: np.ndarray | None = None
    provenance: str = ""

    def __post_init__(self):
        # Copy before locking so a caller's array never gets frozen.
        features = np.array(self.features, dtype=np.float64, order="C")
        clean = np.array(self.clean_labels, dtype=np.int64)
        object.__setattr__(self, "features", features)
        object.__setattr__(self, "clean_labels", clean)
        if features.ndim != 2:
            raise ShapeMismatch(f"features must be 2-d, got {features.shape}")
        if clean.shape != (features.shape[0],):
            raise ShapeMismatch(
                f"{features.shape[0]} samples but {clean.shape} clean labels")
        if not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite values")
        if clean.size and (clean.min() < 0 or clean.max() >= self.c):
            raise ValueError(f"clean labels outside [0, {self.c})")
        if self.noisy_labels is not None:
            noisy = np.array(self.noisy_labels, dtype=np.int64)
            object.__setattr__(self, "noisy_labels", noisy)
            if noisy.shape != clean.shape:
                raise ShapeMismatch(
                    f"{clean.shape[0]} samples but {noisy.shape} noisy labels")
            if noisy.size and (noisy.min() < 0 or noisy.max() >= self.c):
                raise ValueError(f"noisy labels outside [0, {self.c})")
        for arr in (self.features, self.clean_labels, self.noisy_labels):
            if arr is not None:
                arr.flags.writeable = False

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def training_labels(self) -> np.ndarray:
        """Noisy labels when present, else clean (clean data has no flips)."""
        return self.noisy_labels if self.noisy_labels is not None else self.clean_labels


@dataclass(frozen=True)
class BlobSpec:
    """Isotropic Gaussian blobs, one per class."""

    c: int
    d: int
    n_per_class: int
    class_means: np.ndarray       # c x d
    noise_sigma: float
    seed: int

    def __post_init__(self):
        means = np.array(self.class_means, dtype=np.float64, order="C")
        object.__setattr__(self, "class_means", means)
        if means.shape != (self.c, self.d):
            raise ShapeMismatch(
                f"class_means must be {(self.c, self.d)}, got {means.shape}")
        if self.n_per_class < 1:
            raise ValueError("n_per_class must be >= 1")
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")
        means.flags.writeable = False


def simplex_means(c: int, d: int, separation: float) -> np.ndarray:
    """``c`` points in ``d`` dimensions with all pairwise distances equal to
    ``separation`` (scaled standard-basis vectors; requires d >= c)."""
    if d < c:
        raise ValueError(f"need d >= c for simplex means, got c={c}, d={d}")
    means = np.zeros((c, d))
    scale = separation / np.sqrt(2.0)
    for k in range(c):
        means[k, k] = scale
    return means


def default_blob_spec(c: int = 4, d: int = 16, n_per_class: int = 2500,
                      noise_sigma: float = 1.0, separation_sigmas: float = 6.0,
                      seed: int = 0) -> BlobSpec:
    """Well-separated default: means on a simplex ``separation_sigmas`` apart."""
    means = simplex_means(c, d, separation_sigmas * noise_sigma)
    return BlobSpec(c=c, d=d, n_per_class=n_per_class, class_means=means,
                    noise_sigma=noise_sigma, seed=seed)


def generate_blobs(spec: BlobSpec) -> LabeledDataset:
    """Draw ``n_per_class`` samples around each class mean; deterministic in
    the spec seed; no noisy labels."""
    rng = np.random.default_rng(spec.seed)
    n = spec.c * spec.n_per_class
    labels = np.repeat(np.arange(spec.c, dtype=np.int64), spec.n_per_class)
    features = spec.class_means[labels] + spec.noise_sigma * rng.standard_normal((n, spec.d))
    return LabeledDataset(
        features=features, clean_labels=labels, c=spec.c,
        provenance=f"blobs(c={spec.c}, d={spec.d}, n_per_class={spec.n_per_class}, "
                   f"sigma={spec.noise_sigma}, seed={spec.seed})")


def inject_noise(data: LabeledDataset, transition, seed: int) -> LabeledDataset:
    """Flip each clean label i to j with probability ``T[i, j]``.

    ``transition`` is a TransitionMatrix or a row-stochastic c x c array.
    Features and clean labels are preserved bit-exactly.
    """
    entries = np.asarray(getattr(transition, "entries", transition), dtype=np.float64)
    if entries.shape != (data.c, data.c):
        raise ShapeMismatch(
            f"transition is {entries.shape} but dataset has {data.c} classes")
    rng = np.random.default_rng(seed)
    thresholds = np.cumsum(entries, axis=1)
    thresholds[:, -1] = 1.0  # guard against rounding in the final bin
    draws = rng.random(data.n)
    noisy = np.empty(data.n, dtype=np.int64)
    for k in range(data.c):
        mask = data.clean_labels == k
        noisy[mask] = np.searchsorted(thresholds[k], draws[mask], side="right")
    noisy = np.minimum(noisy, data.c - 1)
    return replace(data, noisy_labels=noisy,
                   provenance=f"{data.provenance} + noise(seed={seed})")


def empirical_flip_matrix(data: LabeledDataset) -> np.ndarray:
    """Row-normalized contingency table of clean vs noisy labels.

    Test oracle for :func:`inject_noise`; requires every class to appear
    among the clean labels.
    """
    if data.noisy_labels is None:
        raise UsageError("dataset has no noisy labels")
    counts = np.zeros((data.c, data.c))
    np.add.at(counts, (data.clean_labels, data.noisy_labels), 1.0)
    row_totals = counts.sum(axis=1)
    missing = np.nonzero(row_totals == 0)[0]
    if missing.size:
        raise ValueError(f"class {int(missing[0])} has no clean samples")
    return counts / row_totals[:, None]


def split(data: LabeledDataset, train_fraction: float, seed: int
          ) -> tuple[LabeledDataset, LabeledDataset]:
    """Disjoint shuffled partition; the union is the input."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = int(round(data.n * train_fraction))
    if n_train == 0 or n_train == data.n:
        raise ValueError(
            f"fraction {train_fraction} of {data.n} samples leaves an empty side")
    perm = np.random.default_rng(seed).permutation(data.n)
    return _take(data, perm[:n_train]), _take(data, perm[n_train:])


def _take(data: LabeledDataset, idx: np.ndarray) -> LabeledDataset:
    return LabeledDataset(
        features=data.features[idx],
        clean_labels=data.clean_labels[idx],
        c=data.c,
        noisy_labels=None if data.noisy_labels is None else data.noisy_labels[idx],
        provenance=data.provenance)


def save_dataset(data: LabeledDataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{data.n} {data.d} {data.c}\n")
        noisy = data.noisy_labels
        for i in range(data.n):
            noisy_field = "-" if noisy is None else str(int(noisy[i]))
            feats = ",".join(repr(float(x)) for x in data.features[i])
            fh.write(f"{int(data.clean_labels[i])},{noisy_field},{feats}\n")


def load_dataset(path) -> LabeledDataset:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file")
    header = lines[0].split()
    if len(header) != 3:
        raise ParseError(f"{path}:1: header must be 'n d c', got {lines[0]!r}")
    try:
        n, d, c = (int(x) for x in header)
    except ValueError:
        raise ParseError(f"{path}:1: non-integer header {lines[0]!r}")
    if len(lines) - 1 != n:
        raise ParseError(f"{path}: header promises {n} rows, found {len(lines) - 1}")

    features = np.empty((n, d))
    clean = np.empty(n, dtype=np.int64)
    noisy = np.empty(n, dtype=np.int64)
    any_noisy = False
    all_noisy = True
    for i, line in enumerate(lines[1:], start=2):
        parts = line.split(",")
        if len(parts) != d + 2:
            raise ParseError(f"{path}:{i}: expected {d + 2} fields, got {len(parts)}")
        try:
            clean[i - 2] = int(parts[0])
        except ValueError:
            raise ParseError(f"{path}:{i}: bad clean label {parts[0]!r}")
        if not 0 <= clean[i - 2] < c:
            raise ParseError(f"{path}:{i}: clean label {parts[0]} outside [0, {c})")
        if parts[1] == "-":
            all_noisy = False
            noisy[i - 2] = 0
        else:
            try:
                noisy[i - 2] = int(parts[1])
            except ValueError:
                raise ParseError(f"{path}:{i}: bad noisy label {parts[1]!r}")
            if not 0 <= noisy[i - 2] < c:
                raise ParseError(f"{path}:{i}: noisy label {parts[1]} outside [0, {c})")
            any_noisy = True
        try:
            features[i - 2] = [float(x) for x in parts[2:]]
        except ValueError:
            raise ParseError(f"{path}:{i}: bad feature value")
    if any_noisy and not all_noisy:
        raise ParseError(f"{path}: noisy labels must be present for all rows or none")
    return LabeledDataset(features=features, clean_labels=clean, c=c,
                          noisy_labels=noisy if any_noisy else None,
                          provenance=f"file:{path}")
