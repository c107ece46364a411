"""Multi-layer perceptron producing logits and class posteriors.

Layers are affine + ReLU with optional inverted dropout after each hidden
activation.  Inference never touches the tape; training-mode forward records
every op so the losses can differentiate through the whole chain.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import gradcore, kernels
from .errors import ParseError, ShapeMismatch
from .gradcore import Tensor

__all__ = [
    "MlpConfig",
    "MlpParams",
    "forward",
    "init_mlp",
    "load_params",
    "predict_logits",
    "predict_proba",
    "save_params",
]


@dataclass(frozen=True)
class MlpConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64, 32)
    class_count: int = 4
    dropout_rate: float = 0.2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        dims = (self.input_dim, *self.hidden_dims)
        if any(d < 1 for d in dims):
            raise ValueError(f"all dimensions must be >= 1, got {dims}")
        if self.class_count < 2:
            raise ValueError(f"need at least 2 classes, got {self.class_count}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")

    @property
    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.class_count)


@dataclass
class MlpParams:
    """Per-layer weights and biases; replaced wholesale by optimizer steps."""

    config: MlpConfig
    weights: list[Tensor]
    biases: list[Tensor]

    def leaves(self) -> list[Tensor]:
        """All trainable tensors in a stable order (w0, b0, w1, b1, ...)."""
        out: list[Tensor] = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_leaves(self, leaves: list[Tensor]) -> "MlpParams":
        """Rebuild the same architecture around updated leaf tensors."""
        n = len(self.weights)
        if len(leaves) != 2 * n:
            raise ShapeMismatch(f"expected {2 * n} leaves, got {len(leaves)}")
        return MlpParams(config=self.config,
                         weights=[leaves[2 * i] for i in range(n)],
                         biases=[leaves[2 * i + 1] for i in range(n)])


def init_mlp(config: MlpConfig) -> MlpParams:
    """Zero biases, Gaussian weights scaled by 1/sqrt(fan_in)."""
    rng = np.random.default_rng(config.seed)
    dims = config.layer_dims
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        w = rng.standard_normal((fan_in, fan_out)) / np.sqrt(fan_in)
        weights.append(Tensor(w))
        biases.append(Tensor(np.zeros(fan_out)))
    return MlpParams(config=config, weights=weights, biases=biases)


def forward(params: MlpParams, batch, train_mode: bool = False,
            dropout_seed: int = 0) -> Tensor:
    """Logits for a batch (rows are samples).

    With ``train_mode`` set, inverted dropout masks (scale 1/(1-rate)) are
    applied after each hidden ReLU, drawn deterministically from
    ``dropout_seed``; evaluation ignores the seed entirely.
    """
    x = gradcore.as_tensor(batch)
    if x.data.ndim != 2 or x.data.shape[1] != params.config.input_dim:
        raise ShapeMismatch(
            f"batch must be (n, {params.config.input_dim}), got {x.shape}")
    rate = params.config.dropout_rate
    rng = np.random.default_rng(dropout_seed) if train_mode and rate > 0.0 else None

    n_layers = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        x = gradcore.add(gradcore.matmul(x, w), b)
        if i < n_layers - 1:
            x = gradcore.relu(x)
            if rng is not None:
                keep = rng.random(x.shape) >= rate
                mask = keep / (1.0 - rate)
                x = gradcore.mul(x, Tensor(mask))
    return x


def predict_logits(params: MlpParams, batch) -> np.ndarray:
    """Evaluation-mode logits as a plain array (no tape, no dropout)."""
    return forward(params, batch, train_mode=False).data


def predict_proba(params: MlpParams, batch) -> np.ndarray:
    """Class posteriors g(x): row softmax of evaluation-mode logits."""
    logits = predict_logits(params, batch)
    return kernels.row_softmax(logits)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

_CHECKPOINT_MAGIC = "labelnoise-mlp-v1"


def save_params(params: MlpParams, path) -> None:
    cfg = params.config
    header = {
        "format": _CHECKPOINT_MAGIC,
        "input_dim": cfg.input_dim,
        "hidden_dims": list(cfg.hidden_dims),
        "class_count": cfg.class_count,
        "dropout_rate": cfg.dropout_rate,
        "seed": cfg.seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for name, tensors in (("w", params.weights), ("b", params.biases)):
            for i, t in enumerate(tensors):
                flat = " ".join(repr(float(x)) for x in t.data.ravel())
                fh.write(f"{name}{i} {flat}\n")


def load_params(path) -> MlpParams:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty checkpoint")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError:
        raise ParseError(f"{path}:1: header is not valid JSON")
    if header.get("format") != _CHECKPOINT_MAGIC:
        raise ParseError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    config = MlpConfig(
        input_dim=int(header["input_dim"]),
        hidden_dims=tuple(header["hidden_dims"]),
        class_count=int(header["class_count"]),
        dropout_rate=float(header["dropout_rate"]),
        seed=int(header["seed"]),
    )
    values: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        name, _, rest = line.partition(" ")
        try:
            values[name] = np.array([float(x) for x in rest.split()])
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad numeric value in {name!r}")
    dims = config.layer_dims
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
        for key, shape, dest in ((f"w{i}", (fan_in, fan_out), weights),
                                 (f"b{i}", (fan_out,), biases)):
            if key not in values:
                raise ParseError(f"{path}: missing array {key!r}")
            arr = values[key]
            if arr.size != int(np.prod(shape)):
                raise ParseError(
                    f"{path}: {key!r} has {arr.size} values, expected {np.prod(shape)}")
            dest.append(Tensor(arr.reshape(shape)))
    return MlpParams(config=config, weights=weights, biases=biases)
