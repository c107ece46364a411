"""Adam optimization, early-stopped training loops, the three-stage
revision pipeline, and clean-test evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels, model
from .datagen import LabeledDataset
from .errors import UsageError
from .gradcore import GradientTape, Tensor
from .losses import LossSpec, compute_loss
from .model import MlpConfig, MlpParams
from .transition import RevisionMode, TransitionMatrix, effective_matrix, estimate_anchor

__all__ = [
    "AdamState",
    "PipelineResult",
    "TrainConfig",
    "TrainHistory",
    "adam_step",
    "evaluate",
    "revision_pipeline",
    "train",
    "write_history_csv",
]


@dataclass
class AdamState:
    """First/second moment buffers plus the step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_leaves(cls, leaves: list[Tensor], learning_rate: float,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> "AdamState":
        return cls(m=[np.zeros(p.size) for p in leaves],
                   v=[np.zeros(p.size) for p in leaves],
                   learning_rate=learning_rate, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, leaves: list[Tensor],
              grads: dict[Tensor, Tensor]) -> list[Tensor]:
    """One Adam update over every leaf; returns the new leaf tensors.

    Moments and the step counter are updated in place; the counter
    increments before bias correction, so the first call uses t = 1.
    """
    if len(state.m) != len(leaves):
        raise UsageError(f"optimizer tracks {len(state.m)} leaves, got {len(leaves)}")
    state.t += 1
    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t
    updated = []
    for i, leaf in enumerate(leaves):
        g = grads[leaf].data.ravel()
        new_flat = kernels.adam_update(
            leaf.data.ravel(), g, state.m[i], state.v[i],
            bias1, bias2, state.learning_rate, state.beta1, state.beta2, state.eps)
        updated.append(Tensor(new_flat.reshape(leaf.shape)))
    return updated


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.0005
    patience: int = 10
    seed: int = 0
    dropout_active: bool = True

    def __post_init__(self):
        # epochs == 0 is allowed: a zero-epoch phase returns its inputs
        # untouched (used to skip the revision stage).
        if self.epochs < 0 or self.batch_size < 1 or self.patience < 1:
            raise ValueError("epochs must be >= 0; batch_size and patience >= 1")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    batch_losses: list[float] = field(default_factory=list)
    stop_epoch: int = 0
    best_epoch: int = 0


def write_history_csv(history: TrainHistory, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss,val_acc\n")
        for e, (tl, vl, va) in enumerate(
                zip(history.train_loss, history.val_loss, history.val_accuracy), start=1):
            fh.write(f"{e},{tl!r},{vl!r},{va!r}\n")


def _eval_loss_and_accuracy(params: MlpParams, data: LabeledDataset, spec: LossSpec,
                            labels: np.ndarray, delta: Tensor | None,
                            t_hat) -> tuple[float, float]:
    logits = model.predict_logits(params, data.features)
    loss = compute_loss(spec, logits, labels, delta=delta, t_hat=t_hat,
                        bypass_validation=True).item()
    preds = np.argmax(logits, axis=1)
    accuracy = 100.0 * float(np.mean(preds == labels)) if labels.size else 0.0
    return loss, accuracy


def train(params: MlpParams, loss_spec: LossSpec, train_set: LabeledDataset,
          val_set: LabeledDataset, config: TrainConfig,
          delta: Tensor | None = None, t_hat=None,
          ) -> tuple[MlpParams, Tensor | None, TrainHistory]:
    """Mini-batch Adam over shuffled epochs with early stopping.

    Training targets the noisy labels.  After each epoch the loss_spec is
    evaluated on the validation set; training stops when validation loss
    has not improved for ``patience`` consecutive epochs, and the returned
    parameters (and slack, when supplied) come from the best epoch.
    """
    if train_set.n == 0 or val_set.n == 0:
        raise ValueError("train and validation sets must be nonempty")
    train_labels = train_set.training_labels()
    val_labels = val_set.training_labels()

    leaves = params.leaves() + ([delta] if delta is not None else [])
    state = AdamState.for_leaves(leaves, config.learning_rate)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()

    best_loss = np.inf
    best_leaves = leaves
    bad_epochs = 0

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(train_set.n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, train_set.n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = train_set.features[idx]
            labels = train_labels[idx]
            dropout_seed = int(rng.integers(0, 2**63 - 1))

            cur_params = params.with_leaves(leaves[:len(params.weights) * 2])
            cur_delta = leaves[-1] if delta is not None else None
            tape = GradientTape()
            for leaf in leaves:
                tape.watch(leaf)
            with tape:
                logits = model.forward(cur_params, batch,
                                       train_mode=config.dropout_active,
                                       dropout_seed=dropout_seed)
                loss = compute_loss(loss_spec, logits, labels,
                                    delta=cur_delta, t_hat=t_hat,
                                    bypass_validation=True)
            loss_value = loss.item()
            if not np.isfinite(loss_value):
                raise ArithmeticError(
                    f"non-finite training loss {loss_value!r} at epoch {epoch}, "
                    f"batch {n_batches + 1}")
            grads = tape.backward(loss)
            leaves = adam_step(state, leaves, grads)
            history.batch_losses.append(loss_value)
            epoch_loss += loss_value
            n_batches += 1

        cur_params = params.with_leaves(leaves[:len(params.weights) * 2])
        cur_delta = leaves[-1] if delta is not None else None
        val_loss, val_acc = _eval_loss_and_accuracy(
            cur_params, val_set, loss_spec, val_labels, cur_delta, t_hat)
        if not np.isfinite(val_loss):
            raise ArithmeticError(f"non-finite validation loss at epoch {epoch}")
        history.train_loss.append(epoch_loss / max(n_batches, 1))
        history.val_loss.append(val_loss)
        history.val_accuracy.append(val_acc)
        history.stop_epoch = epoch

        if val_loss < best_loss:
            best_loss = val_loss
            best_leaves = leaves
            history.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.patience:
                break

    final_params = params.with_leaves(best_leaves[:len(params.weights) * 2])
    final_delta = best_leaves[-1] if delta is not None else None
    return final_params, final_delta, history


def evaluate(params: MlpParams, test_set: LabeledDataset, loss_spec: LossSpec,
             delta: Tensor | None = None, t_hat=None) -> dict[str, float]:
    """Clean-label test metrics: loss under ``loss_spec`` plus top-1 accuracy.

    Predictions are the argmax of the posterior; ties break toward the
    lowest class index.
    """
    if test_set.n == 0:
        raise ValueError("test set is empty")
    loss, accuracy = _eval_loss_and_accuracy(
        params, test_set, loss_spec, test_set.clean_labels, delta, t_hat)
    return {"test_loss": loss, "test_accuracy_percent": accuracy}


@dataclass(frozen=True)
class AnchorSettings:
    percentile: float = 97.0
    top_k: int = 1


@dataclass
class PipelineResult:
    params: MlpParams
    t_hat: TransitionMatrix
    delta: Tensor
    t_final: np.ndarray
    histories: dict[str, TrainHistory]
    stage1_params: MlpParams
    stage2_params: MlpParams


def revision_pipeline(train_set: LabeledDataset, val_set: LabeledDataset,
                      mlp_config: MlpConfig, base_config: TrainConfig,
                      revision_config: TrainConfig, mode: RevisionMode,
                      anchor: AnchorSettings = AnchorSettings(),
                      beta_stop_gradient: bool = False,
                      stage1: tuple[MlpParams, TransitionMatrix, TrainHistory] | None = None,
                      stage2: tuple[MlpParams, TrainHistory] | None = None,
                      ) -> PipelineResult:
    """Three-stage revision training.

    1. Fit a cross-entropy model on the noisy labels and read the initial
       matrix off its anchor points (posteriors over the training split).
    2. Train a fresh model with the reweighted loss under that estimate.
    3. Continue from the stage-2 weights, jointly optimizing the model and a
       zero-initialized slack matrix under the revision loss; the final
       matrix folds the slack into the estimate.

    ``stage1`` / ``stage2`` accept precomputed artifacts (from an identical
    configuration) so callers running several modes can share the expensive
    stages; results are identical to recomputing them.
    """
    histories: dict[str, TrainHistory] = {}

    if stage1 is None:
        ce_params = model.init_mlp(mlp_config)
        ce_params, _, h1 = train(ce_params, LossSpec(kind="baseline_ce"),
                                 train_set, val_set, base_config)
        posteriors = model.predict_proba(ce_params, train_set.features)
        t_hat = estimate_anchor(posteriors, anchor.percentile, anchor.top_k)
    else:
        ce_params, t_hat, h1 = stage1
    histories["stage1_ce"] = h1

    if stage2 is None:
        reweight_params = model.init_mlp(
            MlpConfig(input_dim=mlp_config.input_dim,
                      hidden_dims=mlp_config.hidden_dims,
                      class_count=mlp_config.class_count,
                      dropout_rate=mlp_config.dropout_rate,
                      seed=mlp_config.seed + 1))
        spec2 = LossSpec(kind="reweight", matrix=t_hat,
                         beta_stop_gradient=beta_stop_gradient)
        reweight_params, _, h2 = train(reweight_params, spec2,
                                       train_set, val_set, base_config)
    else:
        reweight_params, h2 = stage2
    histories["stage2_reweight"] = h2

    spec3 = LossSpec(kind="revision", revision_mode=mode,
                     beta_stop_gradient=beta_stop_gradient)
    delta = Tensor(np.zeros((mlp_config.class_count, mlp_config.class_count)))
    final_params, delta, h3 = train(reweight_params, spec3, train_set, val_set,
                                    revision_config, delta=delta, t_hat=t_hat)
    histories["stage3_revision"] = h3

    t_final = effective_matrix(t_hat, delta.data, mode)
    return PipelineResult(params=final_params, t_hat=t_hat, delta=delta,
                          t_final=t_final, histories=histories,
                          stage1_params=ce_params, stage2_params=reweight_params)
