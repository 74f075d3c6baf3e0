"""Training loop: optimizers, class weighting, early stopping, grid search.

Both optimizers operate on flat parameter vectors. The epoch loop
shuffles with a per-epoch derived seed, steps over minibatches, then
monitors the weighted validation loss; training stops as soon as the
epoch-over-epoch improvement is at most 1e-7, or at the epoch cap.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .artifacts import derive_seed, format_number, read_kv_config
from .ehr_core import DataError
from .nnet import (
    LrParams,
    LstmParams,
    NumericalError,
    init_lr_params,
    init_lstm_params,
    lr_forward,
    lr_loss_and_grads,
    lstm_loss_and_grads,
    lstm_predict_proba,
)

EARLY_STOP_DELTA = 1e-7
LR_MAX_EPOCHS = 500
LSTM_MAX_EPOCHS = 250

#: Hyperparameter grids searched over the validation split; rate grids
#: run over the decade points of their ranges.
SEARCH_GRIDS = {
    "learning_rate": (1e-5, 1e-4, 1e-3),
    "l1_lambda": (1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 1e-1),
    "hidden_size": (6, 12, 80, 120),
    "batch_size": (128, 256, 512, 1024),
}


@dataclass
class TrainConfig:
    model_kind: str  # "lr" | "lstm"
    learning_rate: float = 1e-3
    l1_lambda: float = 1e-3
    hidden_size: int = 120  # ignored by the lr model
    batch_size: int = 256
    max_epochs: int = LR_MAX_EPOCHS
    early_stop_delta: float = EARLY_STOP_DELTA
    dropout_rate: float = 0.0
    optimizer: str = "adam"  # "adam" | "rmsprop"
    seed: int = 0
    # Optional two-phase schedule: first half of the epochs with Adam at
    # 1e-3, second half at 1e-5 with fresh optimizer state.
    two_phase_adam: bool = False

    def __post_init__(self):
        if self.model_kind not in ("lr", "lstm"):
            raise ValueError(f"unknown model kind {self.model_kind!r}")
        if self.optimizer not in ("adam", "rmsprop"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_epochs <= 0:
            raise ValueError("learning_rate, batch_size, and max_epochs must be positive")
        if self.l1_lambda < 0 or not 0 <= self.dropout_rate < 1:
            raise ValueError("l1_lambda must be >= 0 and dropout_rate in [0, 1)")


def default_config(model_kind: str, seed: int = 0) -> TrainConfig:
    """The optimized published setups: LR/Adam and LSTM/RMSProp."""
    if model_kind == "lr":
        return TrainConfig(
            model_kind="lr",
            learning_rate=1e-3,
            l1_lambda=1e-3,
            max_epochs=LR_MAX_EPOCHS,
            optimizer="adam",
            seed=seed,
        )
    return TrainConfig(
        model_kind="lstm",
        learning_rate=1e-3,
        l1_lambda=1e-5,
        hidden_size=120,
        max_epochs=LSTM_MAX_EPOCHS,
        dropout_rate=0.2,
        optimizer="rmsprop",
        seed=seed,
    )


_CONFIG_TYPES = {
    "model_kind": str,
    "learning_rate": float,
    "l1_lambda": float,
    "hidden_size": int,
    "batch_size": int,
    "max_epochs": int,
    "early_stop_delta": float,
    "dropout_rate": float,
    "optimizer": str,
    "seed": int,
    "two_phase_adam": bool,
}


def config_from_file(path, overrides: dict | None = None) -> TrainConfig:
    """Load a flat key=value config; keys are TrainConfig field names."""
    raw = read_kv_config(path)
    if overrides:
        raw.update({k: str(v) for k, v in overrides.items()})
    if "model_kind" not in raw:
        raise ValueError(f"{path}: missing required key model_kind")
    base = default_config(raw["model_kind"])
    values = {}
    for key, text in raw.items():
        if key not in _CONFIG_TYPES:
            raise ValueError(f"{path}: unknown config key {key!r}")
        kind = _CONFIG_TYPES[key]
        if kind is bool:
            values[key] = text.strip().lower() in ("1", "true", "yes")
        else:
            values[key] = kind(text)
    return replace(base, **values)


def config_to_dict(config: TrainConfig) -> dict:
    return {name: getattr(config, name) for name in _CONFIG_TYPES}


# -- class weighting -----------------------------------------------------------

def class_weights(labels: np.ndarray) -> dict[int, float]:
    """Inverse-frequency weights, normalized so a balanced set gives 1.

    w_c = N / (2 * N_c); the weighted mean loss then keeps the scale of
    the unweighted loss while each class contributes equally.
    """
    labels = np.asarray(labels)
    n = len(labels)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise DataError("class weights need both classes present")
    return {0: n / (2.0 * n_neg), 1: n / (2.0 * n_pos)}


def sample_weights(labels: np.ndarray, weights: dict[int, float]) -> np.ndarray:
    labels = np.asarray(labels)
    return np.where(labels == 1, weights[1], weights[0]).astype(np.float64)


# -- optimizers ----------------------------------------------------------------

@dataclass
class AdamState:
    """Bias-corrected Adam accumulators over a flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_size(cls, size: int) -> "AdamState":
        return cls(m=np.zeros(size), v=np.zeros(size))


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState, lr: float) -> np.ndarray:
    """One Adam update; mutates the accumulator state, returns new params."""
    if not np.all(np.isfinite(grads)):
        raise NumericalError("non-finite gradient in adam_step")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = state.m / (1.0 - state.beta1**state.t)
    v_hat = state.v / (1.0 - state.beta2**state.t)
    return params - lr * m_hat / (np.sqrt(v_hat) + state.eps)


@dataclass
class RmspropState:
    """Running mean of squared gradients over a flat parameter vector."""

    sq: np.ndarray
    rho: float = 0.9
    eps: float = 1e-8

    @classmethod
    def for_size(cls, size: int) -> "RmspropState":
        return cls(sq=np.zeros(size))


def rmsprop_step(
    params: np.ndarray, grads: np.ndarray, state: RmspropState, lr: float
) -> np.ndarray:
    """One RMSProp update: params - lr * g / sqrt(E[g^2] + eps)."""
    if not np.all(np.isfinite(grads)):
        raise NumericalError("non-finite gradient in rmsprop_step")
    state.sq = state.rho * state.sq + (1.0 - state.rho) * grads * grads
    return params - lr * grads / np.sqrt(state.sq + state.eps)


def _make_optimizer(name: str, size: int):
    if name == "adam":
        state = AdamState.for_size(size)
        return lambda p, g, lr: adam_step(p, g, state, lr)
    state = RmspropState.for_size(size)
    return lambda p, g, lr: rmsprop_step(p, g, state, lr)


# -- training loop -------------------------------------------------------------

@dataclass
class EpochStat:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


@dataclass
class TrainLog:
    epochs: list[EpochStat] = field(default_factory=list)
    stop_reason: str = ""

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle, lineterminator="\n")
            writer.writerow(["epoch", "train_loss", "val_loss", "seconds"])
            for stat in self.epochs:
                writer.writerow(
                    [
                        stat.epoch,
                        format_number(stat.train_loss),
                        format_number(stat.val_loss),
                        f"{stat.seconds:.3f}",
                    ]
                )


class TrainingDiverged(NumericalError):
    """Validation loss became non-finite; carries the partial log."""

    def __init__(self, message: str, log: TrainLog):
        super().__init__(message)
        self.log = log


def train_model(
    config: TrainConfig,
    train_data: tuple[np.ndarray, np.ndarray],
    val_data: tuple[np.ndarray, np.ndarray],
):
    """Fit one model; returns (params, TrainLog).

    `train_data`/`val_data` are (X, y): X is (n, F) for the lr model and
    (n, 6, F) for the lstm. Class weights come from the training labels
    and also weight the monitored validation loss.
    """
    X_train, y_train = train_data
    X_val, y_val = val_data
    if len(y_train) == 0 or len(y_val) == 0:
        raise DataError("training and validation splits must be non-empty")
    weights = class_weights(y_train)
    w_train = sample_weights(y_train, weights)
    w_val = sample_weights(y_val, weights)

    if config.model_kind == "lr":
        params = init_lr_params(X_train.shape[1])
        meta = (X_train.shape[1],)
        from_vector = LrParams.from_vector
        loss_and_grads = lambda prm, X, y, w, rng: lr_loss_and_grads(
            prm, X, y, w, config.l1_lambda
        )
        val_loss_fn = lambda prm: _lr_val_loss(prm, X_val, y_val, w_val, config.l1_lambda)
    else:
        init_rng = np.random.default_rng(derive_seed(config.seed, "init"))
        params = init_lstm_params(X_train.shape[2], config.hidden_size, init_rng)
        meta = (X_train.shape[2], config.hidden_size)
        from_vector = LstmParams.from_vector
        loss_and_grads = lambda prm, X, y, w, rng: lstm_loss_and_grads(
            prm, X, y, w, config.l1_lambda, config.dropout_rate, True, rng
        )
        val_loss_fn = lambda prm: _lstm_val_loss(prm, X_val, y_val, w_val, config.l1_lambda)

    if config.two_phase_adam:
        phases = [
            ("adam", 1e-3, config.max_epochs // 2),
            ("adam", 1e-5, config.max_epochs - config.max_epochs // 2),
        ]
    else:
        phases = [(config.optimizer, config.learning_rate, config.max_epochs)]

    log = TrainLog()
    n = len(y_train)
    epoch = 0
    for optimizer_name, lr, phase_epochs in phases:
        vec = params.to_vector()
        step = _make_optimizer(optimizer_name, vec.size)
        prev_val = None
        stopped = False
        for _ in range(phase_epochs):
            epoch += 1
            started = time.perf_counter()
            order = np.random.default_rng(
                derive_seed(config.seed, f"shuffle:{epoch}")
            ).permutation(n)
            dropout_rng = np.random.default_rng(derive_seed(config.seed, f"dropout:{epoch}"))
            total = 0.0
            for start in range(0, n, config.batch_size):
                batch = order[start : start + config.batch_size]
                loss, grads = loss_and_grads(
                    params, X_train[batch], y_train[batch], w_train[batch], dropout_rng
                )
                vec = step(vec, grads.to_vector(), lr)
                params = from_vector(vec, *meta)
                total += loss * len(batch)
            train_loss = total / n
            val_loss = val_loss_fn(params)
            log.epochs.append(
                EpochStat(epoch, train_loss, val_loss, time.perf_counter() - started)
            )
            if not np.isfinite(val_loss):
                log.stop_reason = "diverged"
                raise TrainingDiverged(f"validation loss diverged at epoch {epoch}", log)
            if prev_val is not None and prev_val - val_loss <= config.early_stop_delta:
                log.stop_reason = "early_stop"
                stopped = True
                break
            prev_val = val_loss
        if stopped:
            break
    if not log.stop_reason:
        log.stop_reason = "max_epochs"
    return params, log


def _lr_val_loss(params, X, y, w, lam) -> float:
    from .nnet import lr_l1_penalty, lr_logits, weighted_bce

    bce = float(np.mean(weighted_bce(lr_logits(params, X), y, w)))
    return bce + lr_l1_penalty(params, lam)


def _lstm_val_loss(params, X, y, w, lam) -> float:
    from .nnet import lstm_forward, lstm_l1_penalty, weighted_bce

    _, tape = lstm_forward(params, X)
    bce = float(np.mean(weighted_bce(tape.logits, y, w)))
    return bce + lstm_l1_penalty(params, lam)


def predict_proba(model_kind: str, params, X: np.ndarray) -> np.ndarray:
    if model_kind == "lr":
        return lr_forward(params, X)
    return lstm_predict_proba(params, X)


# -- grid search ----------------------------------------------------------------

@dataclass
class GridResult:
    config: TrainConfig
    val_auroc: float


def grid_search(
    base_config: TrainConfig,
    train_data: tuple[np.ndarray, np.ndarray],
    val_data: tuple[np.ndarray, np.ndarray],
    grids: dict | None = None,
) -> tuple[TrainConfig, list[GridResult]]:
    """Exhaustive search over the hyperparameter cross-product.

    Every candidate trains to completion and is scored by validation
    AUROC; ties go to the smaller hidden size, then the smaller l1
    penalty, then enumeration order.
    """
    from .evaluate import auroc

    grids = dict(SEARCH_GRIDS if grids is None else grids)
    if not all(grids.get(key) for key in grids):
        raise ValueError("grid values must be non-empty")
    hidden_sizes = grids.get("hidden_size", (base_config.hidden_size,))
    if base_config.model_kind == "lr":
        hidden_sizes = (base_config.hidden_size,)  # no hidden layer to size
    results: list[GridResult] = []
    for lr in grids.get("learning_rate", (base_config.learning_rate,)):
        for lam in grids.get("l1_lambda", (base_config.l1_lambda,)):
            for hidden in hidden_sizes:
                for batch in grids.get("batch_size", (base_config.batch_size,)):
                    config = replace(
                        base_config,
                        learning_rate=float(lr),
                        l1_lambda=float(lam),
                        hidden_size=int(hidden),
                        batch_size=int(batch),
                    )
                    params, _ = train_model(config, train_data, val_data)
                    scores = predict_proba(config.model_kind, params, val_data[0])
                    results.append(GridResult(config, auroc(val_data[1], scores)))
    best_index = min(
        range(len(results)),
        key=lambda k: (
            -results[k].val_auroc,
            results[k].config.hidden_size,
            results[k].config.l1_lambda,
            k,
        ),
    )
    return results[best_index].config, results


# -- model artifact --------------------------------------------------------------

MODEL_FORMAT = "htnrisk-model/1"


def model_to_dict(model_kind: str, params, schema, training: dict) -> dict:
    """Versioned model artifact: weights at full precision plus the
    feature schema, so inference needs no other files."""
    from .featurize import schema_to_dict
    from .nnet import LSTM_FIELDS

    if model_kind == "lr":
        shapes = {"n_features": int(params.w.shape[0])}
        weights = {"w": params.w.tolist(), "b": params.b}
    else:
        shapes = {"n_features": params.n_features, "hidden": params.hidden}
        weights = {}
        for name in LSTM_FIELDS:
            value = getattr(params, name)
            weights[name] = value.tolist() if isinstance(value, np.ndarray) else value
    return {
        "format": MODEL_FORMAT,
        "kind": model_kind,
        "shapes": shapes,
        "weights": weights,
        "schema": schema_to_dict(schema),
        "training": training,
    }


def model_from_dict(data: dict):
    """Inverse of model_to_dict: (kind, params, schema, training)."""
    from .featurize import schema_from_dict
    from .nnet import LSTM_FIELDS

    if data.get("format") != MODEL_FORMAT:
        raise DataError(f"unsupported model format {data.get('format')!r}")
    kind = data["kind"]
    weights = data["weights"]
    if kind == "lr":
        params = LrParams(w=np.asarray(weights["w"], dtype=np.float64), b=float(weights["b"]))
    elif kind == "lstm":
        values = {}
        for name in LSTM_FIELDS:
            raw = weights[name]
            values[name] = float(raw) if name == "dense_b" else np.asarray(raw, dtype=np.float64)
        params = LstmParams(**values)
    else:
        raise DataError(f"unknown model kind {kind!r}")
    return kind, params, schema_from_dict(data["schema"]), data["training"]


def save_model(path, model_kind: str, params, schema, training: dict) -> None:
    from .artifacts import write_json

    write_json(path, model_to_dict(model_kind, params, schema, training))


def load_model(path):
    from .artifacts import read_json

    return model_from_dict(read_json(path))


def grid_results_to_csv(results: list[GridResult], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(
            ["learning_rate", "l1_lambda", "hidden_size", "batch_size", "val_auroc"]
        )
        for result in results:
            writer.writerow(
                [
                    format_number(result.config.learning_rate),
                    format_number(result.config.l1_lambda),
                    result.config.hidden_size,
                    result.config.batch_size,
                    format_number(result.val_auroc),
                ]
            )
