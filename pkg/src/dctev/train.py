"""Mini-batch training with adaptive-moment (Adam) updates and validation-based selection."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .dataio import WindowSet
from .metrics import PredictionSet, confusion_at, f1
from .model import loss_and_grads
from .tensorkit import DimensionError, bce_loss

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 128
    epochs: int = 3
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    seed: int = 1
    val_fraction: float = 0.1
    positive_class_weight: float = 1.0
    loss_reduction: str = "mean"

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not 0.0 <= self.val_fraction < 0.5:
            raise ValueError("val_fraction must lie in [0, 0.5)")
        if self.positive_class_weight < 1.0:
            raise ValueError("positive_class_weight must be >= 1")
        if self.loss_reduction not in ("sum", "mean"):
            raise ValueError("loss_reduction must be 'sum' or 'mean'")
        if self.learning_rate <= 0 or self.eps_opt <= 0:
            raise ValueError("learning_rate and eps_opt must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float | None] = field(default_factory=list)
    val_f1: list[float | None] = field(default_factory=list)
    initial_train_loss: float | None = None
    best_epoch: int | None = None

    def to_dict(self) -> dict:
        return asdict(self)


def init_adam_state(params: dict[str, np.ndarray]) -> dict:
    return {
        "m": {k: np.zeros_like(v) for k, v in params.items()},
        "v": {k: np.zeros_like(v) for k, v in params.items()},
    }


def adam_step(params: dict, grads: dict, state: dict, t: int, config: TrainConfig):
    """One bias-corrected Adam update; ``t`` is the 1-based step index.

    Returns new ``(params, state)`` dicts; the inputs are not modified.
    """
    if t < 1:
        raise ValueError("step index t starts at 1")
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {k} has shape {g.shape}, parameter has {p.shape}")
        m = b1 * state["m"][k] + (1.0 - b1) * g
        v = b2 * state["v"][k] + (1.0 - b2) * (g * g)
        new_p[k] = p - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps_opt)
        new_m[k], new_v[k] = m, v
    return new_p, {"m": new_m, "v": new_v}


def split_validation(windows: WindowSet, val_fraction: float) -> tuple[np.ndarray, np.ndarray]:
    """Index arrays (fit, val): the chronologically last ``val_fraction`` of each home's windows."""
    fit, val = [], []
    for home in dict.fromkeys(windows.home_ids.tolist()):
        idx = np.flatnonzero(windows.home_ids == home)
        idx = idx[np.argsort(windows.starts[idx], kind="stable")]
        n_val = int(np.ceil(len(idx) * val_fraction)) if val_fraction > 0 else 0
        n_val = min(n_val, len(idx) - 1)
        fit.append(idx[: len(idx) - n_val])
        val.append(idx[len(idx) - n_val :])
    return np.sort(np.concatenate(fit)), np.sort(np.concatenate(val))


def dataset_loss(model, windows: WindowSet, config: TrainConfig, batch_size: int = 2048) -> float:
    """Loss over a whole window set, reduced like a single batch would be."""
    probs = model.predict_proba(windows.inputs, batch_size=batch_size)
    return bce_loss(probs, windows.targets, config.loss_reduction, config.positive_class_weight).item()


def train(model, windows: WindowSet, config: TrainConfig, log_every: int = 0):
    """Fit ``model`` on ``windows``; returns ``(best_params, history)``.

    Batches are reshuffled every epoch from a generator seeded by
    ``config.seed``. With ``val_fraction > 0`` the epoch with the highest
    validation F1 at 0.5 is selected (earliest on ties); otherwise the
    last epoch. ``model.params`` is left set to the selected parameters.
    """
    config.validate()
    if len(windows) == 0 or windows.targets is None:
        raise TrainingError("cannot train on an empty or unlabeled window set")
    if windows.T != model.config.T or windows.M != model.config.M:
        raise DimensionError(
            f"windows have T={windows.T}, M={windows.M}; model expects T={model.config.T}, M={model.config.M}"
        )
    history = TrainHistory()
    if config.epochs == 0:
        return model.params, history

    fit_idx, val_idx = split_validation(windows, config.val_fraction)
    fit_set = windows.subset(fit_idx)
    val_set = windows.subset(val_idx) if len(val_idx) else None
    rng = np.random.default_rng([config.seed, 7])
    history.initial_train_loss = dataset_loss(model, fit_set, config)

    state = init_adam_state(model.params)
    step = 0
    best_params, best_f1 = model.params, -np.inf
    for epoch in range(config.epochs):
        order = rng.permutation(len(fit_set))
        losses = []
        for b, lo in enumerate(range(0, len(order), config.batch_size)):
            batch = order[lo : lo + config.batch_size]
            loss, grads = loss_and_grads(
                model,
                fit_set.inputs[batch],
                fit_set.targets[batch],
                config.loss_reduction,
                config.positive_class_weight,
            )
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, batch {b} (step {step + 1})")
            step += 1
            model.params, state = adam_step(model.params, grads, state, step, config)
            losses.append(loss)
            if log_every and step % log_every == 0:
                log.info("epoch %d step %d loss %.5f", epoch, step, loss)
        history.train_loss.append(float(np.mean(losses)))
        if val_set is not None:
            probs = model.predict_proba(val_set.inputs)
            vloss = bce_loss(probs, val_set.targets, config.loss_reduction, config.positive_class_weight).item()
            vf1 = f1(confusion_at(PredictionSet(probs.ravel(), val_set.targets.ravel()), 0.5))
            history.val_loss.append(vloss)
            history.val_f1.append(vf1)
            log.info("epoch %d train_loss %.5f val_loss %.5f val_f1 %.4f", epoch, history.train_loss[-1], vloss, vf1)
            if vf1 > best_f1:
                best_f1, best_params, history.best_epoch = vf1, model.params, epoch
        else:
            history.val_loss.append(None)
            history.val_f1.append(None)
            best_params, history.best_epoch = model.params, epoch
    model.params = best_params
    return best_params, history
