"""MSE loss, reverse-mode gradients, clipped Adam, training loop and grid search."""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import WindowBatch
from .model import ModelConfig, as_tensors, forward_graph, init_params, predict

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 100
    early_stop_patience: int = 10
    grad_clip_norm: float = 1.0
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.early_stop_patience < 0:
            raise ValueError("early_stop_patience must be >= 0")


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    best_epoch: int = -1
    wall_time: float = 0.0

    @property
    def best_val_loss(self) -> float:
        return self.val_loss[self.best_epoch]

    def log_rows(self) -> list[tuple]:
        return [
            (e, self.train_loss[e], self.val_loss[e], self.epoch_seconds[e])
            for e in range(len(self.train_loss))
        ]


def mse_loss(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: predictions {p.shape} vs targets {t.shape}")
    return float(np.mean((p - t) ** 2))


def loss_and_grads(batch: WindowBatch, params: dict[str, np.ndarray], config: ModelConfig, rng=None, train: bool = True):
    """MSE of one batch and its exact gradient w.r.t. every parameter.

    With ``train=True`` the dropout masks are drawn from ``rng``; passing a
    fresh generator with the same seed reproduces the same masks.
    """
    P = as_tensors(params, requires_grad=True)
    pred, _, _ = forward_graph(batch, P, config, train=train, rng=rng)
    if pred.shape != batch.targets.shape:
        raise ValueError(f"shape mismatch: predictions {pred.shape} vs targets {batch.targets.shape}")
    loss = ad.tmean(ad.square(ad.sub(pred, batch.targets)))
    loss.backward()
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in P.items()}
    return float(loss.data), grads


def backward(batch: WindowBatch, params, config: ModelConfig, rng=None, train: bool = True) -> dict[str, np.ndarray]:
    return loss_and_grads(batch, params, config, rng, train)[1]


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float):
    norm = global_norm(grads)
    if norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, config: TrainConfig):
    """Clip gradients to ``grad_clip_norm`` (global norm), then one Adam update.

    Returns new parameter arrays; ``state`` is updated in place.
    """
    grads, _ = clip_by_global_norm(grads, config.grad_clip_norm)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {k}")
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    out = {}
    for k, p in params.items():
        g = grads[k]
        m = state.m.get(k)
        v = state.v.get(k)
        m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
        v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
        state.m[k], state.v[k] = m, v
        out[k] = p - config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.eps)
    return out


def evaluate_loss(batch: WindowBatch, params, config: ModelConfig) -> float:
    return mse_loss(predict(batch, params, config).predictions, batch.targets)


def train(
    train_windows: WindowBatch,
    val_windows: WindowBatch,
    model_config: ModelConfig,
    train_config: TrainConfig,
    params: dict[str, np.ndarray] | None = None,
):
    """Mini-batch Adam with validation-based model selection.

    Returns ``(best_params, TrainReport)``.  Training stops after
    ``max_epochs`` or once the validation loss has not improved for
    ``early_stop_patience`` epochs (patience 0 stops after the first epoch).
    """
    if len(train_windows) == 0:
        raise ValueError("empty training split")
    if len(val_windows) == 0:
        raise ValueError("empty validation split")
    rng = np.random.default_rng(train_config.seed)
    if params is None:
        params = init_params(model_config, seed=train_config.seed)
    state = AdamState()
    report = TrainReport()
    best = params
    best_val = np.inf
    since_best = 0
    t_start = time.perf_counter()
    for epoch in range(train_config.max_epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        for batch in train_windows.iter_batches(train_config.batch_size, rng):
            loss, grads = loss_and_grads(batch, params, model_config, rng)
            params = adam_step(params, grads, state, train_config)
            total += loss * len(batch)
            count += len(batch)
        val = evaluate_loss(val_windows, params, model_config)
        report.train_loss.append(total / count)
        report.val_loss.append(val)
        report.epoch_seconds.append(time.perf_counter() - t0)
        log.info("epoch %d train %.6g val %.6g", epoch, total / count, val)
        if val < best_val:
            best_val, best, since_best = val, params, 0
            report.best_epoch = epoch
        else:
            since_best += 1
        if since_best >= train_config.early_stop_patience:
            break
    report.wall_time = time.perf_counter() - t_start
    return best, report


# ---------------------------------------------------------------------------
# grid search

DEFAULT_GRID = {
    "learning_rate": [1e-3, 1e-4],
    "d_model": [16, 32, 64],
    "n_heads": [1, 4],
    "grad_clip_norm": [0.01, 1.0],
}

_MODEL_KEYS = {"d_model", "n_heads", "dropout"}
_TRAIN_KEYS = {"learning_rate", "batch_size", "grad_clip_norm", "max_epochs", "early_stop_patience"}


@dataclass
class GridResult:
    best_model: ModelConfig
    best_train: TrainConfig
    best_index: int
    rows: list[dict]  # one per combination: settings + val loss (+ error)


def grid_search(grid: dict[str, list], train_windows, val_windows, model_config: ModelConfig, train_config: TrainConfig) -> GridResult:
    """Exhaustive search over ``grid``; the first combination wins ties.

    Combinations that fail (divergence, invalid shape) are recorded with an
    infinite validation loss.
    """
    keys = list(grid)
    unknown = set(keys) - _MODEL_KEYS - _TRAIN_KEYS
    if unknown:
        raise KeyError(f"unknown grid keys: {sorted(unknown)}")
    combos = list(itertools.product(*(grid[k] for k in keys)))
    if not combos:
        raise ValueError("empty grid")
    rows = []
    best_i, best_val = None, np.inf
    configs: list[tuple[ModelConfig, TrainConfig] | None] = []
    for i, values in enumerate(combos):
        settings = dict(zip(keys, values))
        row = dict(settings)
        rows.append(row)
        try:
            mc = replace(model_config, **{k: v for k, v in settings.items() if k in _MODEL_KEYS})
            tc = replace(train_config, **{k: v for k, v in settings.items() if k in _TRAIN_KEYS})
        except ValueError as exc:
            configs.append(None)
            row.update(val_loss=float("inf"), error=str(exc))
            continue
        configs.append((mc, tc))
        try:
            _, rep = train(train_windows, val_windows, mc, tc)
        except FloatingPointError as exc:
            row.update(val_loss=float("inf"), error=str(exc))
            continue
        val = rep.best_val_loss if np.isfinite(rep.best_val_loss) else float("inf")
        row.update(val_loss=val, best_epoch=rep.best_epoch, train_loss=rep.train_loss[rep.best_epoch])
        if val < best_val:
            best_i, best_val = i, val
    if best_i is None:
        raise RuntimeError("every grid combination failed")
    mc, tc = configs[best_i]
    return GridResult(mc, tc, best_i, rows)
