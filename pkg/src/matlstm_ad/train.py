"""Adam training loop with global-norm clipping and early stopping."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import matgrad as mg
from .errors import ContractError, NumericalError
from .models import (
    Model,
    ModelSpec,
    SequenceDataset,
    init_params,
    loss_node,
    per_sequence_losses,
    prepare_frames,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    clip_norm: float = 5.0
    seed: int = 0
    val_fraction: float = 0.2
    min_rel_improvement: float = 1e-6

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ContractError("learning_rate must be positive")
        if not 0.0 < self.val_fraction < 1.0:
            raise ContractError("val_fraction must be in (0, 1)")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ContractError("batch_size, max_epochs and patience must be >= 1")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> tuple[dict, AdamState]:
    """Bias-corrected Adam update; returns new parameter and state objects."""
    t = state.step + 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ContractError(f"gradient for {name} is {g.shape}, parameter is {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        new_p[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    return new_p, AdamState(new_m, new_v, t, b1, b2, state.eps)


def global_norm(grads: dict) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_by_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = global_norm(grads)
    if norm <= max_norm or norm == 0.0:
        return grads, norm
    f = max_norm / norm
    return {k: g * f for k, g in grads.items()}, norm


@dataclass
class History:
    records: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_loss: float = math.inf
    stopped_early: bool = False

    def to_dict(self) -> dict:
        return {
            "records": self.records,
            "best_epoch": self.best_epoch,
            "best_val_loss": self.best_val_loss,
            "stopped_early": self.stopped_early,
        }


def split_indices(n: int, val_fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n))
    n_val = min(max(n_val, 1), n - 1) if n >= 2 else 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def _mean_loss(spec, params, frames, chunk=256) -> float:
    parts = [per_sequence_losses(spec, params, frames[i:i + chunk]) for i in range(0, len(frames), chunk)]
    return float(np.mean(np.concatenate(parts)))


def train(spec: ModelSpec, dataset: SequenceDataset, cfg: TrainConfig | None = None, params=None):
    """Fit a model; returns ``(model, history)`` with the best-validation parameters.

    Two-layer layerwise specs are delegated to the bottom-up stacking
    routine, in which case ``history`` is a list with one entry per layer.
    """
    cfg = cfg or TrainConfig()
    if len(dataset) == 0:
        raise ContractError("training dataset is empty")
    if spec.layerwise:
        from .models import stack_layerwise_train

        return stack_layerwise_train(dataset, spec, cfg)

    init_seq, split_seq, shuffle_seq, drop_seq = np.random.SeedSequence(cfg.seed).spawn(4)
    params = init_params(spec, int(init_seq.generate_state(1)[0])) if params is None else {
        k: np.array(v, dtype=np.float64) for k, v in params.items()
    }
    shuffle_rng = np.random.default_rng(shuffle_seq)
    drop_rng = np.random.default_rng(drop_seq)

    frames = prepare_frames(spec, dataset.frames)
    train_idx, val_idx = split_indices(len(frames), cfg.val_fraction, np.random.default_rng(split_seq))
    val_frames = frames[val_idx] if len(val_idx) else frames[train_idx]

    state = AdamState.zeros_like(params)
    hist = History()
    best = {k: v.copy() for k, v in params.items()}
    stale = 0
    for epoch in range(cfg.max_epochs):
        order = shuffle_rng.permutation(train_idx)
        batch_losses = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = frames[np.sort(order[start:start + cfg.batch_size])]
            tape = mg.Tape()
            nodes = tape.params_from(params)
            loss = loss_node(spec, nodes, batch, training=True, rng=drop_rng)
            lv = float(loss.value[0, 0])
            if not math.isfinite(lv):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b)
            grads = tape.backward(loss)
            tape.clear()
            grads, _ = clip_by_global_norm(grads, cfg.clip_norm)
            params, state = adam_step(params, grads, state, cfg.learning_rate)
            batch_losses.append(lv)
        val = _mean_loss(spec, params, val_frames)
        if not math.isfinite(val):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}", epoch, None)
        rec = {"epoch": epoch, "train_loss": float(np.mean(batch_losses)), "val_loss": val}
        hist.records.append(rec)
        log.debug("epoch %d train %.6f val %.6f", epoch, rec["train_loss"], val)
        significant = val < hist.best_val_loss * (1.0 - cfg.min_rel_improvement)
        if val < hist.best_val_loss or hist.best_epoch < 0:
            hist.best_val_loss, hist.best_epoch = val, epoch
            best = {k: v.copy() for k, v in params.items()}
        if significant:
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                hist.stopped_early = True
                break
    return Model(spec, best), hist
