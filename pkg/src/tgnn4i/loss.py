"""Multi-horizon weighted squared-error loss over prediction sets.

Every prediction of an observed value enters the loss once, weighted by a
horizon function of the elapsed time between prediction source and target
and divided by the number of times that target gets predicted, so that
later observations never accumulate more total weight. The first warm-up
steps contribute no predictions, and sources look at most a fixed number of
steps ahead; the per-target divisor is capped accordingly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .models import PredictionSet

WEIGHT_KINDS = ("constant", "exponential", "gaussian", "indicator")


class LossError(ValueError):
    pass


@dataclass(frozen=True)
class LossConfig:
    """Weighting choice and loss horizon bookkeeping, with paper-style
    defaults: exponential weighting with time scale 0.04, five warm-up
    steps, ten-step prediction horizon."""

    weight_kind: str = "exponential"
    omega: float = 0.04
    mu: float = 0.1
    lo: float = 0.18
    hi: float = 0.22
    n_init: int = 5
    n_max: int = 10

    def validate(self):
        if self.weight_kind not in WEIGHT_KINDS:
            raise LossError(f"unknown weight kind {self.weight_kind!r}; "
                            f"expected one of {WEIGHT_KINDS}")
        if self.omega <= 0:
            raise LossError("weight time scale must be positive")
        if self.lo >= self.hi:
            raise LossError("indicator window must satisfy lo < hi")
        if self.n_init < 0 or self.n_max < 1:
            raise LossError("need n_init >= 0 and n_max >= 1")
        return self


def weight_fn(config: LossConfig, delta_t):
    """Horizon weight w(delta_t) >= 0, vectorized over arrays."""
    dt = np.asarray(delta_t, dtype=np.float64)
    if np.any(dt < 0):
        raise LossError("horizon weights are defined for non-negative elapsed time")
    kind = config.weight_kind
    if kind == "constant":
        out = np.ones_like(dt)
    elif kind == "exponential":
        out = np.exp(-dt / config.omega)
    elif kind == "gaussian":
        out = np.exp(-(((dt - config.mu) / config.omega) ** 2))
    else:
        out = ((dt >= config.lo) & (dt <= config.hi)).astype(np.float64)
    return out if out.ndim else float(out)


def num_target_observations(mask, n_init: int) -> int:
    """Count node observations at times that can appear as loss targets."""
    return int(np.asarray(mask)[n_init + 1:].sum())


def _entry_scales(preds: PredictionSet, times, mask_per_seq, config: LossConfig):
    """Per-entry factor w / (capped target multiplicity) / N_obs / batch."""
    t_src = times[preds.src_idx, preds.seq_idx]
    t_tgt = times[preds.tgt_idx, preds.seq_idx]
    w = np.asarray(weight_fn(config, t_tgt - t_src))
    denom = np.minimum(config.n_max, preds.tgt_idx - config.n_init)
    n_obs = np.array([num_target_observations(m, config.n_init) for m in mask_per_seq])
    if np.any(n_obs == 0):
        raise LossError("a sequence has no observations past the warm-up phase")
    return w / denom / n_obs[preds.seq_idx] / len(mask_per_seq)


def _weighted_sum(preds: PredictionSet, y_true: np.ndarray, scales: np.ndarray) -> Tensor:
    err = ad.square(ad.sub(preds.yhat, Tensor(y_true)))
    d_y = y_true.shape[1]
    per_entry = ad.matmul(err, Tensor(np.full(d_y, 1.0 / d_y)))
    return ad.tensor_sum(ad.mul(per_entry, Tensor(scales)))


def sequence_loss(preds: PredictionSet, seq, config: LossConfig) -> Tensor:
    """Weighted multi-horizon squared error of one sequence's predictions."""
    config.validate()
    if (preds.n_init, preds.n_max) != (config.n_init, config.n_max):
        raise LossError(f"prediction set was built with horizon settings "
                        f"({preds.n_init}, {preds.n_max}), loss expects "
                        f"({config.n_init}, {config.n_max})")
    if num_target_observations(seq.mask, config.n_init) == 0:
        raise LossError("no observations past the warm-up phase; nothing to supervise")
    if len(preds) == 0:
        return Tensor(np.zeros(()))
    times = seq.times[:, None]
    scales = _entry_scales(preds, times, [seq.mask], config)
    y_true = seq.y[preds.tgt_idx, preds.node_idx]
    return _weighted_sum(preds, y_true, scales)


def batched_sequence_loss(preds: PredictionSet, seqs, config: LossConfig) -> Tensor:
    """Mean of the per-sequence losses of one batch, computed in one pass.

    Equal to averaging :func:`sequence_loss` over the batch (up to float
    rounding): the per-sequence normalizations are folded into one weight
    vector over all prediction entries.
    """
    config.validate()
    if (preds.n_init, preds.n_max) != (config.n_init, config.n_max):
        raise LossError("prediction set and loss config disagree on horizons")
    if len(preds) == 0:
        return Tensor(np.zeros(()))
    times = np.stack([s.times for s in seqs], axis=1)
    scales = _entry_scales(preds, times, [s.mask for s in seqs], config)
    y = np.stack([s.y for s in seqs], axis=1)
    y_true = y[preds.tgt_idx, preds.seq_idx, preds.node_idx]
    return _weighted_sum(preds, y_true, scales)


def batch_loss(losses) -> Tensor:
    """Arithmetic mean of per-sequence scalar losses."""
    losses = list(losses)
    if not losses:
        raise LossError("cannot average an empty batch")
    total = losses[0]
    for term in losses[1:]:
        total = ad.add(total, term)
    return ad.scale(total, 1.0 / len(losses))


def prediction_errors(preds: PredictionSet, seqs) -> tuple[np.ndarray, np.ndarray]:
    """Per-entry squared error (mean over output dims) and elapsed time.

    Plain arrays for metric reporting; no gradients involved.
    """
    times = np.stack([s.times for s in seqs], axis=1)
    y = np.stack([s.y for s in seqs], axis=1)
    y_true = y[preds.tgt_idx, preds.seq_idx, preds.node_idx]
    sq = ((preds.yhat.values - y_true) ** 2).mean(axis=1)
    dt = times[preds.tgt_idx, preds.seq_idx] - times[preds.src_idx, preds.seq_idx]
    return sq, dt
