"""Optimization loop, evaluation metrics and the gradient checker.

Training minimizes the multi-horizon weighted loss with Adam over shuffled
batches of equally long sequences, validates after every epoch, keeps the
best checkpoint and stops early when validation stalls. Evaluation reports
the same loss (scaled by 100 for readability) plus squared errors binned by
forecast horizon. The finite-difference gradient checker verifies the whole
model + loss pipeline end to end.
"""

from __future__ import annotations

import gc
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .data import DatasetSplit
from .loss import LossConfig, batched_sequence_loss, prediction_errors
from .models import ModelConfig, SequenceModel, build_model

BIN_WIDTH = 0.02


class TrainingDiverged(RuntimeError):
    pass


@contextmanager
def _no_gc():
    """Pause the cycle collector while tapes churn.

    Tape graphs are acyclic and freed by reference counting alone, but the
    tens of thousands of short-lived tracked objects per batch otherwise
    trigger full collections that dwarf the numerical work.
    """
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


@dataclass(frozen=True)
class TrainConfig:
    """All knobs of one training run; defaults follow the reference setup
    (large hidden size meant for GPU-scale runs; small studies override d_h)."""

    learning_rate: float = 1e-3
    batch_size: int = 16
    max_epochs: int = 300
    patience: int = 20
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def validate(self):
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("learning rate, batch size and epochs must be positive")
        if self.patience < 0:
            raise ValueError("patience must be >= 0")
        self.loss.validate()
        return self


def config_to_flat(config: TrainConfig) -> dict:
    """Flatten to one key-value level for config files and manifests."""
    flat = {}
    for key, value in asdict(config).items():
        if isinstance(value, dict):
            flat.update(value)
        else:
            flat[key] = value
    return flat


def config_from_flat(flat: dict) -> TrainConfig:
    loss_keys = {f.name for f in LossConfig.__dataclass_fields__.values()}
    model_keys = {f.name for f in ModelConfig.__dataclass_fields__.values()}
    loss_kwargs, model_kwargs, top = {}, {}, {}
    for key, value in flat.items():
        if key in loss_keys:
            loss_kwargs[key] = value
        elif key in model_keys:
            model_kwargs[key] = value
        elif key in TrainConfig.__dataclass_fields__:
            top[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    return TrainConfig(loss=LossConfig(**loss_kwargs), model=ModelConfig(**model_kwargs), **top)


def config_hash(config: TrainConfig) -> str:
    payload = json.dumps(config_to_flat(config), sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass
class MetricsReport:
    train_curve: list
    val_curve: list
    test_metric: float          # loss on the test split, times 100
    bins: list                  # [{"lo", "hi", "mse", "count"}]
    best_epoch: int
    epochs_run: int
    wall_clock: float
    seed: int
    config_hash: str

    def to_jsonable(self) -> dict:
        return asdict(self)

    def save(self, json_path, bins_csv_path=None):
        with open(json_path, "w") as f:
            json.dump(self.to_jsonable(), f, sort_keys=True, indent=1)
        if bins_csv_path is not None:
            with open(bins_csv_path, "w") as f:
                f.write("bin_lo,bin_hi,mse,count\n")
                for b in self.bins:
                    f.write(f"{b['lo']!r},{b['hi']!r},{b['mse']!r},{b['count']}\n")


# ---------------------------------------------------------------------------
# Adam


class Adam:
    """Standard bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict, lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(t.values) for k, t in params.items()}
        self.v = {k: np.zeros_like(t.values) for k, t in params.items()}

    def step(self, grads: dict):
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key in sorted(self.params):
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(self.params[key].values)
            if g.shape != self.params[key].values.shape:
                raise ValueError(f"gradient shape {g.shape} does not match "
                                 f"parameter {key!r}")
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[key] / bc1
            v_hat = self.v[key] / bc2
            self.params[key].values = (
                self.params[key].values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))


def adam_step(params: dict, grads: dict, state: Adam | None = None,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> Adam:
    """One optimizer step; creates the state on first use and returns it."""
    if state is None:
        state = Adam(params, lr, beta1, beta2, eps)
    state.step(grads)
    return state


# ---------------------------------------------------------------------------
# evaluation


def _bin_errors(sq: np.ndarray, dt: np.ndarray):
    if len(sq) == 0:
        return []
    idx = np.floor(dt / BIN_WIDTH).astype(int)
    bins = []
    for b in range(int(idx.max()) + 1):
        sel = idx == b
        count = int(sel.sum())
        mse = float(sq[sel].mean()) if count else 0.0
        bins.append({"lo": b * BIN_WIDTH, "hi": (b + 1) * BIN_WIDTH,
                     "mse": mse, "count": count})
    return bins


def _group_by_length(sequences):
    groups = {}
    for k, seq in enumerate(sequences):
        groups.setdefault(seq.num_times, []).append(k)
    return [idxs for _, idxs in sorted(groups.items())]


def _eval_chunk(model: SequenceModel, sequences, loss_config: LossConfig):
    total = 0.0
    sq_all, dt_all = [], []
    with ad.no_grad(), _no_gc():
        for idxs in _group_by_length(sequences):
            seqs = [sequences[k] for k in idxs]
            preds = model.unroll(seqs, loss_config.n_init, loss_config.n_max)
            total += float(batched_sequence_loss(preds, seqs, loss_config).values) * len(seqs)
            sq, dt = prediction_errors(preds, seqs)
            sq_all.append(sq)
            dt_all.append(dt)
    return total, np.concatenate(sq_all), np.concatenate(dt_all)


def _eval_worker(args):
    model, sequences, loss_config = args
    return _eval_chunk(model, sequences, loss_config)


def evaluate(model: SequenceModel, sequences, loss_config: LossConfig, workers: int = 1):
    """Mean per-sequence loss and horizon-binned squared errors.

    Returns ``(loss, bins)`` where bins have width 0.02 starting at 0.
    ``workers`` > 1 splits the sequences over processes; results are reduced
    in a fixed order so the outcome does not depend on scheduling.
    """
    if not sequences:
        raise ValueError("cannot evaluate on an empty sequence list")
    workers = max(1, min(int(workers), len(sequences)))
    if workers == 1:
        total, sq, dt = _eval_chunk(model, sequences, loss_config)
    else:
        chunks = [list(c) for c in np.array_split(np.arange(len(sequences)), workers)]
        jobs = [(model, [sequences[k] for k in c], loss_config) for c in chunks if c]
        with ProcessPoolExecutor(max_workers=len(jobs)) as pool:
            parts = list(pool.map(_eval_worker, jobs))
        total = sum(p[0] for p in parts)
        sq = np.concatenate([p[1] for p in parts])
        dt = np.concatenate([p[2] for p in parts])
    return total / len(sequences), _bin_errors(sq, dt)


# ---------------------------------------------------------------------------
# training


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 101, int(epoch)]))


def _make_batches(sequences, batch_size: int, rng: np.random.Generator):
    """Shuffled batches of equally long sequences."""
    order = rng.permutation(len(sequences))
    by_len = {}
    for k in order:
        by_len.setdefault(sequences[k].num_times, []).append(int(k))
    batches = []
    for _, idxs in sorted(by_len.items()):
        for lo in range(0, len(idxs), batch_size):
            batches.append(idxs[lo:lo + batch_size])
    perm = rng.permutation(len(batches))
    return [batches[p] for p in perm]


def resolve_model_config(config: TrainConfig, dataset: DatasetSplit) -> ModelConfig:
    return replace(config.model, num_nodes=dataset.graph.num_nodes,
                   d_x=dataset.d_x, d_y=dataset.d_y)


def train(config: TrainConfig, dataset: DatasetSplit, log=None):
    """Fit a model on the dataset's train split; early-stop on validation.

    Returns ``(model, MetricsReport)`` with the model holding the best
    checkpoint's parameters. Raises :class:`TrainingDiverged` if the loss
    stops being finite.
    """
    config.validate()
    if not dataset.train or not dataset.val or not dataset.test:
        raise ValueError("training needs non-empty train/val/test splits")
    started = time.perf_counter()
    model_cfg = resolve_model_config(config, dataset)
    model = build_model(model_cfg, dataset.graph, seed=config.seed)
    optimizer = Adam(model.params, lr=config.learning_rate)
    loss_cfg = config.loss

    best_val = np.inf
    best_snapshot = model.snapshot()
    best_epoch = -1
    since_best = 0
    train_curve, val_curve = [], []
    epoch = 0
    for epoch in range(config.max_epochs):
        rng = _epoch_rng(config.seed, epoch)
        total, count = 0.0, 0
        with _no_gc():
            for b, batch_idx in enumerate(_make_batches(dataset.train, config.batch_size, rng)):
                seqs = [dataset.train[k] for k in batch_idx]
                preds = model.unroll(seqs, loss_cfg.n_init, loss_cfg.n_max)
                loss = batched_sequence_loss(preds, seqs, loss_cfg)
                if not np.isfinite(loss.values):
                    raise TrainingDiverged(
                        f"non-finite training loss at epoch {epoch}, batch {b}")
                ad.backward(loss, leaves=model.params.values())
                optimizer.step({k: t.grad for k, t in model.params.items()})
                total += float(loss.values) * len(seqs)
                count += len(seqs)
        gc.collect()
        train_curve.append(total / count)
        val_loss, _ = evaluate(model, dataset.val, loss_cfg)
        val_curve.append(val_loss)
        if log:
            log(f"epoch {epoch}: train {train_curve[-1]:.6f} val {val_loss:.6f}")
        if val_loss < best_val:
            best_val = val_loss
            best_snapshot = model.snapshot()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        if since_best >= config.patience:
            break

    model.load_snapshot(best_snapshot)
    test_loss, bins = evaluate(model, dataset.test, loss_cfg)
    report = MetricsReport(
        train_curve=train_curve,
        val_curve=val_curve,
        test_metric=100.0 * test_loss,
        bins=bins,
        best_epoch=best_epoch,
        epochs_run=epoch + 1,
        wall_clock=time.perf_counter() - started,
        seed=config.seed,
        config_hash=config_hash(config),
    )
    return model, report


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def jitter_params(model: SequenceModel, scale: float = 0.2, seed: int = 0):
    """Move all parameters to a generic point.

    Fresh models keep biases and initial states at exactly zero, where the
    decayed states sit on ReLU kinks and finite differences are ill-defined;
    gradient checks must run away from such points.
    """
    rng = np.random.default_rng(seed)
    for tensor in model.params.values():
        tensor.values = tensor.values + rng.normal(0.0, scale, tensor.values.shape)
    return model


def gradcheck(model: SequenceModel, seqs, loss_config: LossConfig,
              rtol: float = 1e-4, step: float = 1e-5):
    """Compare backward gradients of the sequence loss against central
    finite differences, entry by entry.

    The relative error uses max(|analytic|, |numeric|, atol/rtol) as the
    denominator so that entries with tiny true gradients are judged against
    an absolute floor instead of finite-difference noise. Returns a dict
    with per-parameter and overall maxima; meant for tiny instances.
    """

    def loss_value() -> float:
        with ad.no_grad():
            preds = model.unroll(seqs, loss_config.n_init, loss_config.n_max)
            return float(batched_sequence_loss(preds, seqs, loss_config).values)

    preds = model.unroll(seqs, loss_config.n_init, loss_config.n_max)
    loss = batched_sequence_loss(preds, seqs, loss_config)
    ad.backward(loss, leaves=model.params.values())
    analytic = {k: t.grad.copy() for k, t in model.params.items()}

    floor = 1e-8 / rtol
    per_param = {}
    worst = 0.0
    for name, tensor in model.params.items():
        flat = tensor.values.ravel()
        fd = np.zeros_like(flat)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            f_plus = loss_value()
            flat[k] = orig - step
            f_minus = loss_value()
            flat[k] = orig
            fd[k] = (f_plus - f_minus) / (2.0 * step)
        ga = analytic[name].ravel()
        denom = np.maximum(np.maximum(np.abs(ga), np.abs(fd)), floor)
        rel = float((np.abs(ga - fd) / denom).max()) if flat.size else 0.0
        per_param[name] = rel
        worst = max(worst, rel)
    return {"per_parameter": per_param, "max_rel_error": worst, "passed": worst < rtol}
