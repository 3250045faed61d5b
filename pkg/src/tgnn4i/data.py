"""Datasets of irregularly observed graph time series.

A sequence stores strictly increasing observation times, a node mask per
time, target values and input features; values and features are exactly
zero wherever the mask is zero, and every time point has at least one
observed node. The synthetic generator produces periodic signals that
propagate along a random DAG with a fixed lag; ``irregularize`` turns any
regularly sampled, fully observed dataset into this irregular form.

All randomness derives from one 64-bit seed. Independent streams are split
off by purpose and sequence index, so generation order (or parallelism)
cannot change the output.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .graph import GraphError, GraphTopology, build_delaunay_dag, load_edge_csv, save_edge_csv

FEATURE_KINDS = ("time-of-day+staleness", "staleness-only")

_STREAMS = {"graph": 1, "phases": 2, "sequence": 3, "split": 4, "subsample": 5}


class DataError(ValueError):
    pass


def stream_rng(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """Independent, reproducible generator for one purpose and index."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), _STREAMS[purpose], int(index)]))


@dataclass
class ObservationSequence:
    """One graph time series with per-time node masks."""

    times: np.ndarray  # (N_t,)
    mask: np.ndarray   # (N_t, V) bool
    y: np.ndarray      # (N_t, V, d_y)
    x: np.ndarray      # (N_t, V, d_x)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.y = np.asarray(self.y, dtype=np.float64)
        self.x = np.asarray(self.x, dtype=np.float64)

    @property
    def num_times(self) -> int:
        return len(self.times)

    @property
    def num_nodes(self) -> int:
        return self.mask.shape[1]

    @property
    def d_y(self) -> int:
        return self.y.shape[2]

    @property
    def d_x(self) -> int:
        return self.x.shape[2]

    def validate(self):
        n_t, v = self.mask.shape
        if self.times.shape != (n_t,):
            raise DataError("times and mask lengths differ")
        if self.y.shape[:2] != (n_t, v) or self.x.shape[:2] != (n_t, v):
            raise DataError("value/feature arrays do not match the mask shape")
        if n_t == 0:
            raise DataError("empty sequence")
        if np.any(np.diff(self.times) <= 0):
            raise DataError("times must be strictly increasing")
        if not np.all(self.mask.any(axis=1)):
            raise DataError("every time point needs at least one observed node")
        off = ~self.mask
        if np.any(self.y[off] != 0) or np.any(self.x[off] != 0):
            raise DataError("values/features must be zero where the mask is zero")
        return self


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list
    graph: GraphTopology
    d_x: int
    d_y: int
    meta: dict = field(default_factory=dict)

    def all_sequences(self):
        return list(self.train) + list(self.val) + list(self.test)


# ---------------------------------------------------------------------------
# synthetic periodic data


def synthetic_clean_signals(graph: GraphTopology, phases, offsets,
                            grid: int = 1000, lag_steps: int = 50) -> np.ndarray:
    """Noise-free node signals on the full time grid.

    Each node's signal is its own sinusoid plus half the average of its
    parents' signals at a fixed lag; parents are resolved in topological
    order and signals are zero before time zero. Grid point k carries time
    (k + 1) / grid, so the lag is an exact number of grid steps.
    """
    v = graph.num_nodes
    t = (np.arange(grid, dtype=np.float64) + 1.0) / grid
    base = np.sin(np.outer(t, phases) + np.asarray(offsets)[None, :])
    signals = np.zeros((grid, v))
    for n in graph.topological_order():
        parents = graph.in_neighbors(n)
        total = base[:, n].copy()
        if parents:
            acc = np.zeros(grid)
            for m, _w in parents:
                acc[lag_steps:] += signals[:-lag_steps, m]
            total += 0.5 / len(parents) * acc
        signals[:, n] = total
    return signals


def _sample_synthetic_graph(seed: int, num_nodes: int, retries: int = 20):
    for attempt in range(retries):
        rng = stream_rng(seed, "graph", attempt)
        positions = rng.uniform(0.0, 1.0, size=(num_nodes, 2))
        order = rng.permutation(num_nodes)
        try:
            return build_delaunay_dag(positions, order), positions
        except GraphError:
            continue
    raise DataError("could not sample a non-degenerate node layout")


def generate_synthetic(seed: int, num_nodes: int = 20, num_sequences: int = 200,
                       times_per_seq: int = 70, grid: int = 1000,
                       obs_fraction: float = 0.5, lag: float = 0.05,
                       noise_std: float = 0.01, phi_range=(20.0, 100.0),
                       split_counts=(100, 50, 50)) -> DatasetSplit:
    """Sample the synthetic periodic dataset.

    Node frequencies are drawn once and kept across sequences; phase
    offsets are redrawn per sequence. Each sequence samples a subset of the
    grid times and keeps a fraction of all node observations.
    """
    if not 0.0 < obs_fraction <= 1.0:
        raise DataError(f"observation fraction must be in (0, 1], got {obs_fraction}")
    if sum(split_counts) != num_sequences:
        raise DataError("split counts must sum to the number of sequences")
    lag_steps = int(round(lag * grid))
    if abs(lag_steps - lag * grid) > 1e-9 or lag_steps < 0:
        raise DataError(f"lag {lag} is not a whole number of grid steps")
    graph, positions = _sample_synthetic_graph(seed, num_nodes)
    phases = stream_rng(seed, "phases").uniform(phi_range[0], phi_range[1], size=num_nodes)

    keep_pairs = int(round(obs_fraction * times_per_seq * num_nodes))
    sequences = []
    for s in range(num_sequences):
        rng = stream_rng(seed, "sequence", s)
        offsets = rng.uniform(0.0, 2.0 * np.pi, size=num_nodes)
        clean = synthetic_clean_signals(graph, phases, offsets, grid, lag_steps)
        t_idx = np.sort(rng.choice(grid, size=times_per_seq, replace=False))
        flat = rng.choice(times_per_seq * num_nodes, size=keep_pairs, replace=False)
        mask = np.zeros(times_per_seq * num_nodes, dtype=bool)
        mask[flat] = True
        mask = mask.reshape(times_per_seq, num_nodes)
        noise = rng.normal(0.0, noise_std, size=(times_per_seq, num_nodes))
        values = (clean[t_idx] + noise) * mask
        keep_rows = mask.any(axis=1)
        seq = ObservationSequence(
            times=(t_idx[keep_rows] + 1.0) / grid,
            mask=mask[keep_rows],
            y=values[keep_rows][:, :, None],
            x=np.zeros((int(keep_rows.sum()), num_nodes, 0)),
        )
        sequences.append(seq.validate())

    n_train, n_val, n_test = split_counts
    meta = {
        "seed": int(seed),
        "kind": "synthetic-periodic",
        "num_nodes": num_nodes,
        "grid": grid,
        "lag_steps": lag_steps,
        "noise_std": noise_std,
        "obs_fraction": obs_fraction,
        "node_positions": positions.tolist(),
        "node_frequencies": phases.tolist(),
    }
    return DatasetSplit(
        train=sequences[:n_train],
        val=sequences[n_train:n_train + n_val],
        test=sequences[n_train + n_val:],
        graph=graph, d_x=0, d_y=1, meta=meta,
    )


# ---------------------------------------------------------------------------
# irregular subsampling of regular data


def irregularize(sequences, keep_times: int, obs_fraction: float, seed: int):
    """Subsample regular, fully observed sequences into irregular ones.

    Keeps a sorted random subset of time indices (shared by all nodes
    within a sequence, resampled per sequence), then a random fraction of
    all remaining (node, time) observations. Retained values are copied
    bit-exactly; time rows left without any observation are dropped.
    """
    if not 0.0 < obs_fraction <= 1.0:
        raise DataError(f"observation fraction must be in (0, 1], got {obs_fraction}")
    out = []
    for s, seq in enumerate(sequences):
        seq.validate()
        if not np.all(seq.mask):
            raise DataError("irregularize expects fully observed input sequences")
        if not 1 <= keep_times <= seq.num_times:
            raise DataError(f"cannot keep {keep_times} of {seq.num_times} time points")
        rng = stream_rng(seed, "subsample", s)
        t_idx = np.sort(rng.choice(seq.num_times, size=keep_times, replace=False))
        v = seq.num_nodes
        keep_pairs = int(round(obs_fraction * keep_times * v))
        if keep_pairs < 1:
            raise DataError("observation fraction leaves an empty sequence")
        flat = rng.choice(keep_times * v, size=keep_pairs, replace=False)
        mask = np.zeros(keep_times * v, dtype=bool)
        mask[flat] = True
        mask = mask.reshape(keep_times, v)
        keep_rows = mask.any(axis=1)
        mask = mask[keep_rows]
        rows = t_idx[keep_rows]
        out.append(ObservationSequence(
            times=seq.times[rows],
            mask=mask,
            y=seq.y[rows] * mask[:, :, None],
            x=seq.x[rows] * mask[:, :, None],
        ).validate())
    return out


def rescale_time(seq: ObservationSequence, span=None) -> ObservationSequence:
    """Divide all times by the grid span so they land in (0, 1].

    ``span`` defaults to the last time of the sequence, which equals the
    grid span for regular input; pass the original span explicitly when
    rescaling after subsampling.
    """
    span = float(seq.times[-1]) if span is None else float(span)
    if span <= 0:
        raise DataError(f"time span must be positive, got {span}")
    return ObservationSequence(seq.times / span, seq.mask, seq.y, seq.x)


def add_standard_features(seq: ObservationSequence, kind: str) -> ObservationSequence:
    """Append time-of-day and/or staleness features for observed entries.

    Staleness of an observed entry is the time since that node was last
    observed; a first observation counts from the sequence start, i.e. the
    feature equals the time itself. Feature rows stay zero off the mask.
    """
    if kind not in FEATURE_KINDS:
        raise DataError(f"unknown feature kind {kind!r}; expected one of {FEATURE_KINDS}")
    n_t, v = seq.mask.shape
    staleness = np.zeros((n_t, v))
    last_seen = np.zeros(v)
    for i in range(n_t):
        row = seq.mask[i]
        staleness[i, row] = seq.times[i] - last_seen[row]
        last_seen[row] = seq.times[i]
    cols = []
    if kind == "time-of-day+staleness":
        tod = np.tile(seq.times[:, None], (1, v)) * seq.mask
        cols.append(tod[:, :, None])
    cols.append(staleness[:, :, None])
    x = np.concatenate([seq.x] + cols, axis=2)
    return ObservationSequence(seq.times, seq.mask, seq.y, x).validate()


def split_dataset(sequences, ratios=(0.7, 0.1, 0.2), seed: int = 0):
    """Randomly partition sequences into train/val/test by the ratios."""
    n = len(sequences)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    n_test = n - n_train - n_val
    if min(n_train, n_val, n_test) < 1:
        raise DataError(f"{n} sequences are too few for non-empty splits {ratios}")
    perm = stream_rng(seed, "split").permutation(n)
    train = [sequences[i] for i in perm[:n_train]]
    val = [sequences[i] for i in perm[n_train:n_train + n_val]]
    test = [sequences[i] for i in perm[n_train + n_val:]]
    return train, val, test


# ---------------------------------------------------------------------------
# on-disk format: graph.csv + meta.json + seq_<id>.csv (observed rows only)


def save_dataset(split: DatasetSplit, path):
    os.makedirs(path, exist_ok=True)
    save_edge_csv(split.graph, os.path.join(path, "graph.csv"))
    seqs = split.all_sequences()
    membership = {
        "train": list(range(len(split.train))),
        "val": list(range(len(split.train), len(split.train) + len(split.val))),
        "test": list(range(len(split.train) + len(split.val), len(seqs))),
    }
    meta = dict(split.meta)
    meta.update({
        "num_nodes": split.graph.num_nodes,
        "d_x": split.d_x,
        "d_y": split.d_y,
        "split": membership,
    })
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=1)
    header = (["t", "node", "observed"]
              + [f"y_{k}" for k in range(split.d_y)]
              + [f"x_{k}" for k in range(split.d_x)])
    for sid, seq in enumerate(seqs):
        with open(os.path.join(path, f"seq_{sid:04d}.csv"), "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for i in range(seq.num_times):
                for n in np.flatnonzero(seq.mask[i]):
                    row = [repr(float(seq.times[i])), int(n), 1]
                    row += [repr(float(val)) for val in seq.y[i, n]]
                    row += [repr(float(val)) for val in seq.x[i, n]]
                    writer.writerow(row)


def _load_sequence_csv(path, num_nodes: int, d_y: int, d_x: int) -> ObservationSequence:
    times = []
    rows = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        expected = (["t", "node", "observed"]
                    + [f"y_{k}" for k in range(d_y)]
                    + [f"x_{k}" for k in range(d_x)])
        if header != expected:
            raise DataError(f"{path}: bad header {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(expected):
                raise DataError(f"{path}:{lineno}: expected {len(expected)} fields")
            try:
                t = float(row[0])
                node = int(row[1])
                observed = int(row[2])
                vals = [float(vstr) for vstr in row[3:]]
            except ValueError as err:
                raise DataError(f"{path}:{lineno}: {err}") from None
            if observed not in (0, 1):
                raise DataError(f"{path}:{lineno}: observed flag must be 0 or 1")
            if not 0 <= node < num_nodes:
                raise DataError(f"{path}:{lineno}: node id {node} out of range")
            if observed == 0 and any(v != 0.0 for v in vals):
                raise DataError(f"{path}:{lineno}: unobserved entry carries nonzero values")
            if not times or t > times[-1]:
                times.append(t)
            elif t < times[-1]:
                raise DataError(f"{path}:{lineno}: times are not sorted")
            if observed:
                rows.append((len(times) - 1, node, vals))
    n_t = len(times)
    mask = np.zeros((n_t, num_nodes), dtype=bool)
    y = np.zeros((n_t, num_nodes, d_y))
    x = np.zeros((n_t, num_nodes, d_x))
    for i, node, vals in rows:
        if mask[i, node]:
            raise DataError(f"{path}: duplicate observation of node {node} at time index {i}")
        mask[i, node] = True
        y[i, node] = vals[:d_y]
        x[i, node] = vals[d_y:]
    try:
        return ObservationSequence(np.array(times), mask, y, x).validate()
    except DataError as err:
        raise DataError(f"{path}: {err}") from None


def load_dataset(path) -> DatasetSplit:
    with open(os.path.join(path, "meta.json")) as f:
        meta = json.load(f)
    num_nodes, d_x, d_y = meta["num_nodes"], meta["d_x"], meta["d_y"]
    graph = load_edge_csv(os.path.join(path, "graph.csv"), num_nodes=num_nodes)
    membership = meta["split"]
    seqs = {}
    for part in ("train", "val", "test"):
        for sid in membership[part]:
            seqs[sid] = _load_sequence_csv(
                os.path.join(path, f"seq_{sid:04d}.csv"), num_nodes, d_y, d_x)
    return DatasetSplit(
        train=[seqs[i] for i in membership["train"]],
        val=[seqs[i] for i in membership["val"]],
        test=[seqs[i] for i in membership["test"]],
        graph=graph, d_x=d_x, d_y=d_y, meta=meta,
    )
