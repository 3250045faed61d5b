"""Forecasting models over continuous-time per-node latent states.

The main model keeps, for every node, a decay target, a jump value (the
dynamic component right after the node's last update) and the dynamics
parameters for the current inter-observation interval. When a node is
observed, a GRU-style update driven by two graph message-passing pathways
(one over decayed states, one over observations and features) produces the
new full state, a separate gate set produces the new decay target, the jump
value is their difference, and a softplus head emits the new dynamics
parameters. Unobserved nodes keep their state entirely. Predictions at any
time evolve every node to that time and apply a message-passing head over
states and features.

Two recurrent baselines reuse the same cell: one treats every node as an
independent series (pathways become plain matrices, the head becomes fully
connected), the other models the whole graph as a single node with
concatenated observations. A training-free baseline repeats the last
observed value.

Sequences are processed in batches by stacking B copies of the graph into
one block-diagonal system; multi-horizon predictions are deferred and run
in large stacked blocks so the per-step work stays in a few matrix products.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse
from scipy.special import expit

from . import autodiff as ad
from .autodiff import SparseOperand, Tensor
from .data import ObservationSequence
from .dynamics import check_latent_dim, evolve
from .gnn import FcStack, GnnStack, init_weight
from .graph import GraphTopology

MODEL_KINDS = ("tgnn4i", "grud-node", "grud-joint")


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture choices plus the data dimensions they must fit."""

    model: str = "tgnn4i"
    dynamics: str = "exponential"
    d_h: int = 128
    gnn_layers_gru: int = 2
    gnn_layers_g: int = 2
    fc_layers_g: int = 2
    num_nodes: int = 0
    d_x: int = 0
    d_y: int = 1

    def validate(self):
        if self.model not in MODEL_KINDS:
            raise ModelError(f"unknown model {self.model!r}; expected one of {MODEL_KINDS}")
        check_latent_dim(self.dynamics, self.d_h)
        if self.d_h < 1 or self.num_nodes < 1 or self.d_y < 1 or self.d_x < 0:
            raise ModelError("model dimensions must be positive")
        if self.model == "tgnn4i" and self.gnn_layers_gru < 1:
            raise ModelError("the GRU pathways need at least one message-passing layer")
        if self.gnn_layers_g + self.fc_layers_g < 1:
            raise ModelError("the predictive head needs at least one layer")
        return self


@dataclass
class NodeLatentBank:
    """Continuous-time state of all node rows at some point in a sequence."""

    decay_target: Tensor      # (rows, d_h)
    jump: Tensor              # (rows, d_h) dynamic component at the last update
    rates: Tensor | None      # (rows, d_h) positive dynamics parameters
    t_last: np.ndarray        # (rows,) time of each row's last update


@dataclass
class PredictionSet:
    """Multi-horizon predictions: one row per (source i, target j, node)."""

    src_idx: np.ndarray       # 0-based source time index i
    tgt_idx: np.ndarray       # 0-based target time index j, always > src
    node_idx: np.ndarray      # base-graph node id, observed at j
    seq_idx: np.ndarray       # which sequence of the batch
    yhat: Tensor              # (K, d_y)
    n_init: int
    n_max: int

    def __len__(self):
        return len(self.src_idx)

    def entries(self):
        """Iterate (i, j, node, seq, prediction-row) for inspection."""
        for k in range(len(self.src_idx)):
            yield (int(self.src_idx[k]), int(self.tgt_idx[k]), int(self.node_idx[k]),
                   int(self.seq_idx[k]), self.yhat.values[k])


def prediction_pairs(n_t: int, n_init: int, n_max: int):
    """All (source, target) index pairs entering the loss, 0-based."""
    if n_init + 2 > n_t:
        raise ModelError(f"sequence of length {n_t} has nothing to train on "
                         f"after {n_init} warm-up steps")
    return [(i, j) for i in range(n_init, n_t - 1)
            for j in range(i + 1, min(i + n_max, n_t - 1) + 1)]


class LinearMap:
    """Single shared matrix; the graph-free stand-in for a pathway stack."""

    def __init__(self, weight: Tensor):
        self.weight = weight

    @classmethod
    def init(cls, rng, d_in: int, d_out: int) -> "LinearMap":
        return cls(init_weight(rng, d_in, d_out))

    def apply(self, x: Tensor, agg=None, rows=None) -> Tensor:
        if rows is not None:
            x = ad.gather_rows(x, rows, unique=True)
        return ad.matmul(x, self.weight)

    def parameters(self):
        return [self.weight]


class PredictiveHead:
    """Message-passing layers followed by fully connected ones, ReLU between
    every pair of consecutive layers and nothing after the last."""

    def __init__(self, gnn: GnnStack | None, fc: FcStack | None):
        self.gnn = gnn
        self.fc = fc

    def apply(self, x: Tensor, agg, rows=None) -> Tensor:
        """Forward; ``rows`` restricts the per-node tail of the computation
        (message passing still sees every node where it has to)."""
        if self.gnn is not None:
            x = self.gnn.apply(x, agg, rows=rows)
            if self.fc is not None and self.fc.layers:
                x = ad.relu(x)
        elif rows is not None:
            x = ad.gather_rows(x, rows, unique=True)
        if self.fc is not None and self.fc.layers:
            x = self.fc.apply(x)
        return x

    def parameters(self):
        out = []
        if self.gnn is not None:
            out += self.gnn.parameters()
        if self.fc is not None:
            out += self.fc.parameters()
        return out


_BIAS_NAMES = ("reset", "update", "candidate",
               "target_reset", "target_update", "target_candidate", "rates")


def gated_update(u: Tensor, v: Tensor, bias: Tensor, h_obs: Tensor,
                 target_obs: Tensor) -> Tensor:
    """The full gate block of one update, fused into a single tape op.

    ``u`` and ``v`` are the state- and input-pathway outputs for the updated
    rows, each seven chunks wide; ``bias`` is the concatenation of the seven
    bias vectors. Chunks 1-2 gate a candidate for the new full state against
    the decayed state ``h_obs``; chunks 4-5-6 run the same scheme for the
    decay target against its previous value; chunk 7 yields the positive
    dynamics parameters through a softplus. Returns the new decay target,
    jump value (full state minus target) and dynamics parameters as one
    (rows, 3 d_h) tensor. Fusing the ~20 elementary steps keeps the
    sequential update loop off the tape's slow path; the backward closure
    applies the textbook gate derivatives in one pass.
    """
    d7 = u.values.shape[1]
    d = d7 // 7
    uv_, vv_ = u.values, v.values
    s = vv_ + bias.values[None, :]
    hv, tv = h_obs.values, target_obs.values

    r = expit(s[:, 0:d] + uv_[:, 0:d])
    z = expit(s[:, d:2 * d] + uv_[:, d:2 * d])
    q = np.tanh(s[:, 2 * d:3 * d] + r * uv_[:, 2 * d:3 * d])
    full = hv + z * (q - hv)
    rb = expit(s[:, 3 * d:4 * d] + uv_[:, 3 * d:4 * d])
    zb = expit(s[:, 4 * d:5 * d] + uv_[:, 4 * d:5 * d])
    qb = np.tanh(s[:, 5 * d:6 * d] + rb * uv_[:, 5 * d:6 * d])
    target = tv + zb * (qb - tv)
    a7 = s[:, 6 * d:7 * d] + uv_[:, 6 * d:7 * d]
    rates = np.logaddexp(0.0, a7)
    out = np.concatenate([target, full - target, rates], axis=1)

    def backward_fn(g):
        g_target, g_jump, g_rates = g[:, 0:d], g[:, d:2 * d], g[:, 2 * d:3 * d]
        d_full = g_jump
        d_target = g_target - g_jump

        d_z = d_full * (q - hv)
        d_q = d_full * z
        d_h = d_full * (1.0 - z)
        d_a3 = d_q * (1.0 - q * q)
        d_r = d_a3 * uv_[:, 2 * d:3 * d]
        d_a1 = d_r * r * (1.0 - r)
        d_a2 = d_z * z * (1.0 - z)

        d_zb = d_target * (qb - tv)
        d_qb = d_target * zb
        d_tbar = d_target * (1.0 - zb)
        d_a6 = d_qb * (1.0 - qb * qb)
        d_rb = d_a6 * uv_[:, 5 * d:6 * d]
        d_a4 = d_rb * rb * (1.0 - rb)
        d_a5 = d_zb * zb * (1.0 - zb)
        d_a7 = g_rates * expit(a7)

        d_v = np.concatenate([d_a1, d_a2, d_a3, d_a4, d_a5, d_a6, d_a7], axis=1)
        d_u = d_v.copy()
        d_u[:, 2 * d:3 * d] *= r
        d_u[:, 5 * d:6 * d] *= rb
        return d_u, d_v, d_v.sum(axis=0), d_h, d_tbar

    return ad.make_op(out, "gated-update", (u, v, bias, h_obs, target_obs), backward_fn)


class SequenceModel:
    """Recurrent forecaster over a fixed graph; see the module docstring.

    ``model_nodes`` is the number of rows the cell runs on per sequence: the
    graph size for the per-node models, 1 for the joint baseline.
    """

    def __init__(self, config: ModelConfig, graph: GraphTopology, seed: int = 0):
        config.validate()
        if config.num_nodes != graph.num_nodes:
            raise ModelError("config num_nodes does not match the graph")
        self.config = config
        self.graph = graph
        self.is_joint = config.model == "grud-joint"
        self.model_nodes = 1 if self.is_joint else graph.num_nodes
        # Cell input widths. The pathway over observations sees values,
        # features and one observed-indicator per underlying node.
        if self.is_joint:
            self.d_y_cell = config.d_y * graph.num_nodes
            self.d_x_cell = config.d_x * graph.num_nodes
            self.n_indicator = graph.num_nodes
        else:
            self.d_y_cell = config.d_y
            self.d_x_cell = config.d_x
            self.n_indicator = 1
        d_h = config.d_h
        d_in_w = self.d_y_cell + self.d_x_cell + self.n_indicator
        rng = np.random.default_rng(seed)

        if config.model == "tgnn4i":
            u_dims = [d_h] + [d_h] * (config.gnn_layers_gru - 1) + [7 * d_h]
            w_dims = [d_in_w] + [d_h] * (config.gnn_layers_gru - 1) + [7 * d_h]
            self.pathway_state = GnnStack.init(rng, u_dims)
            self.pathway_input = GnnStack.init(rng, w_dims)
        else:
            self.pathway_state = LinearMap.init(rng, d_h, 7 * d_h)
            self.pathway_input = LinearMap.init(rng, d_in_w, 7 * d_h)

        self.biases = [ad.parameter(np.zeros(d_h)) for _ in _BIAS_NAMES]

        head_in = d_h + self.d_x_cell
        d_out = self.d_y_cell
        if config.model == "tgnn4i":
            n_g = config.gnn_layers_g
            gnn_dims = [head_in] + [d_h] * max(n_g - 1, 0) + ([d_h] if config.fc_layers_g else [d_out])
            gnn = GnnStack.init(rng, gnn_dims[:n_g + 1]) if n_g else None
            fc_in = gnn_dims[n_g] if n_g else head_in
            fc_dims = [fc_in] + [d_h] * (config.fc_layers_g - 1) + [d_out]
            fc = FcStack.init(rng, fc_dims) if config.fc_layers_g else None
            self.head = PredictiveHead(gnn, fc)
        else:
            n_fc = config.gnn_layers_g + config.fc_layers_g
            fc_dims = [head_in] + [d_h] * (n_fc - 1) + [d_out]
            self.head = PredictiveHead(None, FcStack.init(rng, fc_dims))

        self.initial_state = ad.parameter(np.zeros((self.model_nodes, d_h)))
        self._params = self._collect_params()
        self._agg_cache: dict = {}

    # -- parameter registry -------------------------------------------------

    def _collect_params(self):
        params = {}

        def register(prefix, obj):
            if isinstance(obj, GnnStack):
                for i, layer in enumerate(obj.layers):
                    params[f"{prefix}.{i}.self"] = layer.w_self
                    params[f"{prefix}.{i}.neigh"] = layer.w_neigh
            elif isinstance(obj, LinearMap):
                params[f"{prefix}.matrix"] = obj.weight
            elif isinstance(obj, FcStack):
                for i, layer in enumerate(obj.layers):
                    params[f"{prefix}.{i}.weight"] = layer.weight
                    params[f"{prefix}.{i}.bias"] = layer.bias

        register("gru_state", self.pathway_state)
        register("gru_input", self.pathway_input)
        for name, bias in zip(_BIAS_NAMES, self.biases):
            params[f"bias.{name}"] = bias
        if self.head.gnn is not None:
            register("head.gnn", self.head.gnn)
        if self.head.fc is not None:
            register("head.fc", self.head.fc)
        params["initial_state"] = self.initial_state
        return params

    @property
    def params(self) -> dict:
        return self._params

    def snapshot(self) -> dict:
        return {name: t.values.copy() for name, t in self._params.items()}

    def load_snapshot(self, snapshot: dict):
        for name, t in self._params.items():
            if name not in snapshot:
                raise ModelError(f"snapshot is missing parameter {name!r}")
            arr = np.asarray(snapshot[name], dtype=np.float64)
            if arr.shape != t.values.shape:
                raise ModelError(f"snapshot shape {arr.shape} != {t.values.shape} "
                                 f"for parameter {name!r}")
            t.values = arr.copy()

    # -- batched graph contexts ----------------------------------------------

    def _aggregation(self, copies: int) -> SparseOperand | None:
        if self.config.model != "tgnn4i":
            return None
        if copies not in self._agg_cache:
            base = self.graph.aggregation().mat
            if copies == 1:
                self._agg_cache[copies] = SparseOperand(base)
            else:
                eye = scipy.sparse.identity(copies, format="csr")
                self._agg_cache[copies] = SparseOperand(scipy.sparse.kron(eye, base, format="csr"))
        return self._agg_cache[copies]

    # -- the cell -------------------------------------------------------------

    def init_bank(self, batch: int) -> NodeLatentBank:
        """Fresh bank at time 0: the learned initial state is the jump value,
        the decay target starts at zero and the rates at softplus(rates bias)."""
        rows = batch * self.model_nodes
        tile = np.tile(np.arange(self.model_nodes), batch)
        jump = ad.gather_rows(self.initial_state, tile)
        target = Tensor(np.zeros((rows, self.config.d_h)))
        if self.config.dynamics == "static":
            rates = None
        else:
            rates = ad.add_bias(Tensor(np.zeros((rows, self.config.d_h))),
                                ad.softplus(self.biases[6]))
        return NodeLatentBank(target, jump, rates, np.zeros(rows))

    def state_at(self, bank: NodeLatentBank, t_rows: np.ndarray) -> Tensor:
        """Latent state of every row evolved to its own target time."""
        delta = t_rows - bank.t_last
        evolved = evolve(self.config.dynamics, bank.rates, bank.jump, delta)
        return ad.add(bank.decay_target, evolved)

    def _bias_cat(self) -> Tensor:
        return ad.concat(self.biases, axis=0)

    def _step(self, bank: NodeLatentBank, t_rows, obs_idx, xt_row,
              bias_cat: Tensor | None = None) -> NodeLatentBank:
        """One update: decay everyone to the step time, run the gated update
        for observed rows only, and merge the results back into the bank."""
        agg = self._aggregation(len(t_rows) // self.model_nodes)
        h_now = self.state_at(bank, t_rows)
        u = self.pathway_state.apply(h_now, agg, rows=obs_idx)
        v = self.pathway_input.apply(Tensor(xt_row), agg, rows=obs_idx)
        h_obs = ad.gather_rows(h_now, obs_idx, unique=True)
        target_obs = ad.gather_rows(bank.decay_target, obs_idx, unique=True)
        if bias_cat is None:
            bias_cat = self._bias_cat()
        packed = gated_update(u, v, bias_cat, h_obs, target_obs)
        new_target, new_jump, new_rates = ad.split(packed, 3, axis=1)

        t_last = bank.t_last.copy()
        t_last[obs_idx] = t_rows[obs_idx]
        if self.config.dynamics == "static":
            rates = None
        else:
            rates = ad.set_rows(bank.rates, obs_idx, new_rates)
        return NodeLatentBank(
            decay_target=ad.set_rows(bank.decay_target, obs_idx, new_target),
            jump=ad.set_rows(bank.jump, obs_idx, new_jump),
            rates=rates,
            t_last=t_last,
        )

    def _head_apply(self, states: Tensor, x_rows: np.ndarray, copies: int,
                    rows=None) -> Tensor:
        if self.d_x_cell:
            states = ad.concat([states, Tensor(x_rows)], axis=1)
        return self.head.apply(states, self._aggregation(copies), rows=rows)

    # -- public single-sequence operations ------------------------------------

    def update(self, bank: NodeLatentBank, t_i: float, mask, y_i, x_i) -> NodeLatentBank:
        """Incorporate the observations of one time point into the bank."""
        mask = np.asarray(mask, dtype=bool)
        y_i = np.asarray(y_i, dtype=np.float64)
        x_i = np.asarray(x_i, dtype=np.float64)
        if mask.shape != (self.graph.num_nodes,):
            raise ModelError(f"mask shape {mask.shape} does not match the graph")
        if not mask.any():
            raise ModelError("update requires at least one observed node")
        if np.any(y_i[~mask] != 0) or (x_i.size and np.any(x_i[~mask] != 0)):
            raise ModelError("values/features of unobserved nodes must be zero")
        if np.any(t_i < bank.t_last):
            raise ModelError("update time lies before a previous update")
        xt, obs_idx = self._cell_inputs(mask[None], y_i[None, None], x_i[None, None], 0)
        t_rows = np.full(len(bank.t_last), float(t_i))
        return self._step(bank, t_rows, obs_idx, xt)

    def predict_at(self, bank: NodeLatentBank, t_j: float, x_j) -> Tensor:
        """Predict every node's value at time ``t_j``(>= all last updates)."""
        if np.any(t_j < bank.t_last):
            raise ModelError(f"prediction time {t_j} lies before a node's last update")
        x_j = np.asarray(x_j, dtype=np.float64)
        x_rows = x_j.reshape(1, -1) if self.is_joint else x_j
        states = self.state_at(bank, np.full(len(bank.t_last), float(t_j)))
        out = self._head_apply(states, x_rows, copies=1)
        if self.is_joint:
            out = ad.reshape(out, (self.graph.num_nodes, self.config.d_y))
        return out

    # -- batched unrolling -----------------------------------------------------

    def _cell_inputs(self, mask, y, x, i):
        """Constant pathway input [values, features, indicators] for step i
        plus the indices of the cell rows that are updated."""
        if self.is_joint:
            batch = mask.shape[1] if mask.ndim == 3 else 1
            m = mask[i].reshape(batch, -1)
            xt = np.concatenate([
                y[i].reshape(batch, -1), x[i].reshape(batch, -1), m.astype(np.float64)], axis=1)
            obs_idx = np.arange(batch)
        else:
            m = mask[i].reshape(-1)
            xt = np.concatenate([
                y[i].reshape(len(m), -1), x[i].reshape(len(m), -1),
                m.astype(np.float64)[:, None]], axis=1)
            obs_idx = np.flatnonzero(m)
        return xt, obs_idx

    def unroll(self, seqs, n_init: int, n_max: int, pred_rows_per_chunk: int = 40000
               ) -> PredictionSet:
        """Run the cell over a batch of equally long sequences and emit all
        predictions from sources past the warm-up to targets at most
        ``n_max`` steps ahead.

        Within one batch the graph is replicated block-diagonally; every
        sequence keeps its own time axis. The per-source bank snapshots are
        stacked so the prediction head runs on a few large blocks.
        """
        seqs = list(seqs)
        batch = len(seqs)
        n_t = seqs[0].num_times
        v = self.graph.num_nodes
        if any(s.num_times != n_t or s.num_nodes != v for s in seqs):
            raise ModelError("sequences in a batch must share length and graph")
        pairs = prediction_pairs(n_t, n_init, n_max)

        times = np.stack([s.times for s in seqs], axis=1)          # (N_t, B)
        mask = np.stack([s.mask for s in seqs], axis=1)            # (N_t, B, V)
        y = np.stack([s.y for s in seqs], axis=1)                  # (N_t, B, V, d_y)
        x = np.stack([s.x for s in seqs], axis=1)                  # (N_t, B, V, d_x)

        bank = self.init_bank(batch)
        snapshots = {}
        src_steps = {i for i, _ in pairs}
        bias_cat = self._bias_cat()
        for i in range(n_t):
            t_rows = np.repeat(times[i], self.model_nodes)
            xt, obs_idx = self._cell_inputs(mask, y, x, i)
            bank = self._step(bank, t_rows, obs_idx, xt, bias_cat)
            if i in src_steps:
                snapshots[i] = bank
        if not pairs:
            return PredictionSet(
                np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp),
                np.zeros(0, dtype=np.intp), np.zeros(0, dtype=np.intp),
                Tensor(np.zeros((0, self.config.d_y))), n_init, n_max)

        return self._emit_predictions(seqs, pairs, snapshots, times, mask, x,
                                      n_init, n_max, pred_rows_per_chunk)

    def _emit_predictions(self, seqs, pairs, snapshots, times, mask, x,
                          n_init, n_max, pred_rows_per_chunk):
        batch = len(seqs)
        v = self.graph.num_nodes
        rows = batch * self.model_nodes
        src_steps = sorted(snapshots)
        src_pos = {i: k for k, i in enumerate(src_steps)}
        stack_target = ad.concat([snapshots[i].decay_target for i in src_steps], axis=0)
        stack_jump = ad.concat([snapshots[i].jump for i in src_steps], axis=0)
        stack_rates = None
        if self.config.dynamics != "static":
            stack_rates = ad.concat([snapshots[i].rates for i in src_steps], axis=0)
        t_last = np.stack([snapshots[i].t_last for i in src_steps])  # (S, rows)

        d_y = self.config.d_y
        chunk_pairs = max(1, pred_rows_per_chunk // rows)
        out_blocks, src_out, tgt_out, node_out, seq_out = [], [], [], [], []
        for lo in range(0, len(pairs), chunk_pairs):
            chunk = pairs[lo:lo + chunk_pairs]
            p = len(chunk)
            block_idx = np.array([src_pos[i] for i, _ in chunk], dtype=np.intp)
            target = ad.gather_blocks(stack_target, block_idx, rows)
            jump = ad.gather_blocks(stack_jump, block_idx, rows)
            rates = (ad.gather_blocks(stack_rates, block_idx, rows)
                     if stack_rates is not None else None)
            t_pred = np.concatenate(
                [np.repeat(times[j], self.model_nodes) for _, j in chunk])
            delta = t_pred - t_last[[src_pos[i] for i, _ in chunk]].reshape(-1)
            states = ad.add(target, evolve(self.config.dynamics, rates, jump, delta))
            if self.d_x_cell:
                x_rows = np.concatenate(
                    [x[j].reshape(rows, -1) for _, j in chunk], axis=0)
            else:
                x_rows = np.zeros((p * rows, 0))
            # keep only rows whose node is observed at the target time
            sel = np.concatenate(
                [k * batch * v + np.flatnonzero(mask[j].reshape(-1))
                 for k, (_, j) in enumerate(chunk)])
            copies = p * (rows // self.model_nodes)
            if self.is_joint:
                out = self._head_apply(states, x_rows, copies)
                out = ad.reshape(out, (p * batch * v, d_y))
                out_blocks.append(ad.gather_rows(out, sel, unique=True))
            else:
                out_blocks.append(self._head_apply(states, x_rows, copies, rows=sel))
            counts = [int(mask[j].sum()) for _, j in chunk]
            src_out += [np.full(c, i, dtype=np.intp) for c, (i, _) in zip(counts, chunk)]
            tgt_out += [np.full(c, j, dtype=np.intp) for c, (_, j) in zip(counts, chunk)]
            local = sel % (batch * v)
            seq_out.append(local // v)
            node_out.append(local % v)

        return PredictionSet(
            src_idx=np.concatenate(src_out),
            tgt_idx=np.concatenate(tgt_out),
            node_idx=np.concatenate(node_out),
            seq_idx=np.concatenate(seq_out),
            yhat=out_blocks[0] if len(out_blocks) == 1 else ad.concat(out_blocks, axis=0),
            n_init=n_init,
            n_max=n_max,
        )


def unroll_sequence(model: SequenceModel, seq: ObservationSequence,
                    n_init: int, n_max: int) -> PredictionSet:
    """Single-sequence entry point for :meth:`SequenceModel.unroll`."""
    return model.unroll([seq], n_init, n_max)


# ---------------------------------------------------------------------------
# training-free baseline


def predict_previous(seq: ObservationSequence, n_init: int, n_max: int) -> PredictionSet:
    """Repeat each node's last observed value; zero before any observation."""
    n_t, v = seq.mask.shape
    d_y = seq.d_y
    last = np.zeros((n_t, v, d_y))
    current = np.zeros((v, d_y))
    for i in range(n_t):
        current = np.where(seq.mask[i][:, None], seq.y[i], current)
        last[i] = current
    pairs = prediction_pairs(n_t, n_init, n_max)
    src, tgt, node = [], [], []
    values = []
    for i, j in pairs:
        obs = np.flatnonzero(seq.mask[j])
        src.append(np.full(len(obs), i, dtype=np.intp))
        tgt.append(np.full(len(obs), j, dtype=np.intp))
        node.append(obs)
        values.append(last[i, obs])
    if pairs:
        src, tgt, node = np.concatenate(src), np.concatenate(tgt), np.concatenate(node)
        yhat = Tensor(np.concatenate(values, axis=0))
    else:
        src = tgt = node = np.zeros(0, dtype=np.intp)
        yhat = Tensor(np.zeros((0, d_y)))
    return PredictionSet(src, tgt, node, np.zeros(len(src), dtype=np.intp),
                         yhat, n_init, n_max)


def build_model(config: ModelConfig, graph: GraphTopology, seed: int = 0) -> SequenceModel:
    return SequenceModel(config, graph, seed)
