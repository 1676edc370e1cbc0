"""Simulated multi-worker training with compressed halo exchange.

Every worker owns a slice of the nodes and a replica of the parameters.
Each diffusion hop ``Z_k = S Z_{k-1}`` needs the previous hop's values at
remote neighbours (the halo); owners compress those rows with the shared-key
codec and send them to the workers that need them. The backward pass sends
the gradient of every received halo row back to its owner through the same
mask. After a local gradient step the server averages the replicas.

Worker logic is written as generators that yield their outgoing messages
and receive their inbox, so the same code runs under the sequential driver
and under one thread per worker with barriers.
"""

from __future__ import annotations

import logging
import os
import queue
import threading
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.sparse as sp

from . import codec
from .graph import Graph, Gso, Partition, build_gso
from .model import (
    Gradients,
    LayerTape,
    ModelParams,
    activate,
    activate_grad,
    cross_entropy_loss,
    model_forward,
    sgd_step,
    spectral_clip,
)
from .scheduler import SchedulerSpec, ratio_at

log = logging.getLogger(__name__)

MODE_ENV = "VARCO_EXEC_MODE"
EXEC_MODES = ("sequential", "threaded")
COMM_MODES = ("compressed", "none")


class NumericError(RuntimeError):
    pass


@dataclass
class CommLedger:
    forward_floats: int = 0
    backward_floats: int = 0
    param_floats: int = 0
    forward_messages: int = 0
    backward_messages: int = 0
    param_messages: int = 0

    def add(self, other: "CommLedger") -> None:
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))

    def copy(self) -> "CommLedger":
        return CommLedger(**{f.name: getattr(self, f.name) for f in fields(self)})

    def minus(self, other: "CommLedger") -> "CommLedger":
        return CommLedger(**{f.name: getattr(self, f.name) - getattr(other, f.name) for f in fields(self)})

    @property
    def activation_floats(self) -> int:
        return self.forward_floats + self.backward_floats

    @property
    def header_bytes(self) -> int:
        return codec.HEADER_BYTES * (self.forward_messages + self.backward_messages)


@dataclass(frozen=True)
class ExchangePlan:
    """Who sends which node rows to whom; one route per ordered worker pair with a nonempty halo."""

    routes: dict[tuple[int, int], np.ndarray]
    dims: tuple[int, ...]
    K: int

    @classmethod
    def from_partition(cls, p: Partition, dims, K: int) -> "ExchangePlan":
        routes = {
            (s, d): p.halo_out[s][d]
            for s in range(p.Q)
            for d in range(p.Q)
            if s != d and len(p.halo_out[s][d])
        }
        return cls(routes, tuple(dims), K)

    def boundary_rows(self) -> int:
        return sum(len(v) for v in self.routes.values())

    def floats_per_direction(self, ratio: float) -> int:
        """Closed-form float count of one epoch's forward (= backward) halo traffic."""
        rows = self.boundary_rows()
        return sum((self.K - 1) * rows * codec.kept_count(F, ratio) for F in self.dims[:-1])

    def covers(self, p: Partition) -> bool:
        for d in range(p.Q):
            got = [self.routes[(s, d)] for s in range(p.Q) if (s, d) in self.routes]
            merged = np.sort(np.concatenate(got)) if got else np.empty(0, np.int64)
            if not np.array_equal(merged, p.halo_in[d]):
                return False
        return True


@dataclass
class RuntimeSettings:
    master_key: bytes = codec.DEFAULT_MASTER_KEY
    comm: str = "compressed"
    nonlinearity: str = "relu"
    unbiased: bool = False
    mode: str = field(default_factory=lambda: os.environ.get(MODE_ENV, "sequential"))

    def validate(self) -> None:
        if self.comm not in COMM_MODES:
            raise ValueError(f"comm must be one of {COMM_MODES}")
        if self.mode not in EXEC_MODES:
            raise ValueError(f"execution mode must be one of {EXEC_MODES}, got {self.mode!r}")
        if len(self.master_key) != 16:
            raise ValueError("codec master key must be 16 bytes")


class Worker:
    """One machine: owned rows, the local operator slice, a parameter replica."""

    def __init__(self, q: int, graph: Graph, gso: Gso, partition: Partition, params: ModelParams):
        self.id = q
        self.owned = partition.local_nodes[q]
        self.halo = partition.halo_in[q]
        self.n_own = len(self.owned)
        local_ids = np.concatenate([self.owned, self.halo])
        g2l = np.full(graph.n, -1, dtype=np.int64)
        g2l[local_ids] = np.arange(len(local_ids))
        rows = gso.matrix[self.owned]
        cols = g2l[rows.indices]
        assert np.all(cols >= 0), "operator row references a node outside owned + halo"
        self.S_loc = sp.csr_matrix((rows.data, cols, rows.indptr), shape=(self.n_own, len(local_ids)))
        self.S_locT = self.S_loc.T.tocsr()

        self.features = graph.features[self.owned].copy()
        self.labels = graph.labels[self.owned].copy()
        self.train_mask = graph.train_mask[self.owned].copy()
        self.params = params.copy()

        # rows of owned activations sent to each peer, and halo slots filled by each owner
        pos_own = {int(u): i for i, u in enumerate(self.owned)}
        self.send_nodes: dict[int, np.ndarray] = {}
        self.send_rows: dict[int, np.ndarray] = {}
        for d in range(partition.Q):
            nodes = partition.halo_out[q][d]
            if d != q and len(nodes):
                self.send_nodes[d] = nodes
                self.send_rows[d] = np.array([pos_own[int(u)] for u in nodes], dtype=np.int64)
        halo_pos = {int(u): i for i, u in enumerate(self.halo)}
        self.recv_nodes: dict[int, np.ndarray] = {}
        self.recv_rows: dict[int, np.ndarray] = {}
        for s in range(partition.Q):
            nodes = partition.halo_out[s][q]
            if s != q and len(nodes):
                self.recv_nodes[s] = nodes
                self.recv_rows[s] = np.array([halo_pos[int(u)] for u in nodes], dtype=np.int64)

        self.tape: list[LayerTape] = []
        self.logits: np.ndarray | None = None
        self.grads: Gradients | None = None
        self.ledger = CommLedger()
        self._send_idx: dict = {}
        self._recv_idx: dict = {}

    @property
    def n_train(self) -> int:
        return int(self.train_mask.sum())

    # --- codec plumbing -----------------------------------------------------

    def _indices(self, st, epoch, layer, hop, src, dst, nodes, F, kept):
        return codec.row_indices(st.master_key, epoch, layer, hop, src, dst, nodes, F, kept)

    def pack_forward(self, values, layer, hop, ratio, epoch, st: RuntimeSettings) -> dict:
        if st.comm == "none":
            return {}
        F = values.shape[1]
        kept = codec.kept_count(F, ratio)
        out = {}
        for d in sorted(self.send_rows):
            rows = values[self.send_rows[d]]
            if kept < F:
                idx = self._indices(st, epoch, layer, hop, self.id, d, self.send_nodes[d], F, kept)
                self._send_idx[(layer, hop, d)] = idx
                rows = np.take_along_axis(rows, idx, axis=1)
                if st.unbiased:
                    rows = rows * (F / kept)
            else:
                rows = rows.copy()
            out[d] = rows
            self.ledger.forward_floats += rows.size
            self.ledger.forward_messages += rows.shape[0]
        return out

    def unpack_forward(self, inbox: dict, layer, hop, ratio, epoch, F, st: RuntimeSettings) -> np.ndarray:
        halo = np.zeros((len(self.halo), F))
        if st.comm == "none":
            return halo
        kept = codec.kept_count(F, ratio)
        for s in sorted(inbox):
            payload = inbox[s]
            slots = self.recv_rows[s]
            if kept < F:
                idx = self._indices(st, epoch, layer, hop, s, self.id, self.recv_nodes[s], F, kept)
                self._recv_idx[(layer, hop, s)] = idx
                block = np.zeros((len(slots), F))
                np.put_along_axis(block, idx, payload, axis=1)
                halo[slots] = block
            else:
                halo[slots] = payload
        return halo

    def pack_backward(self, halo_grad, layer, hop, ratio, st: RuntimeSettings) -> dict:
        if st.comm == "none":
            return {}
        F = halo_grad.shape[1]
        kept = codec.kept_count(F, ratio)
        out = {}
        for s in sorted(self.recv_rows):
            rows = halo_grad[self.recv_rows[s]]
            if kept < F:
                rows = np.take_along_axis(rows, self._recv_idx[(layer, hop, s)], axis=1)
                if st.unbiased:
                    rows = rows * (F / kept)
            out[s] = rows
            self.ledger.backward_floats += rows.size
            self.ledger.backward_messages += rows.shape[0]
        return out

    def unpack_backward(self, dZ, inbox: dict, layer, hop, ratio) -> None:
        F = dZ.shape[1]
        kept = codec.kept_count(F, ratio)
        for d in sorted(inbox):
            payload = inbox[d]
            if kept < F:
                block = np.zeros((payload.shape[0], F))
                np.put_along_axis(block, self._send_idx[(layer, hop, d)], payload, axis=1)
                payload = block
            dZ[self.send_rows[d]] += payload

    # --- programs -----------------------------------------------------------

    def forward_program(self, ratio: float, epoch: int, st: RuntimeSettings):
        self.tape = []
        self._send_idx, self._recv_idx = {}, {}
        X = self.features
        L = self.params.num_layers
        for l, layer in enumerate(self.params.layers):
            Z = [X]
            for hop in range(len(layer) - 1):
                inbox = yield self.pack_forward(Z[-1], l, hop, ratio, epoch, st)
                halo = self.unpack_forward(inbox, l, hop, ratio, epoch, Z[-1].shape[1], st)
                Z.append(self.S_loc @ np.vstack([Z[-1], halo]))
            pre = sum(Zk @ Hk for Zk, Hk in zip(Z, layer))
            X = activate(pre, st.nonlinearity if l < L - 1 else "identity")
            self.tape.append(LayerTape(Z, pre, X))
        self.logits = X

    def backward_program(self, dlogits, ratio: float, epoch: int, st: RuntimeSettings):
        if len(self.tape) != self.params.num_layers:
            raise RuntimeError(f"worker {self.id}: backward without a forward tape")
        L = self.params.num_layers
        grads: list = [None] * L
        dX = dlogits
        for l in range(L - 1, -1, -1):
            entry, layer = self.tape[l], self.params.layers[l]
            kind = st.nonlinearity if l < L - 1 else "identity"
            dpre = dX * activate_grad(entry.pre, entry.post, kind)
            grads[l] = [Z.T @ dpre for Z in entry.diffused]
            dZ = dpre @ layer[-1].T
            for hop in range(len(layer) - 2, -1, -1):
                full = self.S_locT @ dZ
                dZ = full[: self.n_own] + dpre @ layer[hop].T
                inbox = yield self.pack_backward(full[self.n_own:], l, hop, ratio, st)
                self.unpack_backward(dZ, inbox, l, hop, ratio)
            dX = dZ
        self.grads = Gradients(grads, dX)


# --- drivers ----------------------------------------------------------------


def _step(gen, value):
    try:
        return gen.send(value)
    except StopIteration:
        return None


def run_sequential(programs: list) -> None:
    Q = len(programs)
    outs = [_step(g, None) for g in programs]
    while any(o is not None for o in outs):
        if any(o is None for o in outs):
            raise RuntimeError("workers fell out of lockstep")
        inboxes: list[dict] = [{} for _ in range(Q)]
        for s, out in enumerate(outs):
            for d, payload in out.items():
                inboxes[d][s] = payload
        outs = [_step(g, inboxes[q]) for q, g in enumerate(programs)]


def run_threaded(programs: list) -> None:
    """One thread per worker; send, barrier, drain inbox, barrier."""
    Q = len(programs)
    channels = {(s, d): queue.SimpleQueue() for s in range(Q) for d in range(Q) if s != d}
    barrier = threading.Barrier(Q)
    errors: list[BaseException] = []

    def run(q):
        gen = programs[q]
        value = None
        try:
            while True:
                out = _step(gen, value)
                if out is None:
                    return
                for d, payload in out.items():
                    channels[(q, d)].put(payload)
                barrier.wait()
                value = {}
                for s in range(Q):
                    if s != q and not channels[(s, q)].empty():
                        value[s] = channels[(s, q)].get()
                barrier.wait()
        except threading.BrokenBarrierError:
            pass
        except BaseException as exc:  # surfaced in the caller
            errors.append(exc)
            barrier.abort()

    threads = [threading.Thread(target=run, args=(q,), name=f"worker-{q}") for q in range(Q)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    if errors:
        raise errors[0]


class Cluster:
    """Workers plus the shared pieces of one simulated deployment."""

    def __init__(self, graph: Graph, partition: Partition, params: ModelParams, gso: Gso | None = None,
                 settings: RuntimeSettings | None = None):
        self.settings = settings or RuntimeSettings()
        self.settings.validate()
        self.graph = graph
        self.partition = partition
        self.gso = gso or build_gso(graph, "mean-neighbor")
        self.workers = make_workers(graph, partition, params, self.gso)
        self.plan = ExchangePlan.from_partition(partition, params.dims, params.K)
        self.ledger = CommLedger()
        self.n_train = int(graph.train_mask.sum())

    @property
    def Q(self) -> int:
        return len(self.workers)

    @property
    def params(self) -> ModelParams:
        return self.workers[0].params

    def run(self, programs: list) -> None:
        before = [w.ledger.copy() for w in self.workers]
        if self.settings.mode == "threaded" and self.Q > 1:
            run_threaded(programs)
        else:
            run_sequential(programs)
        for w, b in zip(self.workers, before):
            self.ledger.add(w.ledger.minus(b))


def make_workers(graph: Graph, partition: Partition, params: ModelParams, gso: Gso | None = None) -> list[Worker]:
    if partition.n != graph.n or len(partition.owner) != graph.n:
        raise ValueError("partition was built for a different graph")
    params.validate()
    if params.dims[0] != graph.feat_dim:
        raise ValueError(f"model expects {params.dims[0]} input features, graph has {graph.feat_dim}")
    gso = gso or build_gso(graph, "mean-neighbor")
    return [Worker(q, graph, gso, partition, params) for q in range(partition.Q)]


def forward_exchange(cluster: Cluster, values: list[np.ndarray], layer: int, ratio: float, epoch: int,
                     hop: int = 0) -> list[np.ndarray]:
    """One halo exchange of per-worker owned rows; returns every worker's decoded halo buffer."""
    st = cluster.settings
    outs = [w.pack_forward(v, layer, hop, ratio, epoch, st) for w, v in zip(cluster.workers, values)]
    inboxes: list[dict] = [{} for _ in cluster.workers]
    for s, out in enumerate(outs):
        for d, payload in out.items():
            inboxes[d][s] = payload
    for w, out in zip(cluster.workers, outs):
        cluster.ledger.forward_floats += sum(p.size for p in out.values())
        cluster.ledger.forward_messages += sum(p.shape[0] for p in out.values())
    return [
        w.unpack_forward(inboxes[q], layer, hop, ratio, epoch, values[q].shape[1], st)
        for q, w in enumerate(cluster.workers)
    ]


def distributed_forward(cluster: Cluster, ratio: float, epoch: int) -> list[np.ndarray]:
    cluster.run([w.forward_program(ratio, epoch, cluster.settings) for w in cluster.workers])
    return [w.logits for w in cluster.workers]


def distributed_backward(cluster: Cluster, dlogits: list[np.ndarray], ratio: float, epoch: int) -> list[Gradients]:
    cluster.run([
        w.backward_program(d, ratio, epoch, cluster.settings) for w, d in zip(cluster.workers, dlogits)
    ])
    return [w.grads for w in cluster.workers]


def gather_rows(cluster: Cluster, per_worker: list[np.ndarray]) -> np.ndarray:
    """Reassemble per-worker owned rows into global node order."""
    out = np.zeros((cluster.graph.n, per_worker[0].shape[1]))
    for w, rows in zip(cluster.workers, per_worker):
        out[w.owned] = rows
    return out


def average_params(cluster: Cluster) -> ModelParams:
    """Uniform mean of the replicas, broadcast back; counts upload and download."""
    Q = cluster.Q
    reps = [w.params for w in cluster.workers]
    if any(not reps[0].same_shape(r) for r in reps[1:]):
        raise ValueError("replica shapes differ")
    mean = ModelParams([
        [np.mean(np.stack([r.layers[l][k] for r in reps]), axis=0) for k in range(reps[0].K)]
        for l in range(reps[0].num_layers)
    ])
    for w in cluster.workers:
        w.params = mean.copy()
    cluster.ledger.param_floats += 2 * Q * mean.size
    cluster.ledger.param_messages += 2 * Q
    return mean


@dataclass
class MetricsRecord:
    epoch: int
    ratio: float
    train_loss: float
    val_acc: float
    test_acc: float
    fwd_floats: int
    bwd_floats: int
    param_floats: int
    cum_floats: int

    HEADER = ("epoch", "ratio", "train_loss", "val_acc", "test_acc",
              "fwd_floats", "bwd_floats", "param_floats", "cum_floats")

    def row(self) -> list[str]:
        return [str(self.epoch), repr(float(self.ratio)), repr(float(self.train_loss)), repr(float(self.val_acc)),
                repr(float(self.test_acc)), str(self.fwd_floats), str(self.bwd_floats),
                str(self.param_floats), str(self.cum_floats)]


def cross_entropy_objective(worker: Worker, logits: np.ndarray, Q: int, n_train: int):
    """Local mean CE scaled by Q * n_q / N so the replica average follows the global mean."""
    if worker.n_train == 0:
        return 0.0, np.zeros_like(logits)
    weight = Q * worker.n_train / n_train
    return cross_entropy_loss(logits, worker.labels, worker.train_mask, weight)


def evaluate(graph: Graph, gso: Gso, params: ModelParams, nonlinearity: str) -> tuple[float, float]:
    """Validation and test accuracy of the full, uncompressed model."""
    logits, _ = model_forward(graph.features, gso, params, nonlinearity)
    pred = logits.argmax(axis=1)
    correct = pred == graph.labels
    val = float(correct[graph.val_mask].mean()) if graph.val_mask.any() else float("nan")
    test = float(correct[graph.test_mask].mean()) if graph.test_mask.any() else float("nan")
    return val, test


def varco_epoch(cluster: Cluster, sched: SchedulerSpec, t: int, eta: float, objective=None,
                clip: float | None = None, cum_before: int = 0) -> MetricsRecord:
    """Forward, loss, backward, local step and averaging for training step ``t``."""
    objective = objective or cross_entropy_objective
    ratio = ratio_at(sched, t)
    start = cluster.ledger.copy()
    logits = distributed_forward(cluster, ratio, t)
    losses, dlogits = [], []
    for w, lg in zip(cluster.workers, logits):
        loss, dl = objective(w, lg, cluster.Q, cluster.n_train)
        losses.append(loss)
        dlogits.append(dl)
    train_loss = float(np.sum(losses) / cluster.Q)
    if not np.isfinite(train_loss):
        raise NumericError(f"non-finite training loss at epoch {t}")
    grads = distributed_backward(cluster, dlogits, ratio, t)
    for w, g in zip(cluster.workers, grads):
        w.params = sgd_step(w.params, g, eta)
        if clip:
            w.params = spectral_clip(w.params, clip)
    average_params(cluster)
    spent = cluster.ledger.minus(start)
    val, test = evaluate(cluster.graph, cluster.gso, cluster.params, cluster.settings.nonlinearity)
    return MetricsRecord(
        epoch=t,
        ratio=ratio,
        train_loss=train_loss,
        val_acc=val,
        test_acc=test,
        fwd_floats=spent.forward_floats,
        bwd_floats=spent.backward_floats,
        param_floats=spent.param_floats,
        cum_floats=cum_before + spent.activation_floats,
    )
