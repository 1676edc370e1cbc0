"""Graph storage, synthetic generation, ingestion and partitioning.

Edges are always stored as the symmetric closure in CSR form, and every
count reported here is a count of *directed* edges.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

GSO_KINDS = ("mean-neighbor", "symmetric-normalized", "raw-adjacency")

# rows with norm above this are rescaled at ingest
_NORM_SLACK = 1e-9


class GraphFormatError(ValueError):
    """Raised for malformed graph, label, feature or partition files."""


@dataclass(frozen=True, eq=False)
class Graph:
    indptr: np.ndarray
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    train_mask: np.ndarray
    val_mask: np.ndarray
    test_mask: np.ndarray
    num_classes: int

    @property
    def n(self) -> int:
        return len(self.indptr) - 1

    @property
    def num_edges(self) -> int:
        return int(self.indptr[-1])

    @property
    def feat_dim(self) -> int:
        return self.features.shape[1]

    def adjacency(self) -> sp.csr_matrix:
        data = np.ones(self.num_edges)
        return sp.csr_matrix((data, self.indices, self.indptr), shape=(self.n, self.n))

    def degrees(self) -> np.ndarray:
        return np.diff(self.indptr)

    def neighbors(self, u: int) -> np.ndarray:
        return self.indices[self.indptr[u]:self.indptr[u + 1]]

    def equals(self, other: "Graph") -> bool:
        return (
            self.num_classes == other.num_classes
            and np.array_equal(self.indptr, other.indptr)
            and np.array_equal(self.indices, other.indices)
            and np.array_equal(self.features, other.features)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.train_mask, other.train_mask)
            and np.array_equal(self.val_mask, other.val_mask)
            and np.array_equal(self.test_mask, other.test_mask)
        )

    def validate(self) -> None:
        n = self.n
        for u in range(n):
            row = self.neighbors(u)
            if len(row) and (row[0] < 0 or row[-1] >= n or np.any(np.diff(row) <= 0)):
                raise GraphFormatError(f"row {u}: column indices must be strictly increasing in [0, {n})")
        if self.features.shape[0] != n:
            raise GraphFormatError("feature rows do not match node count")
        if np.any(np.linalg.norm(self.features, axis=1) > 1 + _NORM_SLACK):
            raise GraphFormatError("feature rows must have norm <= 1")
        if self.labels.shape != (n,) or (n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes)):
            raise GraphFormatError("labels out of range")
        overlap = (
            self.train_mask.astype(int) + self.val_mask.astype(int) + self.test_mask.astype(int)
        )
        if np.any(overlap > 1):
            raise GraphFormatError("train/val/test masks overlap")


@dataclass(frozen=True, eq=False)
class Gso:
    """A graph shift operator with the adjacency's sparsity pattern."""

    kind: str
    matrix: sp.csr_matrix


def normalize_rows(x: np.ndarray) -> np.ndarray:
    """Scale every row with l2 norm above 1 down to unit norm."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    scale = np.where(norms > 1 + _NORM_SLACK, norms, 1.0)
    return x / scale[:, None]


def from_edges(n: int, src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric closure of an edge list as (indptr, indices), duplicates and self loops dropped."""
    src = np.asarray(src, dtype=np.int64)
    dst = np.asarray(dst, dtype=np.int64)
    keep = src != dst
    src, dst = src[keep], dst[keep]
    rows = np.concatenate([src, dst])
    cols = np.concatenate([dst, src])
    adj = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    adj.sum_duplicates()
    adj.sort_indices()
    return adj.indptr.astype(np.int64), adj.indices.astype(np.int64)


def split_masks(n: int, seed: int, fractions=(0.6, 0.2)) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    masks = [np.zeros(n, dtype=bool) for _ in range(3)]
    masks[0][order[:n_train]] = True
    masks[1][order[n_train:n_train + n_val]] = True
    masks[2][order[n_train + n_val:]] = True
    return masks[0], masks[1], masks[2]


def synth_sbm(
    n: int,
    classes: int,
    p_in: float,
    p_out: float,
    feat_dim: int,
    noise: float,
    seed: int,
) -> Graph:
    """Sample a stochastic block model with Gaussian class-mean features.

    Blocks are contiguous id ranges whose sizes differ by at most one; the
    label of a node is its block. Features are a unit class-mean vector plus isotropic
    noise of standard deviation ``noise``, then scaled to unit norm.
    """
    if not (0.0 <= p_out <= p_in <= 1.0):
        raise ValueError(f"need 0 <= p_out <= p_in <= 1, got p_in={p_in}, p_out={p_out}")
    if classes < 1 or classes > n:
        raise ValueError(f"classes must be in [1, n], got {classes}")
    if feat_dim < 1 or noise < 0:
        raise ValueError("feat_dim must be positive and noise nonnegative")

    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(classes), _balanced_sizes(n, classes))
    iu, ju = np.triu_indices(n, k=1)
    prob = np.where(labels[iu] == labels[ju], p_in, p_out)
    hit = rng.random(len(iu)) < prob
    indptr, indices = from_edges(n, iu[hit], ju[hit])

    means = rng.standard_normal((classes, feat_dim))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    feats = means[labels] + noise * rng.standard_normal((n, feat_dim))
    norms = np.linalg.norm(feats, axis=1, keepdims=True)
    feats = normalize_rows(feats / np.where(norms > 0, norms, 1.0))

    train, val, test = split_masks(n, int(rng.integers(2**31)))
    return Graph(indptr, indices, feats, labels, train, val, test, classes)


# --- file formats -------------------------------------------------------------


def _read_edges(path: Path) -> tuple[np.ndarray, np.ndarray, list[int]]:
    src, dst, lines = [], [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected 'u v', got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-integer node id in {line!r}") from None
            src.append(u)
            dst.append(v)
            lines.append(lineno)
    return np.array(src, dtype=np.int64), np.array(dst, dtype=np.int64), lines


def read_features(path: Path) -> np.ndarray:
    """CSV (no header) or raw float32 with an (n, F) uint32 header."""
    path = Path(path)
    if path.suffix in (".bin", ".f32", ".raw"):
        raw = path.read_bytes()
        if len(raw) < 8:
            raise GraphFormatError(f"{path}: truncated header")
        n, f = struct.unpack("<II", raw[:8])
        if len(raw) != 8 + 4 * n * f:
            raise GraphFormatError(f"{path}: expected {n}x{f} float32 payload")
        return np.frombuffer(raw, dtype="<f4", offset=8).reshape(n, f).astype(np.float64)
    rows = []
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), 1):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: non-numeric feature value") from None
            if len(rows[-1]) != len(rows[0]):
                raise GraphFormatError(f"{path}:{lineno}: ragged feature row")
    return np.array(rows, dtype=np.float64)


def read_labels(path: Path) -> np.ndarray:
    """Either ``node_id,class`` rows or one class per line in node order."""
    pairs: dict[int, int] = {}
    positional: list[int] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            try:
                if len(parts) == 2:
                    pairs[int(parts[0])] = int(parts[1])
                elif len(parts) == 1:
                    positional.append(int(parts[0]))
                else:
                    raise ValueError
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: malformed label line {line!r}") from None
    if pairs and positional:
        raise GraphFormatError(f"{path}: mixes positional and node_id,class lines")
    if positional:
        return np.array(positional, dtype=np.int64)
    n = len(pairs)
    if sorted(pairs) != list(range(n)):
        raise GraphFormatError(f"{path}: node ids must cover 0..{n - 1} exactly once")
    return np.array([pairs[i] for i in range(n)], dtype=np.int64)


def _label_line_numbers(path: Path) -> list[int]:
    with open(path) as fh:
        return [i for i, line in enumerate(fh, 1) if line.strip() and not line.strip().startswith("#")]


def read_split(path: Path, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    names = Path(path).read_text().split()
    if len(names) != n:
        raise GraphFormatError(f"{path}: expected {n} split entries, got {len(names)}")
    arr = np.array(names)
    bad = ~np.isin(arr, ["train", "val", "test", "none"])
    if bad.any():
        raise GraphFormatError(f"{path}:{int(np.argmax(bad)) + 1}: unknown split {arr[bad][0]!r}")
    return arr == "train", arr == "val", arr == "test"


def load_graph(
    edge_path,
    feature_path,
    label_path,
    split_path=None,
    num_classes: int | None = None,
    split_seed: int = 0,
) -> Graph:
    """Read a graph from disk; the node count is taken from the label file."""
    labels = read_labels(Path(label_path))
    n = len(labels)
    C = num_classes if num_classes is not None else int(labels.max()) + 1 if n else 0
    bad = np.flatnonzero((labels < 0) | (labels >= C))
    if len(bad):
        lineno = _label_line_numbers(Path(label_path))[bad[0]]
        raise GraphFormatError(f"{label_path}:{lineno}: class {labels[bad[0]]} out of range [0, {C})")

    src, dst, lines = _read_edges(Path(edge_path))
    oob = np.flatnonzero((src < 0) | (src >= n) | (dst < 0) | (dst >= n))
    if len(oob):
        i = oob[0]
        raise GraphFormatError(f"{edge_path}:{lines[i]}: node id out of range [0, {n}) in edge ({src[i]}, {dst[i]})")
    indptr, indices = from_edges(n, src, dst)

    feats = read_features(Path(feature_path))
    if feats.shape[0] != n:
        raise GraphFormatError(f"{feature_path}: {feats.shape[0]} feature rows but {n} nodes")
    feats = normalize_rows(feats)

    if split_path is not None:
        train, val, test = read_split(Path(split_path), n)
    else:
        train, val, test = split_masks(n, split_seed)
    g = Graph(indptr, indices, feats, labels, train, val, test, C)
    g.validate()
    return g


def write_graph(g: Graph, out_dir, binary_features: bool = False) -> dict[str, Path]:
    """Write edges.txt, features.{csv,bin}, labels.csv and split.txt; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"edges": out / "edges.txt", "labels": out / "labels.csv", "split": out / "split.txt"}
    with open(paths["edges"], "w") as fh:
        fh.write(f"# n={g.n} directed_edges={g.num_edges}\n")
        for u in range(g.n):
            for v in g.neighbors(u):
                if u < v:
                    fh.write(f"{u} {v}\n")
    if binary_features:
        paths["features"] = out / "features.bin"
        header = struct.pack("<II", g.n, g.feat_dim)
        paths["features"].write_bytes(header + g.features.astype("<f4").tobytes())
    else:
        paths["features"] = out / "features.csv"
        np.savetxt(paths["features"], g.features, delimiter=",", fmt="%.17g")
    with open(paths["labels"], "w") as fh:
        for i, c in enumerate(g.labels):
            fh.write(f"{i},{c}\n")
    split = np.full(g.n, "none", dtype=object)
    split[g.train_mask] = "train"
    split[g.val_mask] = "val"
    split[g.test_mask] = "test"
    paths["split"].write_text("\n".join(split) + "\n")
    return paths


# --- shift operators ----------------------------------------------------------


def build_gso(g: Graph, kind: str = "mean-neighbor") -> Gso:
    if kind not in GSO_KINDS:
        raise ValueError(f"unknown GSO kind {kind!r}; expected one of {GSO_KINDS}")
    deg = g.degrees().astype(np.float64)
    rows = np.repeat(np.arange(g.n), np.diff(g.indptr))
    if kind == "mean-neighbor":
        vals = 1.0 / deg[rows]
    elif kind == "symmetric-normalized":
        vals = 1.0 / np.sqrt(deg[rows] * deg[g.indices])
    else:
        vals = np.ones(g.num_edges)
    mat = sp.csr_matrix((vals, g.indices.copy(), g.indptr.copy()), shape=(g.n, g.n))
    return Gso(kind, mat)


# --- partitions ---------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Partition:
    Q: int
    owner: np.ndarray
    local_nodes: list[np.ndarray]
    halo_in: list[np.ndarray]
    halo_out: list[list[np.ndarray]]
    self_edges: int
    cross_edges: int
    n: int = field(default=0)

    @property
    def total_edges(self) -> int:
        return self.self_edges + self.cross_edges

    @classmethod
    def from_owner(cls, g: Graph, owner, Q: int | None = None) -> "Partition":
        owner = np.asarray(owner, dtype=np.int64)
        if owner.shape != (g.n,):
            raise GraphFormatError(f"owner vector has length {owner.size}, graph has {g.n} nodes")
        if Q is None:
            Q = int(owner.max()) + 1 if g.n else 1
        if g.n and (owner.min() < 0 or owner.max() >= Q):
            raise GraphFormatError(f"worker ids must lie in [0, {Q})")
        rows = np.repeat(np.arange(g.n), np.diff(g.indptr))
        is_cross = owner[rows] != owner[g.indices]
        cross = int(is_cross.sum())
        local_nodes = [np.flatnonzero(owner == q) for q in range(Q)]
        halo_in = []
        for q in range(Q):
            sel = (owner[rows] == q) & is_cross
            halo_in.append(np.unique(g.indices[sel]))
        halo_out = [
            [halo_in[dst][owner[halo_in[dst]] == src] if dst != src else np.empty(0, np.int64) for dst in range(Q)]
            for src in range(Q)
        ]
        return cls(Q, owner, local_nodes, halo_in, halo_out, g.num_edges - cross, cross, g.n)

    def validate(self) -> None:
        covered = np.concatenate(self.local_nodes) if self.local_nodes else np.empty(0)
        if not np.array_equal(np.sort(covered), np.arange(self.n)):
            raise GraphFormatError("local node sets do not partition the node range")
        for q in range(self.Q):
            for d in range(self.Q):
                expect = np.intersect1d(self.halo_in[d], self.local_nodes[q]) if q != d else np.empty(0)
                if not np.array_equal(self.halo_out[q][d], expect):
                    raise GraphFormatError(f"halo_out[{q}][{d}] inconsistent with halo_in")


def _balanced_sizes(n: int, Q: int) -> list[int]:
    base, extra = divmod(n, Q)
    return [base + (1 if q < extra else 0) for q in range(Q)]


def _check_q(g: Graph, Q: int) -> None:
    if Q < 1 or Q > g.n:
        raise ValueError(f"need 1 <= Q <= n, got Q={Q}, n={g.n}")


def partition_random(g: Graph, Q: int, seed: int) -> Partition:
    """Uniformly random balanced assignment (owned counts differ by at most one)."""
    _check_q(g, Q)
    rng = np.random.default_rng(seed)
    owner = np.empty(g.n, dtype=np.int64)
    owner[rng.permutation(g.n)] = np.arange(g.n) % Q
    return Partition.from_owner(g, owner, Q)


def partition_greedy_bfs(g: Graph, Q: int, seed: int) -> Partition:
    """Grow each part by breadth-first search from a seeded random root.

    A part that runs out of frontier before reaching its quota restarts from
    another random unassigned node, so disconnected graphs are covered.
    """
    _check_q(g, Q)
    rng = np.random.default_rng(seed)
    owner = np.full(g.n, -1, dtype=np.int64)
    order = rng.permutation(g.n)
    cursor = 0
    for q, quota in enumerate(_balanced_sizes(g.n, Q)):
        claimed = 0
        queue: list[int] = []
        head = 0
        while claimed < quota:
            if head == len(queue):
                while owner[order[cursor]] != -1:
                    cursor += 1
                queue.append(int(order[cursor]))
                owner[order[cursor]] = q
                claimed += 1
                continue
            u = queue[head]
            head += 1
            for v in g.neighbors(u):
                if claimed == quota:
                    break
                if owner[v] == -1:
                    owner[v] = q
                    claimed += 1
                    queue.append(int(v))
    return Partition.from_owner(g, owner, Q)


def import_partition(g: Graph, path, Q: int | None = None) -> Partition:
    """Read an external (e.g. METIS) assignment: one worker id per line."""
    ids = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            s = line.strip()
            if not s:
                continue
            try:
                val = int(s)
            except ValueError:
                raise GraphFormatError(f"{path}:{lineno}: malformed worker id {s!r}") from None
            if val < 0 or (Q is not None and val >= Q):
                raise GraphFormatError(f"{path}:{lineno}: worker id {val} out of range")
            ids.append(val)
    if len(ids) != g.n:
        raise GraphFormatError(f"{path}: expected {g.n} lines, got {len(ids)}")
    return Partition.from_owner(g, np.array(ids, dtype=np.int64), Q)


def write_partition(p: Partition, path) -> None:
    Path(path).write_text("".join(f"{int(q)}\n" for q in p.owner))


def cross_edge_stats(p: Partition) -> dict:
    total = p.total_edges
    cross_fraction = p.cross_edges / total if total else 0.0
    return {
        "self_count": p.self_edges,
        "cross_count": p.cross_edges,
        "self_fraction": 1.0 - cross_fraction if total else 1.0,
        "cross_fraction": cross_fraction,
    }


def expected_random_cross_fraction(Q: int) -> float:
    return (Q - 1) / Q if Q else math.nan
