"""Experiment orchestration: build a run from a config, train, persist, compare arms."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import graph as gr
from .config import ConfigError, TrainConfig
from .model import ModelParams, init_params, save_checkpoint
from .runtime import Cluster, MetricsRecord, RuntimeSettings, varco_epoch
from .scheduler import SchedulerSpec

log = logging.getLogger(__name__)

METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.bin"


def build_graph(cfg: TrainConfig) -> gr.Graph:
    d = cfg.data
    if d.source == "synth":
        return gr.synth_sbm(d.n, d.classes, d.p_in, d.p_out, d.feat_dim, d.noise, d.seed)
    return gr.load_graph(d.edges, d.features, d.labels, d.split or None, split_seed=d.seed)


def build_partition(cfg: TrainConfig, g: gr.Graph) -> gr.Partition:
    p = cfg.partition
    if p.method == "file":
        return gr.import_partition(g, p.path)
    if p.q > g.n:
        raise ConfigError(f"partition.q={p.q} exceeds the node count {g.n}")
    if p.method == "bfs":
        return gr.partition_greedy_bfs(g, p.q, p.seed)
    return gr.partition_random(g, p.q, p.seed)


def scheduler_for(cfg: TrainConfig) -> SchedulerSpec:
    """Arm presets: full is a fixed ratio of 1, fixed uses scheduler.c_max throughout."""
    s, horizon = cfg.scheduler, cfg.optim.epochs
    arm = cfg.train.arm
    if arm in ("full", "none"):
        return SchedulerSpec("fixed", c_max=1.0, c_min=1.0, horizon=horizon)
    if arm == "fixed":
        return SchedulerSpec("fixed", c_max=s.c_max, c_min=s.c_min, horizon=horizon)
    return SchedulerSpec(s.kind, s.c_max, s.c_min, s.slope, s.step, s.base, horizon)


@dataclass
class RunResult:
    records: list[MetricsRecord]
    params: ModelParams
    cluster: Cluster


def build_cluster(cfg: TrainConfig) -> Cluster:
    g = build_graph(cfg)
    part = build_partition(cfg, g)
    m = cfg.model
    dims = [g.feat_dim] + [m.hidden] * (m.layers - 1) + [g.num_classes]
    params = init_params(dims, m.k, m.init_seed)
    settings = RuntimeSettings(
        master_key=cfg.master_key(),
        comm="none" if cfg.train.arm == "none" else "compressed",
        nonlinearity=m.nonlinearity,
        unbiased=cfg.codec.unbiased,
        mode=cfg.runtime.mode,
    )
    return Cluster(g, part, params, gr.build_gso(g, m.gso), settings)


def run_training(cfg: TrainConfig, out_dir=None, progress=None) -> RunResult:
    cfg.validate()
    cluster = build_cluster(cfg)
    sched = scheduler_for(cfg)
    records: list[MetricsRecord] = []
    cum = 0
    writer = None
    fh = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fh = open(out / METRICS_FILE, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MetricsRecord.HEADER)
    try:
        for t in range(cfg.optim.epochs):
            rec = varco_epoch(cluster, sched, t, cfg.optim.eta, clip=cfg.model.clip or None, cum_before=cum)
            cum = rec.cum_floats
            records.append(rec)
            if writer is not None:
                writer.writerow(rec.row())
            if progress:
                progress(rec)
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_checkpoint(cluster.params, Path(out_dir) / CHECKPOINT_FILE)
    return RunResult(records, cluster.params, cluster)


def metrics_to_csv(records: list[MetricsRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricsRecord.HEADER)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def read_metrics(path) -> list[MetricsRecord]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if tuple(header or ()) != MetricsRecord.HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        out = []
        for row in reader:
            if len(row) != len(MetricsRecord.HEADER):
                raise ValueError(f"{path}: malformed metrics row {row}")
            out.append(MetricsRecord(int(row[0]), float(row[1]), float(row[2]), float(row[3]), float(row[4]),
                                     int(row[5]), int(row[6]), int(row[7]), int(row[8])))
    return out


# --- comparison -----------------------------------------------------------------


def budget_axis(records: list[MetricsRecord], include_params: bool = False) -> np.ndarray:
    cum = np.array([r.cum_floats for r in records], dtype=np.float64)
    if include_params:
        cum = cum + np.cumsum([r.param_floats for r in records])
    return cum


def accuracy_at_budget(records: list[MetricsRecord], budgets, include_params: bool = False) -> np.ndarray:
    """Test accuracy of the last epoch whose cumulative floats fit in each budget (step interpolation).

    Budgets below the first epoch's cost map to NaN.
    """
    cum = budget_axis(records, include_params)
    acc = np.array([r.test_acc for r in records])
    pos = np.searchsorted(cum, np.asarray(budgets, dtype=np.float64), side="right") - 1
    return np.where(pos >= 0, acc[np.clip(pos, 0, None)], np.nan)


def shared_grid(runs: dict[str, list[MetricsRecord]], points: int = 50, include_params: bool = False) -> np.ndarray:
    """Budgets every run has reached at least once and none has exceeded at its end."""
    axes = [budget_axis(r, include_params) for r in runs.values()]
    lo = max(a[0] for a in axes)
    hi = min(a[-1] for a in axes)
    if hi < lo:
        return np.array([], dtype=np.float64)
    return np.linspace(lo, hi, points)


def final_table(runs: dict[str, list[MetricsRecord]]) -> list[dict]:
    rows = []
    for name, recs in runs.items():
        last = recs[-1]
        rows.append({
            "arm": name,
            "epochs": len(recs),
            "final_test_acc": last.test_acc,
            "final_val_acc": last.val_acc,
            "final_train_loss": last.train_loss,
            "activation_floats": last.cum_floats,
            "param_floats": int(sum(r.param_floats for r in recs)),
        })
    return rows


def dominance(runs: dict[str, list[MetricsRecord]], reference: str, grid: np.ndarray,
              include_params: bool = False) -> dict[str, float]:
    """Fraction of grid budgets where ``reference`` accuracy >= each other arm's."""
    ref = accuracy_at_budget(runs[reference], grid, include_params)
    out = {}
    for name, recs in runs.items():
        if name == reference or len(grid) == 0:
            continue
        other = accuracy_at_budget(recs, grid, include_params)
        out[name] = float(np.mean(ref >= other))
    return out


def write_report(runs: dict[str, list[MetricsRecord]], out_dir=None, reference: str | None = None,
                 points: int = 50, include_params: bool = False) -> str:
    """Final-accuracy table plus accuracy-vs-floats samples; returns the text summary."""
    table = final_table(runs)
    grid = shared_grid(runs, points, include_params)
    curves = {name: accuracy_at_budget(recs, grid, include_params) for name, recs in runs.items()}

    lines = ["arm,epochs,final_test_acc,final_val_acc,final_train_loss,activation_floats,param_floats"]
    for row in table:
        lines.append(",".join(str(row[k]) for k in ("arm", "epochs", "final_test_acc", "final_val_acc",
                                                    "final_train_loss", "activation_floats", "param_floats")))
    final_csv = "\n".join(lines) + "\n"

    names = list(runs)
    curve_lines = ["budget," + ",".join(names)]
    for i, b in enumerate(grid):
        curve_lines.append(repr(float(b)) + "," + ",".join(repr(float(curves[n][i])) for n in names))
    curve_csv = "\n".join(curve_lines) + "\n"

    summary = [final_csv]
    if reference is not None and len(runs) > 1:
        if reference not in runs:
            raise ValueError(f"reference arm {reference!r} not among {names}")
        dom = dominance(runs, reference, grid, include_params)
        summary.append(f"dominance of {reference} over the shared budget grid ({len(grid)} points):")
        for name, frac in dom.items():
            summary.append(f"  vs {name}: {frac:.1%} of budgets")
    text = "\n".join(summary) + "\n"

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "final.csv").write_text(final_csv)
        (out / "curves.csv").write_text(curve_csv)
    return text

