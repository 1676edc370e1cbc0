"""Multi-seed arm comparison on the desk-scale synthetic benchmark."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graph as gr
from .config import TrainConfig, load_config
from .harness import accuracy_at_budget, run_training, shared_grid, write_report
from .model import conv_forward, init_params, model_backward, model_forward, mse_loss
from .runtime import Cluster, MetricsRecord, RuntimeSettings, varco_epoch
from .scheduler import SchedulerSpec, fixed

# name -> config overrides selecting the arm
ARM_PRESETS: dict[str, list[str]] = {
    "none": ["train.arm=none"],
    "fixed4": ["train.arm=fixed", "scheduler.c_max=4"],
    "fixed2": ["train.arm=fixed", "scheduler.c_max=2"],
    "full": ["train.arm=full"],
    "varco": ["train.arm=varco", "scheduler.kind=clamped-linear", "scheduler.c_max=128",
              "scheduler.c_min=1", "scheduler.slope=5"],
}

# desk-scale benchmark used by the acceptance suite and scripts/run_arms.py
BENCHMARK = [
    "data.n=1000", "data.classes=3", "data.feat_dim=16", "data.p_in=0.05", "data.p_out=0.005",
    "data.noise=2.0", "model.layers=3", "model.hidden=32", "model.k=2", "partition.method=random",
    "partition.q=4", "optim.epochs=300", "optim.eta=1.0",
]


def seed_overrides(seed: int) -> list[str]:
    return [f"data.seed={seed}", f"partition.seed={seed}", f"model.init_seed={seed}"]


def arm_config(arm: str, seed: int, base: list[str] | None = None, extra: list[str] | None = None,
               config_path=None) -> TrainConfig:
    return load_config(config_path, (base if base is not None else BENCHMARK) + seed_overrides(seed)
                       + ARM_PRESETS[arm] + (extra or []))


@dataclass
class ArmSweep:
    seeds: list[int]
    runs: dict[int, dict[str, list[MetricsRecord]]] = field(default_factory=dict)

    def final_acc(self, arm: str) -> np.ndarray:
        return np.array([self.runs[s][arm][-1].test_acc for s in self.seeds])

    def budget_wins(self, reference: str, other: str, compare_with: list[str], points: int = 50) -> np.ndarray:
        """Per seed and grid point: reference accuracy >= other, on the grid shared by ``compare_with``."""
        wins = []
        for s in self.seeds:
            runs = {a: self.runs[s][a] for a in compare_with}
            grid = shared_grid(runs, points)
            ref = accuracy_at_budget(runs[reference], grid)
            oth = accuracy_at_budget(runs[other], grid)
            wins.append(ref >= oth)
        return np.array(wins)


def run_sweep(seeds, arms=tuple(ARM_PRESETS), base=None, extra=None, out_dir=None, config_path=None,
              log=print) -> ArmSweep:
    sweep = ArmSweep(list(seeds))
    for s in sweep.seeds:
        sweep.runs[s] = {}
        for arm in arms:
            cfg = arm_config(arm, s, base, extra, config_path)
            target = Path(out_dir) / f"seed{s}" / arm if out_dir else None
            res = run_training(cfg, target)
            sweep.runs[s][arm] = res.records
            if log:
                last = res.records[-1]
                log(f"seed={s} arm={arm} test_acc={last.test_acc:.4f} loss={last.train_loss:.4f} "
                    f"activation_floats={last.cum_floats}")
        if out_dir:
            write_report(sweep.runs[s], Path(out_dir) / f"seed{s}" / "report", reference="varco"
                         if "varco" in arms else None)
    return sweep


# --- convex toy: compression plateau versus annealed schedule ------------------------

TOY_FIXED = (1.0, 4.0, 8.0)


def _mse_objective(targets):
    def objective(worker, pred, Q, n_train):
        if worker.n_train == 0:
            return 0.0, np.zeros_like(pred)
        return mse_loss(pred, targets[worker.owned], worker.train_mask, Q * worker.n_train / n_train)
    return objective


def toy_plateau(seed: int, epochs: int = 200, eta: float = 1.0, Q: int = 4, K: int = 3,
                varco: SchedulerSpec | None = None, unbiased: bool = True) -> dict[str, np.ndarray]:
    """Exact-gradient norm per epoch for fixed ratios and an annealed schedule.

    One linear graph-filter layer fitted by least squares, so the objective is
    convex and exact communication drives the gradient to zero. Keys are
    ``"r=1"``, ``"r=4"``, ``"r=8"`` and ``"varco"``.

    The codec runs in its unbiased mode by default: the zero-filled estimator
    pulls the iterate toward a biased fixed point that drifts for thousands of
    epochs, which hides the variance floor this toy is meant to expose.
    """
    g = gr.synth_sbm(200, 2, 0.1, 0.02, 8, 1.0, seed)
    gso = gr.build_gso(g, "mean-neighbor")
    rng = np.random.default_rng(seed + 10_000)
    truth = [rng.standard_normal((8, 4)) for _ in range(K)]
    targets = conv_forward(g.features, gso, truth) + 0.1 * rng.standard_normal((g.n, 4))
    part = gr.partition_random(g, Q, seed)
    init = init_params([8, 4], K, seed)
    objective = _mse_objective(targets)
    varco = varco or SchedulerSpec("clamped-linear", c_max=8.0, c_min=1.0, slope=2.0, horizon=epochs)
    schedules = {f"r={r:g}": fixed(r, epochs) for r in TOY_FIXED}
    schedules["varco"] = varco

    out = {}
    for name, spec in schedules.items():
        cl = Cluster(g, part, init, gso, RuntimeSettings(master_key=bytes(16), nonlinearity="identity",
                                                     unbiased=unbiased))
        norms = []
        for t in range(epochs):
            varco_epoch(cl, spec, t, eta, objective=objective)
            pred, tape = model_forward(g.features, gso, cl.params, "identity")
            _, d = mse_loss(pred, targets, g.train_mask)
            norms.append(model_backward(tape, d, gso, cl.params).norm())
        out[name] = np.array(norms)
    return out


def plateau(trace: np.ndarray, window: int = 50) -> float:
    return float(np.mean(trace[-window:]))
