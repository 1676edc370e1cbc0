import numpy as np

from varco.experiment import ARM_PRESETS, BENCHMARK, arm_config, plateau, run_sweep, toy_plateau
from varco.harness import scheduler_for
from varco.scheduler import ratio_at

TINY = ["data.n=60", "data.p_in=0.2", "data.p_out=0.02", "data.feat_dim=6", "model.hidden=5", "model.layers=2",
        "partition.q=3", "optim.epochs=8", "optim.eta=0.5"]


def test_arm_presets_select_expected_schedules():
    ratios = {arm: ratio_at(scheduler_for(arm_config(arm, 0)), 0) for arm in ARM_PRESETS}
    assert ratios == {"none": 1.0, "fixed4": 4.0, "fixed2": 2.0, "full": 1.0, "varco": 128.0}
    assert arm_config("none", 0).train.arm == "none"


def test_benchmark_matches_desk_scale_shape():
    cfg = arm_config("varco", 3)
    assert (cfg.data.n, cfg.data.classes, cfg.partition.q, cfg.optim.epochs) == (1000, 3, 4, 300)
    assert cfg.data.seed == cfg.partition.seed == cfg.model.init_seed == 3
    assert all("=" in item for item in BENCHMARK)


def test_small_sweep_and_dominance_shape(tmp_path):
    sw = run_sweep([0, 1], ["fixed2", "full", "varco"], base=TINY, out_dir=tmp_path, log=None)
    assert sw.final_acc("varco").shape == (2,)
    wins = sw.budget_wins("varco", "full", ["varco", "fixed2", "full"], points=9)
    assert wins.shape == (2, 9) and wins.dtype == bool
    assert (tmp_path / "seed1" / "report" / "curves.csv").exists()
    assert (tmp_path / "seed0" / "varco" / "metrics.csv").exists()


def test_toy_short_run_is_deterministic():
    a = toy_plateau(0, epochs=20)
    b = toy_plateau(0, epochs=20)
    assert set(a) == {"r=1", "r=4", "r=8", "varco"}
    for k in a:
        assert np.array_equal(a[k], b[k])
    # the exact-communication run decreases on a convex objective
    assert a["r=1"][-1] < a["r=1"][0]
    assert plateau(a["r=1"], 5) == np.mean(a["r=1"][-5:])
