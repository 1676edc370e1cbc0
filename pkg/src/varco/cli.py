"""Command line entry point: ``varco synth | partition | train | report``.

Exit codes: 0 success, 2 configuration or usage error, 3 numeric failure.

The partition command prints one stats line with fixed columns::

    q=<Q> method=<m> nodes=<n> edges=<undirected> self=<count> cross=<count> cross_pct=<pct>%
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import graph as gr
from .config import ConfigError, dump_config, load_config
from .harness import read_metrics, run_training, write_report
from .runtime import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("varco")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_graph_dir(path) -> gr.Graph:
    """Load a directory written by ``varco synth``."""
    d = Path(path)
    feats = d / "features.csv"
    if not feats.exists():
        feats = d / "features.bin"
    split = d / "split.txt"
    for p in (d / "edges.txt", feats, d / "labels.csv"):
        if not p.exists():
            raise UsageError(f"graph directory {d} lacks {p.name}")
    return gr.load_graph(d / "edges.txt", feats, d / "labels.csv", split if split.exists() else None)


def stats_line(p: gr.Partition, method: str) -> str:
    s = gr.cross_edge_stats(p)
    return (f"q={p.Q} method={method} nodes={p.n} edges={p.total_edges // 2} "
            f"self={s['self_count'] // 2} cross={s['cross_count'] // 2} "
            f"cross_pct={100 * s['cross_fraction']:.2f}%")


def cmd_synth(a) -> int:
    try:
        g = gr.synth_sbm(a.n, a.classes, a.p_in, a.p_out, a.feat_dim, a.noise, a.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    paths = gr.write_graph(g, a.out, binary_features=a.binary)
    print(f"wrote n={g.n} edges={g.num_edges // 2} classes={g.num_classes} to {Path(a.out)}")
    log.debug("files: %s", paths)
    return EXIT_OK


def cmd_partition(a) -> int:
    g = load_graph_dir(a.graph)
    try:
        if a.method == "random":
            p = gr.partition_random(g, 4 if a.q is None else a.q, a.seed)
        elif a.method == "bfs":
            p = gr.partition_greedy_bfs(g, 4 if a.q is None else a.q, a.seed)
        elif not a.input:
            raise UsageError("--method file needs --input")
        else:
            p = gr.import_partition(g, a.input, a.q)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if a.out:
        gr.write_partition(p, a.out)
    print(stats_line(p, a.method))
    return EXIT_OK


def cmd_train(a) -> int:
    cfg = load_config(a.config, a.set)
    if a.out:
        cfg.output.dir = a.out
    cfg.validate()
    out = Path(cfg.output.dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg))

    def progress(rec):
        if not a.quiet and (rec.epoch % 25 == 0 or rec.epoch == cfg.optim.epochs - 1):
            print(f"epoch {rec.epoch:4d} r={rec.ratio:8.3f} loss={rec.train_loss:.4f} "
                  f"val={rec.val_acc:.3f} test={rec.test_acc:.3f} floats={rec.cum_floats}")

    res = run_training(cfg, out, progress)
    last = res.records[-1]
    print(f"done: arm={cfg.train.arm} final test_acc={last.test_acc:.4f} activation_floats={last.cum_floats} "
          f"metrics={out / 'metrics.csv'}")
    return EXIT_OK


def _run_name(spec: str, used: set) -> tuple[str, Path]:
    if "=" in spec:
        name, path = spec.split("=", 1)
    else:
        path = spec
        p = Path(spec)
        name = p.parent.name if p.name == "metrics.csv" and p.parent.name else p.stem
    base, i = name, 2
    while name in used:
        name, i = f"{base}_{i}", i + 1
    used.add(name)
    return name, Path(path)


def cmd_report(a) -> int:
    runs, used = {}, set()
    for spec in a.metrics:
        name, path = _run_name(spec, used)
        try:
            runs[name] = read_metrics(path)
        except OSError as exc:
            raise UsageError(f"cannot read {path}: {exc}") from None
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if not runs[name]:
            raise UsageError(f"{path}: no metrics rows")
    if a.reference and a.reference not in runs:
        raise UsageError(f"reference {a.reference!r} is not one of {', '.join(runs)}")
    print(write_report(runs, a.out, a.reference, a.points, a.include_params), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="varco", description="Compressed halo-exchange GNN training simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="sample a stochastic block model graph")
    s.add_argument("--n", type=int, default=1000)
    s.add_argument("--classes", type=int, default=3)
    s.add_argument("--p-in", type=float, default=0.02)
    s.add_argument("--p-out", type=float, default=0.004)
    s.add_argument("--feat-dim", type=int, default=16)
    s.add_argument("--noise", type=float, default=1.5)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--binary", action="store_true", help="write float32 features.bin instead of CSV")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    p = sub.add_parser("partition", help="partition a graph directory and print cut statistics")
    p.add_argument("--graph", required=True, help="directory written by synth")
    p.add_argument("--method", choices=("random", "bfs", "file"), default="random")
    p.add_argument("--q", type=int, help="worker count (default 4; inferred from the file for --method file)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--input", help="owner file for --method file")
    p.add_argument("--out", help="where to write the owner file")
    p.set_defaults(func=cmd_partition)

    t = sub.add_parser("train", help="run one training arm")
    t.add_argument("--config")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--out", help="output directory (overrides output.dir)")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("report", help="compare metrics files")
    r.add_argument("metrics", nargs="+", metavar="[NAME=]metrics.csv")
    r.add_argument("--reference")
    r.add_argument("--points", type=int, default=50)
    r.add_argument("--include-params", action="store_true")
    r.add_argument("--out")
    r.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, ConfigError, gr.GraphFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
