"""Command-line interface.

Commands: ``train``, ``eval``, ``analyze``, ``route-stats``,
``count-params``. Exit codes: 0 success, 2 configuration error, 3
checkpoint error, 4 runtime abort. The ``MOHD_SEED`` environment variable
overrides the configured seed for every command.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .config import (
    ConfigError,
    RunConfig,
    apply_overrides,
    load_config,
    render_config,
)
from .data import eval_batches, load_windows
from .layers import count_params
from .model import RouteStatsCollector
from .sparsity import SITES, ProbeRecorder, shared_activation_count, site_report, write_trace
from .training import TrainingDiverged, eval_ppl, model_from_checkpoint, train
from .autodiff import no_grad

SHARED_Q_SWEEP = [round(0.05 * i, 2) for i in range(1, 11)]  # 0.05 .. 0.50
SHARED_W_RANGE = range(2, 10)
ROUTE_STATS_MAX_BATCHES = 64


def _load_run_config(path: str, overrides: list[str]) -> RunConfig:
    cfg = load_config(path)
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    seed_env = os.environ.get("MOHD_SEED")
    if seed_env is not None:
        try:
            cfg.train.seed = int(seed_env)
        except ValueError:
            raise ConfigError(f"MOHD_SEED={seed_env!r} is not an integer") from None
    return cfg


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config, args.set or [])
    print("# effective configuration")
    print(render_config(cfg), end="")
    result = train(cfg, resume=args.resume)
    print(f"final eval ppl: {result.final_eval_ppl:.6f}")
    print(f"metrics: {os.path.join(cfg.train.checkpoint_dir, 'metrics.csv')}")
    return 0


def cmd_eval(args) -> int:
    model, cfg = model_from_checkpoint(load_checkpoint(args.checkpoint))
    corpus = args.corpus or cfg.train.corpus
    try:
        inputs, targets = load_windows(corpus, cfg.train.seq_len)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot evaluate corpus {corpus}: {exc}") from None
    ppl = eval_ppl(model, eval_batches(inputs, targets, cfg.train.batch_size))
    print(f"eval ppl: {ppl:.6f}")
    return 0


def cmd_analyze(args) -> int:
    model, cfg = model_from_checkpoint(load_checkpoint(args.checkpoint))
    try:
        inputs, _ = load_windows(args.corpus, cfg.train.seq_len)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot analyze corpus {args.corpus}: {exc}") from None
    batch = inputs[: cfg.train.batch_size]
    probes = ProbeRecorder()
    with no_grad():
        model.forward(batch, probes=probes)
    os.makedirs(args.out_dir, exist_ok=True)

    write_trace(os.path.join(args.out_dir, "trace.txt"), probes.traces)
    reports = [site_report(t, cfg.analysis.eps) for t in probes.traces]
    with open(os.path.join(args.out_dir, "sparsity.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "site", "sparsity", "mean_magnitude"])
        for r in reports:
            writer.writerow([r.layer, r.site, repr(r.sparsity), repr(r.mean_magnitude)])
    with open(os.path.join(args.out_dir, "cumulative.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        for r in reports:
            writer.writerow([r.layer, r.site] + [repr(float(v)) for v in r.cumulative_curve])

    # Shared-activation sweep over the middle layer's block input, using the
    # leading tokens of the first sequence as the consecutive-token window.
    mid = cfg.model.depth // 2
    trace = next(t for t in probes.traces if (t.layer, t.site) == (mid, "attn_input"))
    with open(os.path.join(args.out_dir, "shared_counts.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["q", "w", "count"])
        for q in SHARED_Q_SWEEP:
            for w in SHARED_W_RANGE:
                writer.writerow([q, w, shared_activation_count(trace.values[:w], q)])
    print(f"analysis written to {args.out_dir}")
    return 0


def cmd_route_stats(args) -> int:
    model, cfg = model_from_checkpoint(load_checkpoint(args.checkpoint))
    if cfg.model.arch != "mohd":
        print("warning: checkpoint has no routers; nothing to report", file=sys.stderr)
        return 0
    os.makedirs(args.out_dir, exist_ok=True)
    domain_means: dict[str, np.ndarray] = {}
    for spec_item in args.corpus:
        if "=" not in spec_item:
            raise ConfigError(f"--corpus expects NAME=PATH, got {spec_item!r}")
        name, path = spec_item.split("=", 1)
        try:
            inputs, targets = load_windows(path, cfg.train.seq_len)
        except (OSError, ValueError) as exc:
            print(f"warning: skipping domain {name}: {exc}", file=sys.stderr)
            continue
        collector = RouteStatsCollector()
        batches = eval_batches(inputs, targets, cfg.train.batch_size)
        with no_grad():
            for xb, _ in batches[:ROUTE_STATS_MAX_BATCHES]:
                model.forward(xb, route_stats=collector)
        rows = collector.rows()
        out_path = os.path.join(args.out_dir, f"route_stats_{name}.csv")
        with open(out_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["layer", "component", "subdim", "mean_score", "selection_frequency"])
            for layer, component, subdim, mean_score, freq in rows:
                writer.writerow([layer, component, subdim, repr(mean_score), repr(freq)])
        domain_means[name] = np.array([r[3] for r in rows])
        print(f"{name}: {out_path}")
    names = sorted(domain_means)
    for i, a in enumerate(names):
        for b in names[i + 1 :]:
            l1 = float(np.abs(domain_means[a] - domain_means[b]).sum())
            print(f"L1({a}, {b}) = {l1:.6f}")
    return 0


def cmd_count_params(args) -> int:
    cfg = _load_run_config(args.config, args.set or [])
    counts = count_params(cfg.model)
    width = max(len(r[0]) for r in counts.rows)
    print(f"{'component'.ljust(width)}  {'total':>12}  {'activated':>12}  ratio")
    for name, total, activated in counts.rows:
        ratio = "excluded" if name == "embeddings" else f"{activated / total:.4f}"
        print(f"{name.ljust(width)}  {total:>12}  {activated:>12}  {ratio}")
    total = counts.total
    activated = counts.activated
    non_embed = total - counts.rows[0][1]
    print(f"{'total'.ljust(width)}  {total:>12}  {activated:>12}  "
          f"{activated / non_embed:.4f} (of non-embedding)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mohd", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="perplexity of a checkpoint on a corpus")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", help="defaults to the corpus in the checkpoint config")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("analyze", help="activation sparsity and flow reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("route-stats", help="per-domain sub-dimension routing statistics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_route_stats)

    p = sub.add_parser("count-params", help="total and activated parameter table")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE")
    p.set_defaults(func=cmd_count_params)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"aborted: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
