"""Command-line entry points.

    streamalign train-source  --train T.npz --val V.npz --out DIR
    streamalign infer-source  --model model.json --out bank.json
    streamalign adapt         --protocol P --model model.json --stream S.npz
                              (--source-stats bank.json | --infer-source)
                              [--config cfg.json] [--seed N] --out DIR
    streamalign baseline      --kind TEST|ENTROPY_MIN|ST_ONLY ...
    streamalign bench gen     --spec domain.json --out DIR
    streamalign bench run     (--grid grid.json | --default) --out DIR
    streamalign bench report  --in DIR

Report paths write JSON + CSV (+ a gnuplot .dat for grids) and render PNG
figures next to them. File formats are documented in docs/formats.md.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .banks import load_source_bank, save_source_bank
from .bench import (
    DomainSpec,
    TrainConfig,
    default_grid,
    generate_domain,
    run_grid,
    train_source,
)
from .engine import (
    BASELINES,
    PROTOCOLS,
    ProtocolConfig,
    load_stream,
    run_baseline,
    run_stream,
    save_stream,
)
from .network import forward, load_checkpoint, save_checkpoint
from .reporting import summarize_grid_dir, write_grid_files, write_report_files
from .source import (
    InferenceConfig,
    build_inferred_bank,
    choose_gamma,
    estimate_source_stats,
    infer_source_means,
)


def _load_config(path: str | None, protocol: str | None, seed: int | None) -> ProtocolConfig:
    data = {}
    if path:
        with open(path) as fh:
            data = json.load(fh)
    if protocol is not None:
        data["protocol"] = protocol
    if seed is not None:
        data["seed"] = seed
    return ProtocolConfig.from_dict(data)


def _load_xy(path: str) -> tuple[np.ndarray, np.ndarray]:
    with np.load(path) as data:
        return data["x"], data["y"]


def cmd_train_source(args) -> int:
    train_x, train_y = _load_xy(args.train)
    val_x, val_y = _load_xy(args.val)
    cfg = TrainConfig(
        hidden=tuple(int(h) for h in args.hidden.split(",") if h),
        feature_dim=args.feature_dim,
        epochs=args.epochs,
        lr=args.lr,
        seed=args.seed,
    )
    params, history = train_source(train_x, train_y, val_x, val_y, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(params, out / "model.json")
    bank = estimate_source_stats(forward(params, train_x).features, train_y)
    save_source_bank(bank, out / "source_stats.json")
    with open(out / "train_history.json", "w") as fh:
        json.dump(history, fh, indent=1)
    print(f"val accuracy {history[-1]['val_accuracy']:.3f}; wrote {out}/model.json, "
          f"{out}/source_stats.json")
    return 0


def cmd_infer_source(args) -> int:
    params = load_checkpoint(args.model)
    result = infer_source_means(params.classifier, InferenceConfig(seed=args.seed))
    gamma = choose_gamma(result.means)
    bank = build_inferred_bank(result.means, gamma)
    save_source_bank(bank, args.out)
    print(
        f"inferred {bank.n_classes} class means in {result.iterations} iterations; "
        f"self-consistency {result.consistency_rate:.0%}; gamma {gamma:.4g}; "
        f"wrote {args.out}"
    )
    return 0


def cmd_adapt(args) -> int:
    if (args.source_stats is None) == (not args.infer_source):
        raise SystemExit("adapt needs exactly one of --source-stats or --infer-source")
    params = load_checkpoint(args.model)
    stream = load_stream(args.stream)
    cfg = _load_config(args.config, args.protocol, args.seed)
    if args.infer_source:
        result = infer_source_means(params.classifier, InferenceConfig(seed=cfg.seed))
        source = build_inferred_bank(result.means, choose_gamma(result.means))
    else:
        source = load_source_bank(args.source_stats)
    report = run_stream(cfg, source, params, stream)
    paths = write_report_files(report, args.out)
    if report.labels is not None:
        print(f"final error {report.final_error():.4f}")
    print(f"wrote {paths['report']}")
    return 0


def cmd_baseline(args) -> int:
    params = load_checkpoint(args.model)
    stream = load_stream(args.stream)
    cfg = _load_config(args.config, args.protocol, args.seed)
    report = run_baseline(args.kind, cfg, params, stream)
    paths = write_report_files(report, args.out)
    if report.labels is not None:
        print(f"final error {report.final_error():.4f}")
    print(f"wrote {paths['report']}")
    return 0


def cmd_bench_gen(args) -> int:
    with open(args.spec) as fh:
        spec = DomainSpec.from_dict(json.load(fh))
    data = generate_domain(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    np.savez(out / "source_train.npz", x=data.train_x, y=data.train_y)
    np.savez(out / "source_val.npz", x=data.val_x, y=data.val_y)
    save_stream(data.stream, out / "target_stream.npz")
    with open(out / "domain.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=1)
    print(
        f"wrote {out}/source_train.npz ({data.train_x.shape[0]} samples), "
        f"{out}/source_val.npz, {out}/target_stream.npz "
        f"({data.stream.n_samples} samples, severity {spec.severity})"
    )
    return 0


def cmd_bench_run(args) -> int:
    if (args.grid is None) == (not args.default):
        raise SystemExit("bench run needs exactly one of --grid or --default")
    if args.default:
        grid = default_grid()
    else:
        with open(args.grid) as fh:
            grid = json.load(fh)
    rows = run_grid(grid)
    paths = write_grid_files(rows, args.out)
    failed = [r["name"] for r in rows if r.get("status") != "ok"]
    note = f" ({len(failed)} failed: {', '.join(failed)})" if failed else ""
    print(f"ran {len(rows)} cells{note}; wrote {paths['results_csv']}")
    return 0


def cmd_bench_report(args) -> int:
    print(summarize_grid_dir(args.in_dir))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="streamalign",
        description="Streaming test-time adaptation: engine and benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train-source", help="fit the source classifier on labeled data")
    p.add_argument("--train", required=True, help="npz with arrays x, y")
    p.add_argument("--val", required=True, help="npz with arrays x, y")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--hidden", default="64,64", help="comma-separated hidden widths")
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("infer-source", help="recover source statistics from weights")
    p.add_argument("--model", required=True, help="model checkpoint JSON")
    p.add_argument("--out", required=True, help="output source-bank JSON")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_infer_source)

    p = sub.add_parser("adapt", help="adapt on a target stream")
    p.add_argument("--protocol", choices=PROTOCOLS, default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--stream", required=True, help="npz with array x (y optional)")
    p.add_argument("--source-stats", default=None, help="source-bank JSON")
    p.add_argument("--infer-source", action="store_true",
                   help="infer source statistics from the model instead of loading them")
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("baseline", help="run a reference adapter")
    p.add_argument("--kind", choices=BASELINES, required=True)
    p.add_argument("--protocol", choices=PROTOCOLS, default=None)
    p.add_argument("--model", required=True)
    p.add_argument("--stream", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    bench = sub.add_parser("bench", help="synthetic benchmark")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True)

    p = bench_sub.add_parser("gen", help="generate a domain's data files")
    p.add_argument("--spec", required=True, help="domain spec JSON")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_gen)

    p = bench_sub.add_parser("run", help="run an experiment grid")
    p.add_argument("--grid", default=None, help="grid JSON")
    p.add_argument("--default", action="store_true",
                   help="run the built-in default comparison grid")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench_run)

    p = bench_sub.add_parser("report", help="summarize a finished grid directory")
    p.add_argument("--in", dest="in_dir", required=True)
    p.set_defaults(func=cmd_bench_report)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
