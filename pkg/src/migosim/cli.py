"""Command-line entry point: run / sweep / compare / plot."""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import plots
from .config import ConfigFileError, RunSpec, parse_config, with_overrides
from .errors import ConfigurationError
from .metrics import MetricSeries
from .runner import run_experiment, write_outputs


def _progress_printer(total_rounds, quiet):
    if quiet:
        return None

    def show(r, record):
        if r % 50 == 0 or r == total_rounds - 1:
            print(
                f"round {r:4d}  back_acc {record.back_acc:6.2f}  "
                f"ben_acc {record.ben_acc:6.2f}  accepted "
                f"{record.accepted_benign}+{record.accepted_malicious}",
                flush=True,
            )

    return show


def _load_spec(args) -> RunSpec:
    spec = parse_config(args.config)
    return with_overrides(spec, seed=args.seed, rounds=args.rounds)


def cmd_run(args) -> int:
    spec = _load_spec(args)
    outdir = Path(args.outdir or f"runs/{Path(args.config).stem}")
    result = run_experiment(
        spec,
        threads=args.threads,
        progress=_progress_printer(spec.experiment.total_rounds, args.quiet),
    )
    write_outputs(outdir, result, spec)
    if not args.quiet:
        s = result.summary
        print(f"wrote {outdir}  max_acc={s.max_acc:.1f} final_ben_acc={s.final_ben_acc:.1f}")
    return 0


def cmd_sweep(args) -> int:
    spec = _load_spec(args)
    outdir = Path(args.outdir or f"runs/{Path(args.config).stem}-sweep")
    summaries = []
    for i in range(args.seeds):
        seeded = with_overrides(spec, seed=spec.experiment.seed + i)
        result = run_experiment(seeded, threads=args.threads)
        write_outputs(outdir / f"seed{seeded.experiment.seed}", result, seeded)
        summaries.append(result.summary.to_json_dict())
        if not args.quiet:
            print(f"seed {seeded.experiment.seed}: max_acc={result.summary.max_acc:.1f}")

    aggregate = {"seeds": [s["seed"] for s in summaries], "config_hash": summaries[0]["config_hash"]}
    for field in ("max_acc", "l100", "l300", "l600", "final_ben_acc", "ben_acc_drop"):
        values = [s[field] for s in summaries if s[field] is not None]
        aggregate[field] = (
            {"mean": float(np.mean(values)), "std": float(np.std(values)), "n": len(values)}
            if values
            else None
        )
    outdir.mkdir(parents=True, exist_ok=True)
    with open(outdir / "sweep.json", "w") as fh:
        json.dump(aggregate, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not args.quiet:
        print(f"wrote {outdir / 'sweep.json'}")
    return 0


_SUMMARY_COLS = ("max_acc", "l100", "l300", "l600")


def cmd_compare(args) -> int:
    """Build an attack x defense matrix over the given configs."""
    rows: dict[tuple[str, str], dict[str, dict]] = {}
    defenses: list[str] = []
    for path in args.configs:
        spec = with_overrides(parse_config(path), seed=args.seed, rounds=args.rounds)
        result = run_experiment(spec, threads=args.threads)
        key = (spec.attack.kind, spec.attack.backdoor if spec.attack.kind != "none" else "-")
        dname = spec.defense.name
        if dname not in defenses:
            defenses.append(dname)
        rows.setdefault(key, {})[dname] = result.summary.to_json_dict()
        if not args.quiet:
            print(f"{path}: {key[0]}/{key[1]} vs {dname} "
                  f"max_acc={result.summary.max_acc:.1f}")

    header = ["attack", "backdoor"]
    for d in defenses:
        header += [f"{d}:{c}" for c in _SUMMARY_COLS]
    lines = [",".join(header)]
    for (attack, backdoor), per_defense in sorted(rows.items()):
        cells = [attack, backdoor]
        for d in defenses:
            summary = per_defense.get(d)
            for c in _SUMMARY_COLS:
                v = summary.get(c) if summary else None
                cells.append("" if v is None else f"{v:.1f}")
        lines.append(",".join(cells))
    text = "\n".join(lines) + "\n"

    outdir = Path(args.outdir or "runs/compare")
    outdir.mkdir(parents=True, exist_ok=True)
    (outdir / "compare.csv").write_text(text)
    if not args.quiet:
        print(text, end="")
        print(f"wrote {outdir / 'compare.csv'}")
    return 0


def cmd_plot(args) -> int:
    series = MetricSeries.from_csv(args.metrics)
    outdir = Path(args.outdir or Path(args.metrics).parent)
    outdir.mkdir(parents=True, exist_ok=True)
    plots.write_run_plots(outdir, series)
    if not args.quiet:
        print(f"wrote plots to {outdir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="migosim",
        description="Deterministic federated-learning backdoor/defense simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("config", help="TOML experiment config")
        p.add_argument("--seed", type=int, default=None, help="override experiment seed")
        p.add_argument("--rounds", type=int, default=None, help="override total rounds")
        p.add_argument("--outdir", default=None)
        p.add_argument("--quiet", action="store_true")
        p.add_argument("--threads", type=int, default=1)

    p_run = sub.add_parser("run", help="run one experiment and write outputs")
    common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run several seeds and aggregate")
    common(p_sweep)
    p_sweep.add_argument("--seeds", type=int, default=3, help="number of seeds")
    p_sweep.set_defaults(func=cmd_sweep)

    p_cmp = sub.add_parser("compare", help="attack x defense summary matrix")
    p_cmp.add_argument("configs", nargs="+", help="TOML experiment configs")
    p_cmp.add_argument("--seed", type=int, default=None)
    p_cmp.add_argument("--rounds", type=int, default=None)
    p_cmp.add_argument("--outdir", default=None)
    p_cmp.add_argument("--quiet", action="store_true")
    p_cmp.add_argument("--threads", type=int, default=1)
    p_cmp.set_defaults(func=cmd_compare)

    p_plot = sub.add_parser("plot", help="emit SVG plots from a metrics.csv")
    p_plot.add_argument("metrics")
    p_plot.add_argument("--outdir", default=None)
    p_plot.add_argument("--quiet", action="store_true")
    p_plot.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigFileError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ConfigurationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
