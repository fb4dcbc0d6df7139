"""Command-line driver: ``trajpilot <stage> --config run.json`` or ``trajpilot run``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .pipeline import STAGES, TASK_MODES, ConfigError, PrerequisiteError, RunConfig, run_pipeline

log = logging.getLogger("trajpilot")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajpilot", description=__doc__)
    p.add_argument("command", choices=STAGES + ("run",),
                   help="a single stage, or 'run' for the stages given by --stages (default: all)")
    p.add_argument("--config", type=Path, help="JSON run config; defaults apply to anything it omits")
    p.add_argument("--stages", help="comma-separated stage list for 'run'")
    p.add_argument("--seed-override", type=int, help="replace every seed in the config")
    p.add_argument("--out-dir", help="run directory (overrides the config)")
    p.add_argument("--table", action="store_true", help="print a mid R@1 table from the run's reports")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed_override is not None:
        cfg = cfg.with_seed(args.seed_override)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    try:
        cfg.validate()
    except ValueError as e:
        raise ConfigError(str(e)) from None
    return cfg


def report_table(out_dir, metric: str = "M@1") -> str:
    """Methods by horizon for each task mode, read back from the report CSVs."""
    out_dir = Path(out_dir)
    blocks = []
    for mode in TASK_MODES:
        files = sorted(out_dir.glob(f"report_{mode}_*.csv"), key=lambda f: int(f.stem.rsplit("_", 1)[1]))
        if not files:
            continue
        cells: dict[str, dict[int, float]] = {}
        for f in files:
            h = int(f.stem.rsplit("_", 1)[1])
            with f.open() as fh:
                for row in csv.DictReader(fh):
                    if row["metric"] == metric and row["horizon"] == str(h):
                        cells.setdefault(row["method"], {})[h] = 100 * float(row["value"])
        hs = [int(f.stem.rsplit("_", 1)[1]) for f in files]
        width = max(len(m) for m in cells)
        lines = [f"{mode} mid {metric}", f"{'method':<{width}} " + " ".join(f"{'H' + str(h):>7}" for h in hs)]
        for method, vals in cells.items():
            lines.append(f"{method:<{width}} " + " ".join(
                f"{vals[h]:7.2f}" if h in vals else f"{'-':>7}" for h in hs))
        blocks.append("\n".join(lines))
    if not blocks:
        raise PrerequisiteError(f"no report CSVs in {out_dir}; run the eval stage first")
    return "\n\n".join(blocks)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args)
        if args.command == "run":
            stages = tuple(s.strip() for s in args.stages.split(",")) if args.stages else STAGES
        else:
            if args.stages:
                raise ConfigError("--stages only applies to the 'run' command")
            stages = (args.command,)
        run_pipeline(cfg, stages)
        if args.table:
            print(report_table(cfg.out_dir))
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except PrerequisiteError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
