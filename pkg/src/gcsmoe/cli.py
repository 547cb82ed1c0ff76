"""Command-line front end: one subcommand per stage plus run-all and ablate.

Every command works inside a run directory (``--out``). The environment
variable ``GCSMOE_OUT``, when set, replaces that directory; it is the only
environment input and ``run-all`` records it in the manifest.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import dataset as ds
from . import dependency as dep
from . import gcs
from . import metrics
from . import pipeline as pl
from .config import ConfigError, RunConfig, apply_overrides, dumps_config, load_config
from .nn import load_model

OUT_ENV = "GCSMOE_OUT"
RUN_CONFIG = "run.ini"


class CliError(Exception):
    pass


def _out_dir(args) -> tuple[Path, str | None]:
    override = os.environ.get(OUT_ENV) or None
    chosen = override or args.out
    if not chosen:
        raise CliError(f"no output directory: pass --out or set {OUT_ENV}")
    path = Path(chosen)
    path.mkdir(parents=True, exist_ok=True)
    return path, override


def _config(args, run_dir: Path | None) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif run_dir is not None and (run_dir / RUN_CONFIG).exists():
        cfg = load_config(run_dir / RUN_CONFIG)
    else:
        cfg = RunConfig(pl.PipelineConfig())
    return apply_overrides(cfg, args.seed, args.division, args.M, args.S, args.cgc)


def _write_data(cfg: RunConfig, run_dir: Path) -> tuple[ds.LabeledDataset, ds.LabeledDataset]:
    if cfg.data is not None:
        train, test = ds.generate(cfg.data)
    elif cfg.train_path:
        train, test = ds.load(cfg.train_path), ds.load(cfg.test_path)
    else:
        raise CliError("config has neither a [data] nor a [paths] section")
    ds.save(train, run_dir / pl.FILES["train"])
    ds.save(test, run_dir / pl.FILES["test"])
    return train, test


def _figures(run_dir: Path) -> list[Path]:
    from . import plotting

    ensemble = pl.load_ensemble(run_dir)
    train = ds.load(run_dir / pl.FILES["train"])
    test = ds.load(run_dir / pl.FILES["test"])
    counts = ds.class_counts(train)
    report = metrics.map_report(ensemble, test, counts)
    base = metrics.map_report(load_model(run_dir / pl.FILES["baseline"]), test, counts)
    return [
        plotting.plot_pr_curves(ensemble.predict_proba(test.features), test, run_dir / "pr_curves.png"),
        plotting.plot_ap_vs_count(report, run_dir / "ap_vs_count.png", base),
    ]


# ---------------------------------------------------------------------------
# commands


def cmd_gen(args) -> str:
    run_dir, _ = _out_dir(args)
    cfg = _config(args, None)
    if cfg.data is None:
        raise CliError("gen needs a [data] section in the config")
    train, test = _write_data(cfg, run_dir)
    (run_dir / RUN_CONFIG).write_text(dumps_config(cfg))
    return f"gen: {len(train)} train / {len(test)} test samples, N={train.num_classes}, d={train.feature_dim} -> {run_dir}"


def _stage_cmd(stage: str):
    def run(args) -> str:
        run_dir, _ = _out_dir(args)
        cfg = _config(args, run_dir)
        names = pl.run_stage(stage, run_dir, cfg.pipeline)
        return f"{stage}: wrote {', '.join(names)}"

    return run


def cmd_deps(args) -> str:
    run_dir, _ = _out_dir(args)
    pl.run_stage("deps", run_dir, _config(args, run_dir).pipeline)
    deps = dep.load(run_dir / pl.FILES["deps"])
    pairs = gcs.census(deps)
    return f"deps: N={deps.num_classes}, {len(pairs.s1)} mutual d2 pairs -> {pl.FILES['deps']}"


def cmd_partition(args) -> str:
    run_dir, _ = _out_dir(args)
    cfg = _config(args, run_dir).pipeline
    pl.run_stage("partition", run_dir, cfg)
    deps = dep.load(run_dir / pl.FILES["deps"])
    part = gcs.load(run_dir / pl.FILES["partition"])
    obj = gcs.objective(part, gcs.census(deps))
    sizes = "/".join(str(len(b)) for b in part.blocks())
    return f"partition: {cfg.division} M={part.M} blocks {sizes}, objective {obj} -> {pl.FILES['partition']}"


def cmd_eval(args) -> str:
    run_dir, _ = _out_dir(args)
    cfg = _config(args, run_dir).pipeline
    pl.run_stage("eval", run_dir, cfg)
    summary = metrics.loads_summary((run_dir / pl.FILES["metrics"]).read_text())
    base = metrics.loads_summary((run_dir / pl.FILES["baseline_metrics"]).read_text())
    figs = [] if args.no_figures else _figures(run_dir)
    extra = f", figures {', '.join(p.name for p in figs)}" if figs else ""
    return (
        f"eval: mAP {summary['mAP']:.4f} (baseline {base['mAP']:.4f}), "
        f"head {summary['head_mAP']:.4f}, tail {summary['tail_mAP']:.4f}{extra}"
    )


def cmd_run_all(args) -> str:
    if not args.config:
        raise CliError("run-all needs --config")
    run_dir, override = _out_dir(args)
    cfg = _config(args, None)
    _write_data(cfg, run_dir)
    (run_dir / RUN_CONFIG).write_text(dumps_config(cfg))
    manifest = pl.run_all(
        cfg.pipeline,
        run_dir / pl.FILES["train"],
        run_dir / pl.FILES["test"],
        run_dir,
        cfg.lines(),
        override,
    )
    if not args.no_figures:
        _figures(run_dir)
    results = pl.read_manifest(manifest)["results"]
    return f"run-all: mAP {results['mAP']:.4f} (baseline {results['baseline_mAP']:.4f}) -> {manifest}"


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def cmd_ablate(args) -> str:
    if not args.config:
        raise CliError("ablate needs --config")
    run_dir, _ = _out_dir(args)
    cfg = _config(args, None)
    seeds = (args.seed,) if args.seed is not None else args.seeds

    def data_for_seed(seed):
        if cfg.data is not None:
            return ds.generate(replace(cfg.data, seed=seed))
        if cfg.train_path:
            return ds.load(cfg.train_path), ds.load(cfg.test_path)
        raise CliError("config has neither a [data] nor a [paths] section")

    try:
        grid = pl.ablation_grid(data_for_seed, cfg.pipeline, seeds, args.grid_M, args.grid_S)
    except (CliError, ConfigError):
        raise
    except Exception as exc:
        raise pl.StageError("ablate", exc) from exc
    report = run_dir / "ablation.txt"
    report.write_text(pl.dumps_grid(grid))
    names = [report.name]
    if not args.no_figures:
        from . import plotting

        names.append(plotting.plot_grid_heatmap(grid, run_dir / "ablation.png").name)
    return f"ablate: {len(grid.cells)} cells + {len(grid.cgc_off)} cgc-off rows over seeds {list(seeds)} -> {', '.join(names)}"


COMMANDS = {
    "gen": cmd_gen,
    "train-baseline": _stage_cmd("baseline"),
    "deps": cmd_deps,
    "partition": cmd_partition,
    "train-experts": _stage_cmd("experts"),
    "train-fam": _stage_cmd("fam"),
    "train-head": _stage_cmd("head"),
    "eval": cmd_eval,
    "run-all": cmd_run_all,
    "ablate": cmd_ablate,
}


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=_u64, help="run seed (also reseeds generated data)")
    common.add_argument("--out", help=f"run directory (overridden by ${OUT_ENV})")
    common.add_argument("--division", "--mode", choices=("gcs", "random"), help="class division method")
    common.add_argument("--M", type=int, help="number of super-classes / experts")
    common.add_argument("--S", type=int, help="experts kept by the gate")
    common.add_argument("--cgc", choices=("on", "off"), help="gate expert features (off = plain concatenation)")
    common.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="gcsmoe", description="Multi-expert classifier with graph-based class selection.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "ablate":
            p.add_argument("--seeds", type=_int_list, default=(0, 1, 2, 3, 4))
            p.add_argument("--grid-M", type=_int_list, default=(3, 4, 5))
            p.add_argument("--grid-S", type=_int_list, default=(1, 2, 3))
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        print(COMMANDS[args.command](args))
    except pl.StageError as exc:
        print(f"gcsmoe {args.command}: {exc}", file=sys.stderr)
        return 1
    except (CliError, ConfigError, OSError, ValueError) as exc:
        print(f"gcsmoe {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
