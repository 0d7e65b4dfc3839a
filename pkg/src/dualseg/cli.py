"""Command-line entry point binding data generation, training, and reports.

Exit codes: 0 on success, 1 on a usage or configuration mistake, 2 on a
runtime failure.  ``--help`` on any subcommand exits 0.  The env var
DUALSEG_THREADS caps torch's intra-op thread pool.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from typing import Sequence

from .config import (
    STAGES,
    TrainConfig,
    parse_override,
    resolve_config,
)
from .errors import ConfigError, DualsegError, FormatError
from .phantom import STYLES, PhantomSpec, gen_dataset
from .volume import Mask, read_volume, write_volume

USAGE_EXIT = 1
RUNTIME_EXIT = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        raise _UsageError(message)


def _add_override_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override, repeatable")
    p.add_argument("--seed", type=int, default=None, help="training seed")
    p.add_argument("--desk", action="store_true",
                   help="shrink network and crop sizes for small synthetic volumes")


def _resolved(stage: str, args: argparse.Namespace) -> TrainConfig:
    overrides = dict(parse_override(item) for item in args.overrides)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return resolve_config(stage, args.config, overrides, desk=args.desk)


def _stage_resolved(stage: str, args: argparse.Namespace) -> TrainConfig:
    """Resolve one stage of a two-stage command.

    A ``gfs.`` or ``lis.`` prefix scopes an override to that stage;
    unprefixed keys reach both stages.
    """
    overrides = {}
    for item in args.overrides:
        key, value = parse_override(item)
        head, _, rest = key.partition(".")
        if head in STAGES:
            if head == stage and rest:
                overrides[rest] = value
        else:
            overrides[key] = value
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    return resolve_config(stage, args.config, overrides, desk=args.desk)


def _parse_pairs(items: Sequence[str], flag: str) -> dict[str, str]:
    pairs: dict[str, str] = {}
    for item in items:
        if "=" not in item:
            raise _UsageError(f"{flag} expects NAME=PATH, got {item!r}")
        name, _, path = item.partition("=")
        if not name or not path:
            raise _UsageError(f"{flag} expects NAME=PATH, got {item!r}")
        if name in pairs:
            raise _UsageError(f"{flag} repeats name {name!r}")
        pairs[name] = path
    if not pairs:
        raise _UsageError(f"at least one {flag} is required")
    return pairs


def _parse_values(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v != ""]
    except ValueError as exc:
        raise _UsageError(f"--values must be comma-separated numbers, got {text!r}") from exc
    if not values:
        raise _UsageError("--values is empty")
    return values


def _build_parser() -> _Parser:
    parser = _Parser(prog="dualseg", description=__doc__)
    sub = parser.add_subparsers(dest="subcommand", metavar="SUBCOMMAND")

    p = sub.add_parser("gen-data", help="generate a synthetic single-source dataset")
    p.add_argument("--style", required=True, choices=sorted(STYLES))
    p.add_argument("--n", type=int, required=True, help="number of cases")
    p.add_argument("--val-n", type=int, default=0)
    p.add_argument("--test-n", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--spec", default=None, help="JSON file of phantom geometry overrides")

    p = sub.add_parser("skeletonize", help="skeleton, centerline, or ring of a stored mask")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--op", choices=("skeleton", "centerline", "ring"), default="skeleton")
    p.add_argument("--radius", type=int, default=2,
                   help="centerline dilation radius or ring distance")

    p = sub.add_parser("train", help="train one stage into a run directory")
    p.add_argument("--stage", required=True, choices=("gfs", "lis"))
    p.add_argument("--data", action="append", default=[], required=True,
                   help="dataset directory, repeatable")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--gfs-run", default=None,
                   help="finished first-stage run directory (lis only)")
    p.add_argument("--force", action="store_true")
    _add_override_flags(p)

    p = sub.add_parser("infer", help="segment a dataset split with a trained run")
    p.add_argument("--model", required=True, help="run directory")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="cross-source DSC matrix over trained runs")
    p.add_argument("--model", action="append", default=[], required=True,
                   metavar="NAME=RUNDIR", help="trained run per source, repeatable")
    p.add_argument("--data", action="append", default=[], required=True,
                   metavar="NAME=DIR", help="dataset per source, repeatable")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser(
        "ablate", help="train and score all four model variants",
        description="Trains all four variants per seed. --set keys may carry "
                    "a gfs. or lis. prefix to reach only that stage.")
    p.add_argument("--data", action="append", default=[], required=True,
                   metavar="NAME=DIR")
    p.add_argument("--train-src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seed list")
    p.add_argument("--force", action="store_true")
    _add_override_flags(p)

    p = sub.add_parser("sweep", help="evaluate one run across t or view-count values")
    p.add_argument("--model", required=True, help="run directory")
    p.add_argument("--data", action="append", default=[], required=True,
                   metavar="NAME=DIR")
    p.add_argument("--train-src", required=True)
    p.add_argument("--param", required=True, choices=("t", "k"))
    p.add_argument("--values", required=True)
    p.add_argument("--out", required=True, help="output CSV path")

    p = sub.add_parser("report", help="regenerate plots from a run's CSVs")
    p.add_argument("--run", required=True)
    return parser


def _cmd_gen_data(args: argparse.Namespace) -> int:
    spec = PhantomSpec()
    if args.spec is not None:
        with open(args.spec, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise ConfigError("phantom spec file must hold a JSON object")
        data = {k: tuple(v) if isinstance(v, list) else v for k, v in data.items()}
        try:
            spec = dataclasses.replace(spec, **data)
        except TypeError as exc:
            raise ConfigError(f"unknown phantom spec key: {exc}") from exc
    manifest = gen_dataset(spec, STYLES[args.style], args.n, args.seed, args.out,
                           n_val=args.val_n, n_test=args.test_n)
    print(f"wrote {len(manifest['cases'])} cases to {args.out}")
    return 0


def _cmd_skeletonize(args: argparse.Namespace) -> int:
    from .morphology import centerline_mask, ring_region, skeletonize3d

    obj = read_volume(args.in_path)
    if not isinstance(obj, Mask):
        raise FormatError(f"{args.in_path} holds intensities, not a mask")
    if args.op == "skeleton":
        out = skeletonize3d(obj)
    elif args.op == "centerline":
        out = centerline_mask(obj, dilation_radius=args.radius)
    else:
        out = ring_region(obj, radius=args.radius)
    write_volume(out, args.out, metadata={"op": args.op, "source": args.in_path})
    print(f"wrote {args.out} ({out.count()} voxels on)")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    from . import pipeline, reports

    cfg = _resolved(args.stage, args)
    if args.stage == "gfs":
        stats = pipeline.train_gfs(args.data, cfg, args.run_dir, force=args.force)
    else:
        if args.gfs_run is None:
            raise _UsageError("--gfs-run is required for --stage lis")
        stats = pipeline.train_lis(args.data, cfg, args.run_dir,
                                   gfs_run_dir=args.gfs_run, force=args.force)
    reports.plot_losses(os.path.join(args.run_dir, "logs", "losses.csv"),
                        os.path.join(args.run_dir, "reports", "losses.png"))
    print(f"trained {args.stage}: {stats.steps} steps into {args.run_dir}")
    return 0


def _cmd_infer(args: argparse.Namespace) -> int:
    from . import pipeline, reports
    from .volume import NORMALIZED, Volume, dsc

    bundle = pipeline.load_bundle(args.model)
    cases = pipeline.load_cases(args.data, args.split or None)
    if not cases:
        raise ConfigError(f"no cases with split {args.split!r} in {args.data}")
    os.makedirs(os.path.join(args.out, "pred"), exist_ok=True)
    os.makedirs(os.path.join(args.out, "unc"), exist_ok=True)
    rows = []
    for case in cases:
        mask, triple, info = pipeline.infer_case(bundle, case.norm, label=case.label)
        write_volume(mask, os.path.join(args.out, "pred", case.case_id + ".dsv"),
                     metadata={"case": case.case_id})
        write_volume(Volume(triple.unc_map, case.norm.spacing, NORMALIZED),
                     os.path.join(args.out, "unc", case.case_id + ".dsv"),
                     metadata={"case": case.case_id, "content": "uncertainty"})
        rows.append((case.case_id, dsc(mask, case.label),
                     info["unc_count"], info["unc_sum"]))
    reports.write_csv(os.path.join(args.out, "cases.csv"),
                      ("case_id", "dsc", "unc_count", "unc_sum"), rows)
    print(f"segmented {len(rows)} cases into {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    from . import pipeline, reports

    model_dirs = _parse_pairs(args.model, "--model")
    data_dirs = _parse_pairs(args.data, "--data")
    bundles = {name: pipeline.load_bundle(d) for name, d in model_dirs.items()}
    out_csv = os.path.join(args.out, "reports", "eval_matrix.csv")
    rows = pipeline.eval_matrix(bundles, data_dirs, out_csv)
    mean_rows = [r for r in rows if r["test_source"] == "mean"]
    reports.plot_bars([r["train_source"] for r in mean_rows],
                      [r["mean_dsc"] for r in mean_rows], "mean DSC",
                      os.path.join(args.out, "reports", "eval_matrix.png"))
    print(f"wrote {out_csv} ({len(rows)} rows)")
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    from . import pipeline

    data_dirs = _parse_pairs(args.data, "--data")
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s != ""]
    except ValueError as exc:
        raise _UsageError(f"--seeds must be comma-separated ints, got {args.seeds!r}") from exc
    if not seeds:
        raise _UsageError("--seeds is empty")
    cfg_gfs = _stage_resolved("gfs", args)
    cfg_lis = _stage_resolved("lis", args)
    ab_rows, _ = pipeline.ablate(data_dirs, args.train_src, cfg_gfs, cfg_lis,
                                 args.out, seeds, force=args.force)
    print(f"ablation over seeds {seeds}: {len(ab_rows)} rows in {args.out}/reports")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    from . import pipeline

    data_dirs = _parse_pairs(args.data, "--data")
    values = _parse_values(args.values)
    rows = pipeline.sweep(args.model, data_dirs, args.train_src, args.param,
                          values, args.out)
    print(f"swept {args.param} over {len(rows)} values into {args.out}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    from . import reports

    made = []
    losses = os.path.join(args.run, "logs", "losses.csv")
    if os.path.exists(losses):
        reports.plot_losses(losses, os.path.join(args.run, "reports", "losses.png"))
        made.append("losses.png")
    for name, label_col, value_col in (("eval_matrix", "train_source", "mean_dsc"),
                                       ("ablation", "variant", "mean_dsc")):
        csv_path = os.path.join(args.run, "reports", name + ".csv")
        if not os.path.exists(csv_path):
            continue
        header, rows = reports.read_csv(csv_path)
        idx = {h: i for i, h in enumerate(header)}
        groups: dict[str, list[float]] = {}
        for row in rows:
            if name == "eval_matrix" and row[idx["test_source"]] != "mean":
                continue
            groups.setdefault(row[idx[label_col]], []).append(float(row[idx[value_col]]))
        labels = sorted(groups)
        values = [sum(groups[k]) / len(groups[k]) for k in labels]
        reports.plot_bars(labels, values, "mean DSC",
                          os.path.join(args.run, "reports", name + ".png"))
        made.append(name + ".png")
    if not made:
        raise FormatError(f"no report CSVs found under {args.run}")
    print(f"regenerated {', '.join(made)} in {args.run}/reports")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "skeletonize": _cmd_skeletonize,
    "train": _cmd_train,
    "infer": _cmd_infer,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def _apply_thread_cap() -> None:
    raw = os.environ.get("DUALSEG_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError as exc:
        raise ConfigError(f"DUALSEG_THREADS must be an integer, got {raw!r}") from exc
    if n < 1:
        raise ConfigError(f"DUALSEG_THREADS must be >= 1, got {n}")
    import torch

    torch.set_num_threads(n)


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.subcommand is None:
            parser.print_help()
            return USAGE_EXIT
        _apply_thread_cap()
        return _COMMANDS[args.subcommand](args)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return USAGE_EXIT
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return USAGE_EXIT
    except (DualsegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
