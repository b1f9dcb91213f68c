"""Command-line entry point: ``hartleyseg <subcommand> ...``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import transforms as T
from .checks import TOLERANCE, format_results, gradient_suite
from .data import PhantomSpec, generate_phantom, read_dataset, read_volume, write_dataset, write_volume
from .harness import ExperimentConfig, emit_report, run
from .metrics import NESTED_REGIONS, format_table, parse_regions, region_metrics
from .networks import Model, NetworkConfig, count_params, param_breakdown, parse_key_values
from .training import TrainConfig, history_csv, normalize_intensity, train


def _triple(text):
    try:
        values = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected KX,KY,KZ, got {text!r}") from None
    if len(values) != 3:
        raise argparse.ArgumentTypeError(f"expected three comma-separated integers, got {text!r}")
    return values


def cmd_transform(args) -> int:
    v = read_volume(args.input).astype(np.float64)
    if args.inverse:
        if args.dims:
            # banded input: zero-fill onto the requested grid first
            band = tuple(n // 2 for n in v.shape[1:])
            field = T.pad(T.SpectralField(v, "banded", T.GridSpec(args.dims, band)))
        else:
            field = T.SpectralField(v, "full", T.GridSpec(v.shape[1:]))
        if args.kmax:
            field = T.pad(T.truncate(field, args.kmax))
        out = T.idht3(field, args.norm)
    else:
        field = T.dht3(v, args.norm)
        out = T.truncate(field, args.kmax).data if args.kmax else field.data
    write_volume(out.astype(np.float32), args.output)
    print(f"wrote {args.output}: shape {out.shape}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradient_suite(seed=args.seed)
    print(format_results(results, args.tol))
    return 0 if all(err < args.tol for _, err, _ in results) else 1


def cmd_count_params(args) -> int:
    cfg = NetworkConfig(variant=args.variant, in_channels=args.in_channels, n_classes=args.classes,
                        width=args.width, k_max=args.kmax, n_blocks=args.blocks, n_heads=args.heads)
    print(f"{cfg.variant}: {count_params(cfg)} parameters")
    for name, n in param_breakdown(cfg).items():
        print(f"  {name:<18} {n}")
    return 0


def _split_config(text):
    raw = parse_key_values(text)
    net_keys = {f.name for f in fields(NetworkConfig)}
    train_keys = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - net_keys - train_keys
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    return ({k: v for k, v in raw.items() if k in net_keys},
            {k: v for k, v in raw.items() if k in train_keys})


def cmd_train(args) -> int:
    net_raw, train_raw = _split_config(Path(args.config).read_text())
    dataset = read_dataset(args.data)
    net_raw.setdefault("in_channels", dataset[0][1].shape[0])
    net_cfg = NetworkConfig.from_mapping(net_raw)
    train_cfg = TrainConfig.from_mapping(train_raw)
    model = Model.build(net_cfg, seed=train_cfg.seed)
    history = train(model, dataset, train_cfg, augment_data=not args.no_augment)
    model.save(args.out)
    table = history_csv(history)
    Path(str(args.out) + ".history.csv").write_text(table)
    sys.stdout.write(table)
    return 0


def cmd_predict(args) -> int:
    model = Model.load(args.model)
    labels = model.predict(normalize_intensity(read_volume(args.input).astype(np.float64)))
    write_volume(labels, args.out)
    print(f"wrote {args.out}")
    return 0


def _label_map(path):
    v = read_volume(path)
    if v.shape[0] != 1:
        raise ValueError(f"{path}: expected a single-channel label volume")
    return v[0]


def cmd_eval(args) -> int:
    regions = parse_regions(args.regions) if args.regions else NESTED_REGIONS
    pairs = list(zip(args.pred, args.gt))
    if len(args.pred) != len(args.gt):
        raise ValueError("--pred and --gt need the same number of files")
    results = {}
    for pred, gt in pairs:
        results[Path(pred).name] = region_metrics(_label_map(pred), _label_map(gt), regions,
                                                  spacing=args.spacing)
    if len(pairs) > 1:
        names = [r.name for r in regions]
        results["mean"] = {n: (float(np.mean([m[n][0] for m in results.values()])),
                               float(np.mean([m[n][1] for m in results.values()]))) for n in names}
    print(format_table(results))
    return 0


def cmd_phantom(args) -> int:
    mapping = parse_key_values(Path(args.spec).read_text()) if args.spec else {}
    if args.count is not None:
        mapping["count"] = args.count
    spec = PhantomSpec.from_mapping(mapping)
    names = write_dataset(generate_phantom(spec), args.out)
    print(f"wrote {len(names)} cases to {args.out}")
    return 0


def cmd_experiment(args) -> int:
    cfg = ExperimentConfig.from_text(Path(args.config).read_text()) if args.config else ExperimentConfig()
    out = args.out or cfg.out_dir
    if not out:
        raise ValueError("give --out or out_dir in the config")
    report = run(cfg)
    for path in emit_report(report, out, cfg):
        print(f"wrote {path}")
    for c in report.cells:
        if c.status != "ok":
            print(f"cell {c.variant}/factor {c.factor}/seed {c.seed} failed: {c.error}", file=sys.stderr)
    return 1 if report.failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hartleyseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("transform", help="Hartley transform of a volume file")
    p.add_argument("input")
    p.add_argument("output")
    p.add_argument("--inverse", action="store_true")
    p.add_argument("--norm", choices=("forward", "none"), default="forward")
    p.add_argument("--kmax", type=_triple, help="keep only the two-sided band KX,KY,KZ")
    p.add_argument("--dims", type=_triple, help="output grid for --inverse of a banded spectrum")
    p.set_defaults(func=cmd_transform)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=TOLERANCE)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("count-params", help="parameter count of a network config")
    p.add_argument("--variant", choices=("hnoseg", "hartleymha", "fno"), default="hnoseg")
    p.add_argument("--width", type=int, default=12)
    p.add_argument("--kmax", type=_triple, default=(14, 14, 10))
    p.add_argument("--blocks", type=int, default=None)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--in-channels", type=int, default=4)
    p.add_argument("--classes", type=int, default=4)
    p.set_defaults(func=cmd_count_params)

    p = sub.add_parser("train", help="train a network on a volume dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="segment a volume with a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="Dice and HD95 per region")
    p.add_argument("--pred", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--regions", help='e.g. "WT:1,2,3;TC:2,3;ET:3"')
    p.add_argument("--spacing", type=lambda s: tuple(float(v) for v in s.split(",")),
                   default=(1.0, 1.0, 1.0))
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("phantom", help="write synthetic phantom cases")
    p.add_argument("--spec")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("experiment", help="resolution-robustness experiment")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_experiment)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
