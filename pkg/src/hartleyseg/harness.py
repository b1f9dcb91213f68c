"""Resolution-robustness experiment: train on downsampled phantoms, test at full size."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import PhantomSpec, downsample, generate_phantom
from .metrics import NESTED_REGIONS, foreground_dice, region_metrics
from .networks import VARIANTS, Model, NetworkConfig, parse_key_values
from .training import TrainConfig, TrainingDiverged, history_csv, normalize_intensity, train

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("variant", "factor", "region", "dice", "hd95", "params", "status")
PLOT_COLUMNS = ("variant", "factor", "dice", "hd95", "foreground_dice")


@dataclass
class ExperimentConfig:
    """Desk-scale defaults: 32x32x16 phantoms, factors 1 and 2, tiny networks."""

    variants: tuple = VARIANTS
    factors: tuple = (1, 2)
    seeds: tuple = (0, 1, 2)
    n_train: int = 10
    n_test: int = 4
    phantom: PhantomSpec = field(default_factory=lambda: PhantomSpec(dims=(32, 32, 16), count=14))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=30))
    width: int = 8
    k_max: tuple = (4, 4, 2)
    n_blocks: int = 4
    n_heads: int = 2
    out_dir: str | None = None

    def __post_init__(self):
        self.variants = tuple(self.variants)
        self.factors = tuple(int(f) for f in self.factors)
        self.seeds = tuple(int(s) for s in self.seeds)
        if not self.variants:
            raise ValueError("need at least one variant")
        if any(v not in VARIANTS for v in self.variants):
            raise ValueError(f"variants must come from {VARIANTS}")
        if any(f < 1 for f in self.factors):
            raise ValueError("downsampling factors must be >= 1")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("need at least one training and one test case")
        self.phantom = replace(self.phantom, count=self.n_train + self.n_test)

    def network(self, variant: str, in_channels: int) -> NetworkConfig:
        return NetworkConfig(variant=variant, in_channels=in_channels, n_classes=4,
                             width=self.width, k_max=self.k_max, n_blocks=self.n_blocks,
                             n_heads=self.n_heads)

    @classmethod
    def from_text(cls, text: str) -> ExperimentConfig:
        """Flat ``key=value`` file; ``phantom.*`` and ``train.*`` keys nest."""
        raw = parse_key_values(text)
        phantom = {k[8:]: v for k, v in raw.items() if k.startswith("phantom.")}
        train_cfg = {k[6:]: v for k, v in raw.items() if k.startswith("train.")}
        top = {k: v for k, v in raw.items() if "." not in k}
        kwargs = {}
        for key, value in top.items():
            if key == "variants":
                kwargs[key] = tuple(v.strip() for v in value.split(","))
            elif key in ("factors", "seeds", "k_max"):
                kwargs[key] = tuple(int(v) for v in value.split(","))
            elif key in ("n_train", "n_test", "width", "n_blocks", "n_heads"):
                kwargs[key] = int(value)
            elif key == "out_dir":
                kwargs[key] = value
            else:
                raise ValueError(f"unknown experiment key {key!r}")
        if phantom:
            kwargs["phantom"] = PhantomSpec.from_mapping(phantom)
        if train_cfg:
            kwargs["train"] = TrainConfig.from_mapping(train_cfg)
        return cls(**kwargs)


@dataclass
class Cell:
    variant: str
    factor: int
    seed: int
    params: int
    status: str = "ok"
    regions: dict = field(default_factory=dict)  # name -> (dice, hd95) averaged over test cases
    foreground_dice: float = float("nan")
    history: list = field(default_factory=list)
    wall_clock: float = 0.0
    error: str = ""

    @property
    def mean_dice(self) -> float:
        return float(np.mean([d for d, _ in self.regions.values()])) if self.regions else float("nan")

    @property
    def mean_hd95(self) -> float:
        return float(np.mean([h for _, h in self.regions.values()])) if self.regions else float("nan")


@dataclass
class ExperimentReport:
    cells: list = field(default_factory=list)
    train_ids: tuple = ()
    test_ids: tuple = ()

    @property
    def failed(self) -> bool:
        return any(c.status != "ok" for c in self.cells)

    def group(self, variant, factor):
        return [c for c in self.cells if c.variant == variant and c.factor == factor]

    def keys(self):
        seen = []
        for c in self.cells:
            if (c.variant, c.factor) not in seen:
                seen.append((c.variant, c.factor))
        return seen

    def summary_rows(self):
        """Seed-averaged rows per (variant, factor, region)."""
        rows = []
        for variant, factor in self.keys():
            cells = self.group(variant, factor)
            ok = [c for c in cells if c.status == "ok"]
            params = cells[0].params
            if not ok:
                rows.append((variant, factor, "-", float("nan"), float("nan"), params, "failed"))
                continue
            status = "ok" if len(ok) == len(cells) else "partial"
            for region in (r.name for r in NESTED_REGIONS):
                d = float(np.mean([c.regions[region][0] for c in ok]))
                h = float(np.mean([c.regions[region][1] for c in ok]))
                rows.append((variant, factor, region, d, h, params, status))
        return rows

    def plot_rows(self):
        rows = []
        for variant, factor in self.keys():
            ok = [c for c in self.group(variant, factor) if c.status == "ok"]
            if ok:
                rows.append((variant, factor, float(np.mean([c.mean_dice for c in ok])),
                             float(np.mean([c.mean_hd95 for c in ok])),
                             float(np.mean([c.foreground_dice for c in ok]))))
            else:
                rows.append((variant, factor, float("nan"), float("nan"), float("nan")))
        return rows

    def degradation(self, variant, low=1, high=2, key="mean_dice") -> float:
        """Seed-mean drop in Dice from training at factor ``low`` to ``high``."""
        a = [getattr(c, key) for c in self.group(variant, low) if c.status == "ok"]
        b = [getattr(c, key) for c in self.group(variant, high) if c.status == "ok"]
        return float(np.mean(a) - np.mean(b))


def run(cfg: ExperimentConfig) -> ExperimentReport:
    """Train every (variant, factor, seed) cell and evaluate at full resolution."""
    cases = generate_phantom(cfg.phantom)
    ids = [f"case_{i:03d}" for i in range(len(cases))]
    train_ids, test_ids = ids[: cfg.n_train], ids[cfg.n_train:]
    if set(train_ids) & set(test_ids):
        raise AssertionError("training and test cases overlap")
    train_cases = [(i, *cases[ids.index(i)]) for i in train_ids]
    test_cases = [cases[ids.index(i)] for i in test_ids]
    test_inputs = [normalize_intensity(img) for img, _ in test_cases]
    in_channels = cases[0][0].shape[0]

    report = ExperimentReport(train_ids=tuple(train_ids), test_ids=tuple(test_ids))
    for factor in cfg.factors:
        reduced = [(cid, downsample(img, factor, "image"), downsample(lab, factor, "label"))
                   for cid, img, lab in train_cases]
        for variant in cfg.variants:
            for seed in cfg.seeds:
                net = cfg.network(variant, in_channels)
                model = Model.build(net, seed=seed)
                cell = Cell(variant, factor, seed, model.count_params())
                start = time.perf_counter()
                try:
                    cell.history = train(model, reduced, replace(cfg.train, seed=seed))
                    per_case = []
                    fg = []
                    for x, (_, labels) in zip(test_inputs, test_cases):
                        pred = model.predict(x)
                        per_case.append(region_metrics(pred, labels))
                        fg.append(foreground_dice(pred, labels))
                    cell.regions = {
                        r.name: (float(np.mean([m[r.name][0] for m in per_case])),
                                 float(np.mean([m[r.name][1] for m in per_case])))
                        for r in NESTED_REGIONS}
                    cell.foreground_dice = float(np.mean(fg))
                except (TrainingDiverged, ValueError, FloatingPointError) as exc:
                    cell.status = "failed"
                    cell.error = f"{type(exc).__name__}: {exc}"
                    log.warning("cell %s/%d/%d failed: %s", variant, factor, seed, exc)
                cell.wall_clock = time.perf_counter() - start
                log.info("%s factor %d seed %d: dice %.4f (%.1fs)", variant, factor, seed,
                         cell.mean_dice, cell.wall_clock)
                report.cells.append(cell)
    return report


def _fmt(value):
    if isinstance(value, float):
        return "nan" if math.isnan(value) else repr(value)
    return str(value)


def _csv(columns, rows) -> str:
    lines = [",".join(columns)]
    lines += [",".join(_fmt(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"


def report_csv(report: ExperimentReport) -> str:
    return _csv(REPORT_COLUMNS, report.summary_rows())


def plot_csv(report: ExperimentReport) -> str:
    return _csv(PLOT_COLUMNS, report.plot_rows())


def parse_report_csv(text: str):
    """Rows of ``report.csv`` with numeric fields converted back."""
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append((rec["variant"], int(rec["factor"]), rec["region"], float(rec["dice"]),
                     float(rec["hd95"]), int(rec["params"]), rec["status"]))
    return rows


def summary(report: ExperimentReport, cfg: ExperimentConfig | None = None) -> dict:
    cells = []
    for c in report.cells:
        cells.append({"variant": c.variant, "factor": c.factor, "seed": c.seed,
                      "params": c.params, "status": c.status, "error": c.error,
                      "regions": {k: {"dice": d, "hd95": h} for k, (d, h) in c.regions.items()},
                      "mean_dice": c.mean_dice, "foreground_dice": c.foreground_dice})
    out = {"cells": cells, "train_ids": list(report.train_ids), "test_ids": list(report.test_ids),
           "timing": {f"{c.variant}/{c.factor}/{c.seed}": c.wall_clock for c in report.cells}}
    if cfg is not None:
        conf = asdict(cfg)
        conf.pop("out_dir", None)
        out["config"] = conf
    return out


def emit_report(report: ExperimentReport, out_dir, cfg: ExperimentConfig | None = None) -> list:
    """Write ``report.csv``, per-cell histories, plot data and ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    def put(name, text):
        (out / name).write_text(text)
        written.append(out / name)

    put("report.csv", report_csv(report))
    put("dice_vs_factor.csv", plot_csv(report))
    for variant, factor in report.keys():
        rows = []
        for c in report.group(variant, factor):
            rows += [dict(r, seed=c.seed) for r in c.history]
        put(f"history_{variant}_{factor}.csv", history_csv(rows, extra_columns=("seed",)))
    put("summary.json", json.dumps(summary(report, cfg), indent=2, sort_keys=True,
                                   default=_json_default) + "\n")
    return written


def _json_default(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialize {type(obj).__name__}")
