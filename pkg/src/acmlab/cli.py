"""Command-line entry point: ``acmlab {metrics,gen,train,curve,sweep}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import re
import sys
from pathlib import Path

import numpy as np

from .graph import build_graph, load_edge_list, parse_kind
from .metrics import LabelEncoding, estimate_metrics_masked, load_labels, metric_report
from .models import GraphData, ModelSpec
from .synth import SynthSpec, generate_dataset, write_dataset
from .train import (
    ABLATION_GRID, SYNTHETIC_GRID, CurveModel, DivergenceError, TrainConfig, run_repeated,
    run_synthetic_curve, sweep, write_curve_csv,
)

logger = logging.getLogger("acmlab")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

REGULAR_LEVELS = [round(0.05 * i, 2) for i in range(1, 19)]
GENERAL_LEVELS = [0.005] + [round(0.01 * i, 2) for i in range(1, 10)] + [round(0.05 * i, 2) for i in range(2, 20)]

# Curve model presets: spec fields plus training overrides.
PRESETS = {
    "mlp-1": ({"family": "mlp", "layers": 1}, {}),
    "mlp-2": ({"family": "mlp", "layers": 2, "dropout": 0.5}, {"weight_decay": 5e-4}),
    "sgc-1": ({"family": "sgc", "layers": 1}, {}),
    "sgc-2": ({"family": "sgc", "layers": 2}, {}),
    "gcn": ({"family": "gcn", "layers": 2, "dropout": 0.5}, {"weight_decay": 5e-4}),
    "snowball-2": ({"family": "snowball", "layers": 2, "dropout": 0.5}, {"weight_decay": 5e-4}),
    "snowball-3": ({"family": "snowball", "layers": 3, "dropout": 0.5}, {"weight_decay": 5e-4}),
    "acm-sgc-1": ({"family": "acm_sgc", "layers": 1, "dropout": 0.1}, {}),
    "acm-gcn": ({"family": "acm_gcn", "layers": 2, "dropout": 0.5}, {"weight_decay": 5e-4}),
    "acmii-gcn": ({"family": "acmii_gcn", "layers": 2, "dropout": 0.5}, {"weight_decay": 5e-4}),
    "acm-gcn+": ({"family": "acm_gcn_plus", "layers": 2, "dropout": 0.5}, {"weight_decay": 5e-4}),
    "acm-gcn++": ({"family": "acm_gcn_plusplus", "layers": 2, "dropout": 0.5}, {"weight_decay": 5e-4}),
}


class ConfigError(Exception):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


class DataError(Exception):
    """Unreadable or inconsistent input data."""


def preset_model(name: str, seed: int = 0) -> CurveModel:
    if name not in PRESETS:
        raise ConfigError("models", f"unknown model {name!r}; choose from {', '.join(PRESETS)}")
    spec_kw, cfg_kw = PRESETS[name]
    return CurveModel(name, ModelSpec(**spec_kw), TrainConfig(seed=seed, **cfg_kw))


# ---------------------------------------------------------------------------
# Config validation


def _build(cls, section: str, raw):
    """Instantiate a dataclass from a JSON object, mapping errors to field paths."""
    if not isinstance(raw, dict):
        raise ConfigError(section, "expected an object")
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    for key in raw:
        if key not in names:
            raise ConfigError(f"{section}.{key}", f"unknown field (expected one of {', '.join(sorted(names))})")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        msg = str(exc)
        hits = [(m.start(), name) for name in names for m in [re.search(rf"\b{name}\b", msg)] if m]
        path = f"{section}.{min(hits)[1]}" if hits else section
        raise ConfigError(path, msg) from None


@dataclasses.dataclass
class ExperimentConfig:
    model: ModelSpec
    train: TrainConfig
    dataset: dict | None = None
    synth: SynthSpec | None = None
    runs: int = 1
    output: str | None = None
    grid: dict | None = None


TOP_KEYS = {"dataset", "synth", "model", "train", "runs", "output", "seed", "grid"}


def parse_config(raw, base_dir: Path = Path("."), seed: int | None = None) -> ExperimentConfig:
    """Validate a parsed JSON experiment config before any work is done."""
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a JSON object")
    for key in raw:
        if key not in TOP_KEYS:
            raise ConfigError(key, "unknown field")
    if ("dataset" in raw) == ("synth" in raw):
        raise ConfigError("dataset", "exactly one of 'dataset' or 'synth' must be given")
    if "seed" in raw and not isinstance(raw["seed"], int):
        raise ConfigError("seed", "must be an integer")
    seed = raw.get("seed", seed if seed is not None else 0)

    dataset = None
    synth = None
    if "dataset" in raw:
        ds = raw["dataset"]
        if not isinstance(ds, dict):
            raise ConfigError("dataset", "expected an object")
        for key in ds:
            if key not in ("edges", "labels", "features"):
                raise ConfigError(f"dataset.{key}", "unknown field")
        for key in ("edges", "labels", "features"):
            if key not in ds:
                raise ConfigError(f"dataset.{key}", "required")
            if not isinstance(ds[key], str):
                raise ConfigError(f"dataset.{key}", "must be a path string")
        dataset = {k: str((base_dir / v) if not Path(v).is_absolute() else Path(v)) for k, v in ds.items()}
    else:
        synth_raw = dict(raw["synth"]) if isinstance(raw["synth"], dict) else raw["synth"]
        if isinstance(synth_raw, dict):
            synth_raw.setdefault("seed", seed)
        synth = _build(SynthSpec, "synth", synth_raw)

    model_raw = raw.get("model", {})
    if isinstance(model_raw, dict) and "filter_kind" in model_raw:
        try:
            parse_kind(model_raw["filter_kind"])
        except (ValueError, AttributeError) as exc:
            raise ConfigError("model.filter_kind", str(exc)) from None
    model = _build(ModelSpec, "model", model_raw)
    train_raw = raw.get("train", {})
    if isinstance(train_raw, dict):
        train_raw = {"seed": seed, **train_raw}
    train = _build(TrainConfig, "train", train_raw)

    runs = raw.get("runs", 1)
    if not isinstance(runs, int) or isinstance(runs, bool) or runs < 1:
        raise ConfigError("runs", "must be a positive integer")
    output = raw.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigError("output", "must be a path string")

    grid = raw.get("grid")
    if grid is not None:
        if isinstance(grid, str):
            presets = {"synthetic": SYNTHETIC_GRID, "ablation": ABLATION_GRID}
            if grid not in presets:
                raise ConfigError("grid", "preset must be 'synthetic' or 'ablation'")
            grid = presets[grid]
        elif isinstance(grid, dict):
            allowed = {"lr", "weight_decay", "dropout", "hidden", "layers", "variant", "use_mixing",
                       "temperature", "filter_kind", "max_epochs", "patience"}
            for key, values in grid.items():
                if key not in allowed:
                    raise ConfigError(f"grid.{key}", "not a tunable field")
                if not isinstance(values, list) or not values:
                    raise ConfigError(f"grid.{key}", "must be a non-empty list")
                for i, v in enumerate(values):
                    try:
                        if key in ModelSpec.__dataclass_fields__:
                            ModelSpec.from_dict({**model.to_dict(), key: v})
                        else:
                            TrainConfig.from_dict({**train.to_dict(), key: v})
                    except (TypeError, ValueError) as exc:
                        raise ConfigError(f"grid.{key}[{i}]", str(exc)) from None
        else:
            raise ConfigError("grid", "expected an object or a preset name")
    return ExperimentConfig(model, train, dataset, synth, runs, output, grid)


def load_config(path, seed: int | None = None) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError("", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"{path}: invalid JSON ({exc})") from None
    return parse_config(raw, path.parent, seed)


# ---------------------------------------------------------------------------
# Data loading


def load_features(path, num_nodes: int | None = None) -> np.ndarray:
    try:
        x = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if num_nodes is not None and x.shape[0] != num_nodes:
        raise DataError(f"{path}: {x.shape[0]} feature rows for {num_nodes} nodes")
    if not np.all(np.isfinite(x)):
        raise DataError(f"{path}: non-finite feature values")
    return x


def load_dataset(edges, labels, features=None):
    """Graph, labels and (optionally) features from the plain-text formats."""
    try:
        z = load_labels(labels)
        pairs = load_edge_list(edges)
        g = build_graph(pairs, z.num_nodes)
        x = load_features(features, z.num_nodes) if features is not None else None
    except OSError as exc:
        raise DataError(str(exc)) from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    return g, z, x


def _experiment_data(cfg: ExperimentConfig):
    if cfg.dataset is not None:
        g, z, x = load_dataset(cfg.dataset["edges"], cfg.dataset["labels"], cfg.dataset["features"])
    else:
        g, z, x = generate_dataset(cfg.synth)
    return GraphData.build(g, x, z, cfg.model.filter_kind)


# ---------------------------------------------------------------------------
# Output


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _run_records(runs, timing: bool) -> list:
    records = []
    for r in runs:
        d = r.to_dict()
        if not timing:
            d.pop("time_per_epoch")
        records.append(d)
    return records


# ---------------------------------------------------------------------------
# Commands


def cmd_metrics(args) -> int:
    g, z, x = load_dataset(args.edges, args.labels, args.features)
    try:
        kind = parse_kind(args.filter)
    except ValueError as exc:
        raise ConfigError("--filter", str(exc)) from None
    if args.mask_fraction is not None:
        if not 0.0 < args.mask_fraction <= 1.0:
            raise ConfigError("--mask-fraction", "must lie in (0, 1]")
        rng = np.random.default_rng(args.seed)
        k = max(1, int(round(args.mask_fraction * g.num_nodes)))
        mask = np.zeros(g.num_nodes, dtype=bool)
        mask[rng.choice(g.num_nodes, size=k, replace=False)] = True
        report = estimate_metrics_masked(g, z, x, mask, kind)
    else:
        try:
            report = metric_report(g, z, x, kind)
        except ValueError as exc:
            raise DataError(str(exc)) from None
    _emit(report.to_json() + "\n", args.out)
    return EXIT_OK


def cmd_gen(args) -> int:
    if args.out is None:
        raise ConfigError("--out", "gen needs an output directory")
    try:
        spec = SynthSpec(mode=args.mode, h_edge_target=args.h, num_classes=args.num_classes,
                         nodes_per_class=args.nodes_per_class, intra_edges_per_class=args.intra_edges,
                         d_intra=args.d_intra, seed=args.seed)
    except ValueError as exc:
        raise ConfigError("gen", str(exc)) from None
    try:
        g, z, x = generate_dataset(spec)
    except (ValueError, RuntimeError) as exc:
        raise DataError(f"generation failed: {exc}") from None
    write_dataset(args.out, spec, g, z, x)
    logger.info("wrote %d nodes, %d edges to %s", g.num_nodes, g.num_edges, args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.seed)
    data = _experiment_data(cfg)
    res = run_repeated(cfg.model, data, cfg.train, n_runs=cfg.runs, threads=args.threads)
    logger.info("test accuracy %.4f +- %.4f over %d runs", res.mean, res.std, cfg.runs)
    _emit(_dumps(_run_records(res.runs, args.timing)), args.out or cfg.output)
    return EXIT_OK


def cmd_curve(args) -> int:
    models = [preset_model(m.strip(), args.seed) for m in args.models.split(",") if m.strip()]
    if not models:
        raise ConfigError("--models", "at least one model is required")
    if args.levels:
        try:
            levels = [float(v) for v in args.levels.split(",")]
        except ValueError:
            raise ConfigError("--levels", "expected comma-separated numbers") from None
    else:
        levels = REGULAR_LEVELS if args.mode == "regular" else GENERAL_LEVELS
    try:
        base = SynthSpec(mode=args.mode, h_edge_target=levels[0], num_classes=args.num_classes,
                         nodes_per_class=args.nodes_per_class, intra_edges_per_class=args.intra_edges,
                         d_intra=args.d_intra, seed=args.seed)
        for h in levels:
            SynthSpec(**{**base.to_dict(), "h_edge_target": h})
    except ValueError as exc:
        raise ConfigError("--levels", str(exc)) from None
    if args.graphs < 1:
        raise ConfigError("--graphs", "must be >= 1")
    try:
        rows = run_synthetic_curve(base, levels, models, graphs_per_level=args.graphs,
                                   master_seed=args.seed, threads=args.threads)
    except (ValueError, RuntimeError) as exc:
        if isinstance(exc, DivergenceError):
            raise
        raise DataError(f"curve generation failed: {exc}") from None
    if args.out is None:
        write_curve_csv(sys.stdout, rows)
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_curve_csv(args.out, rows)
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.seed)
    if cfg.grid is None:
        raise ConfigError("grid", "sweep needs a grid (object or preset name)")
    data = _experiment_data(cfg)
    best, entries = sweep(cfg.model, data, cfg.train, cfg.grid, n_runs=cfg.runs, threads=args.threads)
    report = {
        "best": dataclasses.asdict(best),
        "entries": [dataclasses.asdict(e) for e in entries],
        "model": cfg.model.to_dict(),
        "train": cfg.train.to_dict(),
    }
    _emit(_dumps(report), args.out or cfg.output)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _add_synth_flags(p) -> None:
    p.add_argument("--mode", choices=["general", "regular"], default="general")
    p.add_argument("--num-classes", type=int, default=5)
    p.add_argument("--nodes-per-class", type=int, default=400)
    p.add_argument("--intra-edges", type=int, default=800, help="intra-class edges per class (general mode)")
    p.add_argument("--d-intra", type=int, default=10, help="intra-class degree (regular mode)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master random seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker processes (default 1)")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output file or directory (default stdout)")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="acmlab", description=__doc__.split("\n")[0], parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("metrics", parents=[common], help="homophily and similarity metrics of a labeled graph")
    p.add_argument("--edges", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--features")
    p.add_argument("--filter", default="arw_hat", help="filter kind, e.g. arw_hat, asym, hp:arw_hat")
    p.add_argument("--mask-fraction", type=float, help="estimate from a random labeled fraction of nodes")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset directory")
    _add_synth_flags(p)
    p.add_argument("--h", type=float, required=True, help="target edge homophily")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", parents=[common], help="train a model from a JSON experiment config")
    p.add_argument("config")
    p.add_argument("--timing", action="store_true", help="include wall time per epoch in the output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("curve", parents=[common], help="accuracy-vs-homophily curve on synthetic graphs")
    _add_synth_flags(p)
    p.add_argument("--models", default="sgc-1,gcn", help=f"comma-separated; any of {', '.join(PRESETS)}")
    p.add_argument("--levels", help="comma-separated h levels (default: the mode's standard grid)")
    p.add_argument("--graphs", type=int, default=10, help="graphs per level")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("sweep", parents=[common], help="grid search over a JSON experiment config")
    p.add_argument("config")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("seed", 0), ("threads", 1), ("out", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if args.threads < 1:
        print("acmlab: config error: --threads: must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"acmlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"acmlab: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"acmlab: numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
