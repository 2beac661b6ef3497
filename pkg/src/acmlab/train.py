"""Full-batch training with Adam and early stopping, repeated runs, and the
synthetic homophily-curve experiment."""

from __future__ import annotations

import csv
import itertools
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .metrics import edge_homophily, class_homophily, node_homophily, aggregation_homophily
from .models import GraphData, ModelSpec, forward, init_params
from .synth import SplitMasks, SynthSpec, generate_dataset, random_split

logger = logging.getLogger(__name__)

CURVE_HEADER = ("h_edge", "h_node", "h_class", "h_agg_mod", "model", "acc_mean", "acc_std")


class DivergenceError(ad.NumericalError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    lr: float = 0.05
    weight_decay: float = 5e-5
    max_epochs: int = 1000
    patience: int = 100
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    split: tuple = (0.6, 0.2, 0.2)

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.split = tuple(self.split)
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.patience < 0:
            raise ValueError("patience must be non-negative")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError("betas must be two numbers in [0, 1)")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise ValueError("split must be three non-negative fractions summing to 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"], d["split"] = list(self.betas), list(self.split)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class RunResult:
    model: str
    test_accuracy: float
    val_accuracy: float
    best_epoch: int
    epochs: int
    val_curve: list
    seed: int = 0
    run_index: int = 0
    metrics: dict = field(default_factory=dict)
    time_per_epoch: float = field(default=0.0, compare=False)
    params: dict | None = field(default=None, repr=False, compare=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("params")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunResult":
        return cls(**d)


@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params: dict) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict, grads: dict, state: AdamState, config: TrainConfig) -> dict:
    """One Adam update with bias correction; weight decay enters as an L2 term
    on the gradient. ``state`` is updated in place; new parameters are returned."""
    b1, b2 = config.betas
    state.t += 1
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient for {k}")
        if config.weight_decay:
            g = g + config.weight_decay * p
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = state.m[k] / (1 - b1 ** state.t)
        v_hat = state.v[k] / (1 - b2 ** state.t)
        out[k] = p - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return out


def accuracy(logits: np.ndarray, classes: np.ndarray, idx: np.ndarray) -> float:
    if len(idx) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits[idx], axis=1) == classes[idx]))


def _loss_value(logits: np.ndarray, classes: np.ndarray, idx: np.ndarray) -> float:
    if len(idx) == 0:
        return float("nan")
    return float(-ad.log_softmax(logits[idx])[np.arange(len(idx)), classes[idx]].mean())


def _eval(spec: ModelSpec, data: GraphData, params: dict):
    tape = ad.Tape()
    logits, alphas = forward(spec, data, {k: tape.const(v) for k, v in params.items()}, training=False)
    return logits.value, alphas


def run_rng(master_seed: int, run_index: int) -> np.random.Generator:
    """Independent stream per run, derived from ``(master_seed, run_index)``."""
    return np.random.default_rng(np.random.SeedSequence(master_seed, spawn_key=(run_index,)))


def train_one(spec: ModelSpec, data: GraphData, config: TrainConfig, split: SplitMasks | None = None,
              rng: np.random.Generator | None = None, run_index: int = 0, keep_params: bool = False) -> RunResult:
    """Train one model from scratch and report test accuracy at the best
    validation epoch.

    An epoch improves on the best so far when validation accuracy rises, or
    stays equal while validation loss falls. Training stops after
    ``config.patience`` epochs without improvement.
    """
    if rng is None:
        rng = run_rng(config.seed, run_index)
    n = data.num_nodes
    if split is None:
        split = random_split(n, config.split, rng)
    if len(split.train) == 0:
        raise ValueError("empty training split")
    classes = data.labels.classes
    params = init_params(spec, data.x.shape[1], data.labels.num_classes, rng, num_nodes=n)
    state = AdamState.zeros(params)

    best = (-1.0, math.inf)
    best_params, best_epoch = params, 0
    val_curve = []
    since_best = 0
    start = time.perf_counter()
    epoch = 0
    for epoch in range(1, config.max_epochs + 1):
        tape = ad.Tape()
        tensors = {k: tape.param(v, name=k) for k, v in params.items()}
        try:
            logits, _ = forward(spec, data, tensors, rng=rng, training=True)
            loss = ad.cross_entropy(logits, classes, split.train)
            tape.backward(loss)
        except ad.NumericalError as exc:
            raise DivergenceError(f"epoch {epoch}: {exc}") from exc
        params = adam_step(params, {k: t.grad for k, t in tensors.items()}, state, config)

        try:
            out, _ = _eval(spec, data, params)
        except ad.NumericalError as exc:
            raise DivergenceError(f"epoch {epoch}: {exc}") from exc
        val_acc = accuracy(out, classes, split.val)
        val_loss = _loss_value(out, classes, split.val)
        if not math.isfinite(val_loss) and len(split.val):
            raise DivergenceError(f"epoch {epoch}: non-finite validation loss")
        val_curve.append(val_acc)
        if val_acc > best[0] or (val_acc == best[0] and val_loss < best[1]):
            best, best_params, best_epoch, since_best = (val_acc, val_loss), params, epoch, 0
        else:
            since_best += 1
            if since_best >= config.patience:
                break
    elapsed = time.perf_counter() - start

    out, alphas = _eval(spec, data, best_params)
    metrics = {
        "train_accuracy": accuracy(out, classes, split.train),
        "train_loss": _loss_value(out, classes, split.train),
        "val_loss": best[1],
        "test_loss": _loss_value(out, classes, split.test),
    }
    if alphas:
        metrics["alpha_sum_max_error"] = float(max(np.max(np.abs(a.sum(axis=1) - 1.0)) for a in alphas))
        metrics["alpha_mean"] = [a.mean(axis=0).tolist() for a in alphas]
    return RunResult(
        model=spec.family,
        test_accuracy=accuracy(out, classes, split.test),
        val_accuracy=best[0],
        best_epoch=best_epoch,
        epochs=epoch,
        val_curve=val_curve,
        seed=config.seed,
        run_index=run_index,
        metrics=metrics,
        time_per_epoch=elapsed / max(epoch, 1),
        params=best_params if keep_params else None,
    )


@dataclass
class RepeatedResult:
    mean: float
    std: float
    runs: list

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "runs": [r.to_dict() for r in self.runs]}


def summarize(accs) -> tuple[float, float]:
    """Mean and population standard deviation."""
    a = np.asarray(accs, dtype=np.float64)
    return float(a.mean()), float(a.std())


def _run_job(args):
    spec, data, config, split, run_index = args
    return train_one(spec, data, config, split=split, rng=run_rng(config.seed, run_index), run_index=run_index)


def map_jobs(fn, jobs: list, threads: int = 1) -> list:
    """Apply ``fn`` to every job, optionally in worker processes; order kept."""
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, jobs))


def run_repeated(spec: ModelSpec, data: GraphData, config: TrainConfig, n_runs: int = 10,
                 split: SplitMasks | None = None, threads: int = 1) -> RepeatedResult:
    """``n_runs`` independent runs, each with its own split (unless ``split`` is
    fixed) and initialization."""
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    jobs = [(spec, data, config, split, i) for i in range(n_runs)]
    runs = sorted(map_jobs(_run_job, jobs, threads), key=lambda r: r.run_index)
    mean, std = summarize([r.test_accuracy for r in runs])
    return RepeatedResult(mean, std, runs)


# ---------------------------------------------------------------------------
# Synthetic curves


@dataclass
class CurveModel:
    name: str
    spec: ModelSpec
    config: TrainConfig


@dataclass
class CurveRow:
    h_target: float
    h_edge: float
    h_node: float
    h_class: float
    h_agg_mod: float
    model: str
    acc_mean: float
    acc_std: float
    accuracies: list = field(default_factory=list)

    def csv_fields(self) -> list:
        return [f"{self.h_edge:.6f}", f"{self.h_node:.6f}", f"{self.h_class:.6f}", f"{self.h_agg_mod:.6f}",
                self.model, f"{self.acc_mean:.6f}", f"{self.acc_std:.6f}"]


def graph_seed(master_seed: int, level: int, index: int) -> int:
    return int(np.random.SeedSequence([master_seed, level, index]).generate_state(1)[0])


def _curve_job(args):
    base, h, level, index, models, master_seed = args
    spec = SynthSpec(**{**base.to_dict(), "h_edge_target": h, "seed": graph_seed(master_seed, level, index)})
    g, z, x = generate_dataset(spec)
    metrics = {
        "h_edge": edge_homophily(g, z),
        "h_node": node_homophily(g, z, skip_isolated=True)[0],
        "h_class": class_homophily(g, z),
        "h_agg_mod": aggregation_homophily(g, z)[1],
    }
    rng_split = run_rng(spec.seed, 0)
    split = random_split(g.num_nodes, models[0].config.split if models else (0.6, 0.2, 0.2), rng_split)
    accs = {}
    for m in models:
        data = GraphData.build(g, x, z, m.spec.filter_kind)
        r = train_one(m.spec, data, m.config, split=split, rng=run_rng(spec.seed, 1))
        accs[m.name] = r.test_accuracy
    return level, index, metrics, accs


def run_synthetic_curve(base: SynthSpec, h_levels, models: list, graphs_per_level: int = 10,
                        master_seed: int = 0, threads: int = 1) -> list:
    """Generate ``graphs_per_level`` graphs per homophily level, train every
    model once per graph on a shared random split, and aggregate.

    Returns one :class:`CurveRow` per (level, model); metric columns are means
    over the level's graphs.
    """
    h_levels = list(h_levels)
    if not h_levels or not models:
        raise ValueError("curve needs at least one h level and one model")
    if graphs_per_level < 1:
        raise ValueError("graphs_per_level must be >= 1")
    jobs = [(base, h, li, gi, models, master_seed)
            for li, h in enumerate(h_levels) for gi in range(graphs_per_level)]
    results = map_jobs(_curve_job, jobs, threads)
    rows = []
    for li, h in enumerate(h_levels):
        level = [r for r in results if r[0] == li]
        mean_metrics = {k: float(np.mean([r[2][k] for r in level])) for k in level[0][2]}
        for m in models:
            accs = [r[3][m.name] for r in sorted(level, key=lambda r: r[1])]
            mean, std = summarize(accs)
            rows.append(CurveRow(h, **mean_metrics, model=m.name, acc_mean=mean, acc_std=std, accuracies=accs))
    return rows


def reorder_by(rows: list, metric: str) -> list:
    """Rows sorted ascending by a metric column (stable)."""
    return sorted(rows, key=lambda r: getattr(r, metric))


def write_curve_csv(dest, rows: list) -> None:
    """Write the curve table to a path or an open text stream."""
    if hasattr(dest, "write"):
        w = csv.writer(dest, lineterminator="\n")
        w.writerow(CURVE_HEADER)
        for r in rows:
            w.writerow(r.csv_fields())
        return
    with open(dest, "w", newline="") as fh:
        write_curve_csv(fh, rows)


def read_curve_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# Hyperparameter sweeps

SYNTHETIC_GRID = {
    "lr": [0.05],
    "weight_decay": [5e-5, 1e-4, 5e-4, 1e-3, 5e-3],
    "dropout": [0.1, 0.3, 0.5, 0.7, 0.9],
    "hidden": [64],
}
ABLATION_GRID = {
    "lr": [0.01, 0.05, 0.1],
    "weight_decay": [0, 5e-6, 1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2],
    "dropout": [0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
    "hidden": [64],
}
SPEC_KEYS = ("dropout", "hidden", "layers", "variant", "channels", "use_mixing", "temperature", "filter_kind")
CONFIG_KEYS = ("lr", "weight_decay", "max_epochs", "patience", "seed")


def expand_grid(grid: dict) -> list[dict]:
    """Cartesian product of ``{name: [values]}`` in sorted key order."""
    keys = sorted(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise ValueError(f"grid.{k} must be a non-empty list")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def apply_point(spec: ModelSpec, config: TrainConfig, point: dict) -> tuple[ModelSpec, TrainConfig]:
    unknown = set(point) - set(SPEC_KEYS) - set(CONFIG_KEYS)
    if unknown:
        raise ValueError(f"unknown grid keys {sorted(unknown)}")
    s = {k: v for k, v in point.items() if k in SPEC_KEYS}
    c = {k: v for k, v in point.items() if k in CONFIG_KEYS}
    if spec.family in ("sgc", "acm_sgc") or (spec.family == "mlp" and spec.layers == 1):
        s.pop("hidden", None)
    if spec.family in ("sgc",) or (spec.family == "mlp" and spec.layers == 1):
        s.pop("dropout", None)
    return (ModelSpec.from_dict({**spec.to_dict(), **s}), TrainConfig.from_dict({**config.to_dict(), **c}))


@dataclass
class SweepEntry:
    point: dict
    val_mean: float
    test_mean: float
    test_std: float


def sweep(spec: ModelSpec, data: GraphData, config: TrainConfig, grid: dict, n_runs: int = 1,
          threads: int = 1) -> tuple[SweepEntry, list]:
    """Evaluate every grid point with ``n_runs`` runs and pick the highest
    mean validation accuracy (first point wins ties)."""
    points = expand_grid(grid)
    jobs = []
    for pi, point in enumerate(points):
        s, c = apply_point(spec, config, point)
        jobs.extend((s, data, c, None, i) for i in range(n_runs))
    runs = map_jobs(_run_job, jobs, threads)
    entries = []
    for pi, point in enumerate(points):
        chunk = runs[pi * n_runs:(pi + 1) * n_runs]
        tm, ts = summarize([r.test_accuracy for r in chunk])
        entries.append(SweepEntry(point, float(np.mean([r.val_accuracy for r in chunk])), tm, ts))
    best = max(entries, key=lambda e: e.val_mean)
    return best, entries
