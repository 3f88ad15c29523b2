"""Config-driven experiment runners.  Each writes CSVs plus ``manifest.json``."""
import csv
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path

import numpy as np

from ..fisher import (
    FISHER_COLUMNS,
    LAYER_COLUMNS,
    ICTracker,
    fisher_profile,
    fisher_subset,
    layer_rows,
    profile_rows,
    write_csv,
)
from ..lif import NetworkConfig, build_network, save_network
from ..pruning import (
    PruningSchedule,
    compute_efficiency,
    iterative_prune,
    tic_select_timestep,
    write_pruning_csv,
)
from ..robustness import deficit_sweep, robust_accuracy, write_deficit_csv, write_robustness_csv
from ..stbp import LossConfig, OptimizerConfig, train
from .config import ExperimentConfig, derive_seed, seed_table
from .datasets import load_idx, synth_blobs

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


def package_version():
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def make_dataset(cfg, seed):
    d = cfg.dataset
    if d.source == "idx":
        if not d.train_images or not d.train_labels:
            raise ValueError("idx dataset needs train_images and train_labels paths")
        return load_idx(d.train_images, d.train_labels, d.test_images, d.test_labels,
                        tuple(d.value_range), d.classes)
    return synth_blobs(d.classes, d.train, d.test, tuple(d.image_shape), d.geometry, d.separation,
                       d.width, d.jitter, d.noise, d.background, d.contrast,
                       seed=derive_seed(seed, "data"))


def _scaled_hidden(hidden, width):
    out = []
    for spec in hidden:
        if isinstance(spec, dict):
            spec = dict(spec)
            key = "channels" if spec.get("kind") == "conv" else "units"
            if key in spec:
                spec[key] = max(1, int(round(spec[key] * width)))
            out.append(spec)
        else:
            out.append(max(1, int(round(spec * width))))
    return out


def make_network(cfg, dataset, seed, hidden=None, timesteps=None):
    n = cfg.network
    config = NetworkConfig(timesteps or n.timesteps, n.tau, n.threshold, n.readout,
                           n.surrogate_scale)
    hidden = _scaled_hidden(n.hidden if hidden is None else hidden, n.width)
    input_shape = dataset.image_shape if any(isinstance(h, dict) for h in hidden) \
        else (dataset.n_features,)
    rng = np.random.default_rng(derive_seed(seed, "init"))
    return build_network(input_shape, dataset.classes, hidden, config, rng, n.init_gain)


def optimizer_config(cfg):
    o = cfg.optimizer
    return OptimizerConfig(o.lr, o.weight_decay, o.batch_size, o.momentum, o.clip_norm)


def loss_config(cfg, alpha=None):
    if alpha is not None:
        return LossConfig("alpha-target", alpha)
    return LossConfig(cfg.loss.mode, cfg.loss.alpha)


def fisher_split(cfg, dataset):
    X = dataset.X_test if cfg.fisher.split == "test" else dataset.X_train
    return fisher_subset(X, cfg.fisher.subset)


def train_model(cfg, seed, dataset=None, alpha=None, callbacks=(), hidden=None, timesteps=None,
                epochs=None):
    dataset = dataset if dataset is not None else make_dataset(cfg, seed)
    net = make_network(cfg, dataset, seed, hidden, timesteps)
    net, report = train(net, dataset, epochs or cfg.optimizer.epochs, optimizer_config(cfg),
                        loss_config(cfg, alpha), seed=derive_seed(seed, "shuffle"),
                        callbacks=callbacks)
    return dataset, net, report


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class Run:
    """Output directory plus manifest bookkeeping for one experiment."""

    kind: str
    cfg: ExperimentConfig
    out: Path = None
    outputs: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    started: float = field(default_factory=time.perf_counter)

    def __post_init__(self):
        if self.out is not None:
            self.out = Path(self.out)
            self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name):
        if self.out is None:
            return None
        self.outputs.append(name)
        return self.out / name

    def finish(self):
        if self.out is None:
            return None
        manifest = {
            "schema": SCHEMA_VERSION,
            "experiment": self.kind,
            "config": self.cfg.model_dump(mode="json"),
            "config_hash": self.cfg.digest(),
            "seeds": {str(s): seed_table(s) for s in self.cfg.seeds},
            "versions": {"package": package_version(), "python": platform.python_version(),
                         "numpy": np.__version__},
            "outputs": sorted(set(self.outputs)),
            "summary": self.summary,
            "wall_time_seconds": time.perf_counter() - self.started,
        }
        path = self.out / "manifest.json"
        with open(path, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True, default=_jsonable)
        return path


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"{type(obj).__name__} is not JSON serializable")


def _write_rows(path, columns, rows):
    if path is None:
        return
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def run_train(cfg, out=None):
    """Train one model per seed; writes the epoch CSV and a checkpoint per seed."""
    run = Run("train", cfg, out)
    results = {}
    for seed in cfg.seeds:
        _, net, report = train_model(cfg, seed)
        results[seed] = (net, report)
        if run.out is not None:
            report.to_csv(run.path(f"train_seed{seed}.csv"))
            save_network(net, run.path(f"checkpoint_seed{seed}.json"))
        run.summary[str(seed)] = {"test_accuracy": report.test_accuracies[-1],
                                  "train_loss": report.train_losses[-1]}
    run.finish()
    return results


def _tracked_training(cfg, seed, dataset=None, alpha=None, every=None, **kwargs):
    dataset = dataset if dataset is not None else make_dataset(cfg, seed)
    f = cfg.fisher
    tracker = ICTracker(fisher_split(cfg, dataset), every or f.every, f.estimator, f.draws,
                        derive_seed(seed, "fisher"), f.layers)
    dataset, net, report = train_model(cfg, seed, dataset, alpha, [tracker], **kwargs)
    return dataset, net, report, tracker


def _tracker_rows(tracker, seed):
    for point, profile in zip(tracker.series, tracker.profiles):
        yield from profile_rows(profile, point.epoch, seed)


def run_fisher(cfg, out=None):
    """Track the Fisher profile and centroid every ``fisher.every`` epochs."""
    run = Run("fisher", cfg, out)
    results = {}
    for seed in cfg.seeds:
        _, net, report, tracker = _tracked_training(cfg, seed)
        results[seed] = tracker
        if run.out is not None:
            write_csv(run.path(f"fisher_seed{seed}.csv"), FISHER_COLUMNS,
                      _tracker_rows(tracker, seed))
        if cfg.fisher.layers and run.out is not None:
            rows = (r for p in tracker.series for r in layer_rows(p.layers, p.epoch))
            write_csv(run.path(f"fisher_layers_seed{seed}.csv"), LAYER_COLUMNS, rows)
        run.summary[str(seed)] = {"ic": {str(p.epoch): p.centroid for p in tracker.series},
                                  "test_accuracy": report.test_accuracies[-1]}
    run.finish()
    return results


ABLATION_AXES = {
    "timestep": ("network", "timesteps"),
    "time_constant": ("network", "tau"),
    "weight_decay": ("optimizer", "weight_decay"),
    "learning_rate": ("optimizer", "lr"),
    "dataset": ("dataset", None),
    "architecture": ("network", "hidden"),
}

GRID_COLUMNS = ["axis", "value", "seed"] + FISHER_COLUMNS[:4]


def cell_config(cfg, axis, value):
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    section, key = ABLATION_AXES[axis]
    data = cfg.model_dump(mode="json")
    if key is None:
        if not isinstance(value, dict):
            raise ValueError("dataset ablation values must be dataset config dicts")
        data[section].update(value)
    else:
        data[section][key] = value
    return ExperimentConfig.model_validate(data)


@dataclass
class Cell:
    value: object
    series: dict = field(default_factory=dict)  # seed -> ICTracker
    error: str = None


def run_ablation_grid(cfg, axis=None, values=None, out=None):
    """One tracked training run per axis value and seed.

    A failing cell is logged, recorded with its error and skipped.
    """
    axis = axis or cfg.ablation.axis
    values = cfg.ablation.values if values is None else values
    if not values:
        raise ValueError("ablation needs at least one value")
    run = Run("ablate", cfg, out)
    cells, grid = [], []
    for i, value in enumerate(values):
        cell = Cell(value)
        cells.append(cell)
        try:
            ccfg = cell_config(cfg, axis, value)
            for seed in ccfg.seeds:
                _, _, _, tracker = _tracked_training(ccfg, seed)
                cell.series[seed] = tracker
        except Exception as exc:  # a broken cell must not sink the grid
            logger.warning("ablation cell %s=%r failed: %s", axis, value, exc)
            cell.error = f"{type(exc).__name__}: {exc}"
            continue
        label = json.dumps(value, sort_keys=True)
        rows = []
        for seed, tracker in cell.series.items():
            for r in _tracker_rows(tracker, seed):
                rows.append([axis, label, seed, r["epoch"], r["t"], r["I_t"], r["IC"]])
        grid.extend(rows)
        _write_rows(run.path(f"ablate_{axis}_cell{i}.csv"), GRID_COLUMNS, rows)
    _write_rows(run.path(f"ablate_{axis}_grid.csv"), GRID_COLUMNS, grid)
    run.summary = {"axis": axis, "cells": [
        {"value": c.value, "error": c.error,
         "initial_ic": {str(s): t.series[0].centroid for s, t in c.series.items()}}
        for c in cells]}
    run.finish()
    return cells


@dataclass
class RobustModel:
    alpha: float
    seed: int
    mean_fisher: float
    accuracy: float
    rows: list
    net: object = None


def run_robust(cfg, out=None):
    """Train one alpha-target model per (alpha, seed) and measure every corruption."""
    run = Run("robust", cfg, out)
    models, rows = [], []
    r = cfg.robustness
    clamp = tuple(cfg.dataset.value_range)
    for seed in cfg.seeds:
        dataset = make_dataset(cfg, seed)
        for alpha in r.alphas:
            _, net, report = train_model(cfg, seed, dataset, alpha)
            profile = fisher_profile(net, fisher_split(cfg, dataset), cfg.fisher.estimator,
                                     cfg.fisher.draws, derive_seed(seed, "fisher"))
            method = f"alpha={alpha!r}/seed={seed}"
            clean = report.test_accuracies[-1]
            seed_rows = [robust_accuracy(net, dataset.X_test, dataset.y_test, spec, method,
                                         cfg.name, dataset.image_shape,
                                         derive_seed(seed, "attack"), clamp, clean)
                         for spec in r.corruptions]
            rows.extend(seed_rows)
            models.append(RobustModel(alpha, seed, float(profile.traces.mean()), clean, seed_rows, net))
    if run.out is not None:
        write_robustness_csv(run.path("robustness.csv"), rows)
    run.summary = {"models": [{"alpha": m.alpha, "seed": m.seed, "mean_fisher": m.mean_fisher,
                               "accuracy": m.accuracy} for m in models]}
    run.finish()
    return models


def run_deficit(cfg, out=None):
    """Sliding Gaussian deficit windows on a standard-trained model per seed."""
    run = Run("deficit", cfg, out)
    r = cfg.robustness
    clamp = tuple(cfg.dataset.value_range) if r.clamp else None
    results = {}
    for seed in cfg.seeds:
        dataset, net, report = train_model(cfg, seed)
        sweep = deficit_sweep(net, dataset.X_test, dataset.y_test, r.deficit_length,
                              r.deficit_ratio, derive_seed(seed, "attack"), clamp)
        results[seed] = (report.test_accuracies[-1], sweep, net)
        if run.out is not None:
            write_deficit_csv(run.path(f"deficit_seed{seed}.csv"), sweep)
        run.summary[str(seed)] = {"clean": report.test_accuracies[-1],
                                  "window_accuracy": [d.accuracy for d in sweep]}
    run.finish()
    return results


def _retrain_steps(option, T, tic):
    if option == "full":
        return T
    if option == "tic":
        return tic
    return int(option)


def run_prune(cfg, out=None):
    """Iterative magnitude pruning for every configured retraining length."""
    run = Run("prune", cfg, out)
    p, T, epochs = cfg.pruning, cfg.network.timesteps, cfg.optimizer.epochs
    results = {}
    for seed in cfg.seeds:
        dataset, net, _ = train_model(cfg, seed)
        # profiling cost is kept out of the efficiency figure and reported on its own
        started = time.perf_counter()
        profile = fisher_profile(net, fisher_split(cfg, dataset), cfg.fisher.estimator,
                                 cfg.fisher.draws, derive_seed(seed, "fisher"))
        profiling_seconds = time.perf_counter() - started
        tic = tic_select_timestep(profile, p.kappa)
        per_seed = {"tic_timestep": tic, "profile": profile}
        run.summary[str(seed)] = {"tic_timestep": tic, "fisher_traces": profile.traces,
                                  "profiling_wall_seconds": profiling_seconds}
        for option in p.retrain_timesteps:
            Tr = _retrain_steps(option, T, tic)
            schedule = PruningSchedule(p.fraction, p.cycles, p.retrain_epochs, epochs, T, Tr)
            res = iterative_prune(net, dataset, schedule, optimizer_config(cfg), loss_config(cfg),
                                  seed=derive_seed(seed, "shuffle"))
            per_seed[str(option)] = res
            efficiency = compute_efficiency(epochs, p.retrain_epochs, p.cycles, T, Tr) \
                if p.retrain_epochs else 0.0
            if run.out is not None:
                write_pruning_csv(run.path(f"pruning_seed{seed}_{option}.csv"), res.records)
            run.summary[str(seed)][str(option)] = {
                "T_retrain": Tr, "efficiency_percent": efficiency,
                "baseline_accuracy": res.baseline_accuracy, "final_accuracy": res.accuracies[-1]}
        results[seed] = per_seed
    run.finish()
    return results


def count_parameters(cfg, dataset, hidden):
    return make_network(cfg, dataset, 0, hidden).params.size


def saturation_timestep(timesteps, accuracies, tolerance=0.01):
    """First timestep whose accuracy is within ``tolerance`` of the best."""
    best = max(accuracies)
    return next(t for t, a in zip(timesteps, accuracies) if a >= best - tolerance)


CAPACITY_COLUMNS = ["net", "parameters", "seed", "T", "accuracy"]


def run_capacity(cfg, out=None):
    """Train a small and a large net at each timestep count."""
    c = cfg.capacity
    if not c.timesteps:
        raise ValueError("capacity study needs at least one timestep value")
    if any(t < 1 for t in c.timesteps):
        raise ValueError("timestep values must be >= 1")
    ts = sorted(c.timesteps)
    run = Run("capacity", cfg, out)
    rows, table = [], {}
    for seed in cfg.seeds:
        dataset = make_dataset(cfg, seed)
        sizes = {name: count_parameters(cfg, dataset, h)
                 for name, h in (("small", c.small), ("large", c.large))}
        if sizes["small"] > sizes["large"]:
            raise ValueError("the small spec has more parameters than the large one")
        for name, hidden in (("small", c.small), ("large", c.large)):
            accs = []
            for T in ts:
                _, _, report = train_model(cfg, seed, dataset, hidden=hidden, timesteps=T)
                accs.append(report.test_accuracies[-1])
                rows.append([name, sizes[name], seed, T, accs[-1]])
            table[(name, seed)] = {"accuracy": dict(zip(ts, accs)),
                                   "saturation": saturation_timestep(ts, accs)}
    _write_rows(run.path("capacity.csv"), CAPACITY_COLUMNS, rows)
    run.summary = {f"{name}/seed={seed}": v for (name, seed), v in table.items()}
    run.finish()
    return table
