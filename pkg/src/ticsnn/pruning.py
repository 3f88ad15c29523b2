"""Iterative magnitude pruning, TIC-based retraining length and cost accounting."""
import csv
from dataclasses import dataclass, field

import numpy as np

from .lif import accuracy
from .stbp import train


class PruningError(RuntimeError):
    pass


@dataclass
class PruningSchedule:
    fraction: float = 0.5
    cycles: int = 5
    retrain_epochs: int = 10
    epochs: int = 60
    timesteps: int = 8
    retrain_timesteps: int = None

    def __post_init__(self):
        if not 0 < self.fraction < 1:
            raise ValueError("prune fraction must lie in (0, 1)")
        if int(self.cycles) < 1 or int(self.retrain_epochs) < 0 or int(self.epochs) < 0:
            raise ValueError("cycles must be >= 1 and epoch counts >= 0")
        if self.retrain_timesteps is None:
            self.retrain_timesteps = self.timesteps
        if not 1 <= self.retrain_timesteps <= self.timesteps:
            raise ValueError("retrain_timesteps must lie in [1, timesteps]")


def full_mask(net):
    return {name: np.ones_like(net.params[name]) for name in net.weight_names()}


def sparsity(mask):
    total = sum(m.size for m in mask.values())
    kept = sum(float(m.sum()) for m in mask.values())
    return 1.0 - kept / total


def magnitude_prune(net, fraction, mask=None):
    """Mask out the ``fraction`` of surviving weights with the smallest magnitude.

    Ranking is global over all layers' weights (biases are never pruned);
    ties go to the lower layer index, then the lower flat index.
    """
    if not 0 < fraction < 1:
        raise ValueError("prune fraction must lie in (0, 1)")
    mask = full_mask(net) if mask is None else mask
    names = net.weight_names()
    mags, keep = [], []
    for name in names:
        mags.append(np.abs(net.params[name]).ravel())
        keep.append(mask[name].ravel() > 0)
    mags, keep = np.concatenate(mags), np.concatenate(keep)
    alive = np.flatnonzero(keep)
    if alive.size == 0:
        raise PruningError("every weight is already pruned")
    n_prune = int(np.floor(fraction * alive.size))
    if n_prune == 0:
        raise PruningError(f"fraction {fraction} of {alive.size} surviving weights prunes nothing")
    order = alive[np.argsort(mags[alive], kind="stable")]
    keep = keep.copy()
    keep[order[:n_prune]] = False

    out, offset = {}, 0
    for name in names:
        size = net.params[name].size
        out[name] = keep[offset:offset + size].reshape(net.params[name].shape).astype(np.float64)
        offset += size
    return out


def apply_mask(net, mask):
    net = net.copy()
    for name, keep in mask.items():
        net.params[name] = net.params[name] * keep
    return net


def tic_select_timestep(profile, kappa=0.05):
    """Last timestep whose Fisher trace is at least ``kappa`` times the peak."""
    if not 0 < kappa < 1:
        raise ValueError("kappa must lie in (0, 1)")
    traces = np.asarray(getattr(profile, "traces", profile), dtype=float)
    if traces.size == 0 or np.any(traces < 0) or not traces.max() > 0:
        raise ValueError("Fisher profile is degenerate")
    return int(np.flatnonzero(traces >= kappa * traces.max())[-1]) + 1


def compute_efficiency(epochs, retrain_epochs, cycles, timesteps, retrain_timesteps):
    """Percentage of baseline compute saved by retraining at fewer timesteps."""
    N, Nr, R, T, Tr = epochs, retrain_epochs, cycles, timesteps, retrain_timesteps
    if min(N, Nr, R, T, Tr) <= 0:
        raise ValueError("all arguments must be positive")
    if Tr > T:
        raise ValueError(f"retrain timesteps {Tr} exceed timesteps {T}")
    return 100.0 * Nr * R * (T - Tr) / (N * T + Nr * R * T)


@dataclass
class CycleRecord:
    cycle: int
    sparsity: float
    retrain_timesteps: int
    accuracy: float
    epochs_spent: int


@dataclass
class PruningResult:
    baseline_accuracy: float
    records: list = field(default_factory=list)
    masks: list = field(default_factory=list)
    net: object = None

    @property
    def sparsities(self):
        return [r.sparsity for r in self.records]

    @property
    def accuracies(self):
        return [r.accuracy for r in self.records]


def iterative_prune(net, dataset, schedule, optimizer=None, loss=None, seed=0, check=True):
    """Prune-retrain cycles on an already trained ``net``.

    Each cycle prunes ``schedule.fraction`` of the surviving weights,
    retrains for ``schedule.retrain_epochs`` epochs simulating
    ``schedule.retrain_timesteps`` steps with the mask enforced, then
    measures test accuracy at the full ``schedule.timesteps``.
    """
    T, Tr = schedule.timesteps, schedule.retrain_timesteps
    net = net.with_config(timesteps=T)
    baseline = accuracy(net, dataset.X_test, dataset.y_test)
    result = PruningResult(baseline)
    mask = full_mask(net)
    spent = schedule.epochs
    for cycle in range(1, int(schedule.cycles) + 1):
        new_mask = magnitude_prune(net, schedule.fraction, mask)
        if check:
            for name in mask:
                if np.any(new_mask[name] > mask[name]):
                    raise PruningError(f"mask for {name} revived a pruned weight")
        mask = new_mask
        net = apply_mask(net, mask)
        if schedule.retrain_epochs:
            net, _ = train(net, dataset, schedule.retrain_epochs, optimizer, loss,
                           seed=seed * 1000 + cycle, timesteps=Tr, mask=mask, eval_timesteps=T)
            spent += schedule.retrain_epochs
        if check:
            for name, keep in mask.items():
                if np.any(net.params[name][keep == 0] != 0):
                    raise PruningError(f"pruned weights of {name} changed during retraining")
        acc = accuracy(net, dataset.X_test, dataset.y_test, T)
        result.records.append(CycleRecord(cycle, sparsity(mask), Tr, acc, spent))
        result.masks.append({k: v.copy() for k, v in mask.items()})
    result.net = net
    return result


PRUNING_COLUMNS = ["cycle", "sparsity", "T_retrain", "accuracy", "epochs_spent"]


def write_pruning_csv(path, records, extra=None):
    columns = PRUNING_COLUMNS + list(extra or {})
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(columns)
        for r in records:
            writer.writerow([r.cycle, repr(r.sparsity), r.retrain_timesteps, repr(r.accuracy),
                             r.epochs_spent] + list((extra or {}).values()))
