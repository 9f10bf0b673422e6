"""Confidence-based early exiting and budgeted batch evaluation.

A sample leaves at the first exit whose top softmax probability reaches that
exit's threshold; the last exit always accepts. Thresholds for a given
average cost are calibrated on a validation split by assuming a fixed
fraction ``q`` of the samples still in flight exits at each classifier.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import InfeasibleBudgetError
from .network import MultiExitModel, block_forward, count_macs, exit_logits, forward_all, iter_exits


def confidence(logits) -> np.ndarray:
    """Highest softmax probability of each row."""
    z = np.asarray(logits.data if isinstance(logits, ad.Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e.max(axis=1) / e.sum(axis=1)


@dataclass
class ThresholdSchedule:
    """Per-exit confidence thresholds; the last one is always 0.

    ``inf`` marks an exit nobody leaves from.
    """

    thresholds: list[float]
    q: float = float("nan")
    budget: float = float("nan")

    def __post_init__(self):
        self.thresholds = [float(t) for t in self.thresholds]
        if len(self.thresholds) < 1 or self.thresholds[-1] != 0.0:
            raise ValueError("the last exit threshold must be 0")


@dataclass
class AdaptivePrediction:
    labels: np.ndarray
    exits: np.ndarray  # 1-based
    costs: np.ndarray


def predict_adaptive(model: MultiExitModel, x, sched: ThresholdSchedule) -> AdaptivePrediction:
    """Early-exit prediction for a batch.

    Blocks are evaluated one at a time and only on samples that have not yet
    exited. A sample exits at ``i`` when ``confidence >= thresholds[i-1]``.
    """
    k = model.k
    if len(sched.thresholds) != k:
        raise ValueError(f"schedule has {len(sched.thresholds)} thresholds for {k} exits")
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    costs = count_macs(model.cfg)
    labels = np.zeros(n, dtype=np.int64)
    exits = np.zeros(n, dtype=np.int64)
    alive = np.arange(n)
    h, prev = ad.Tensor(x), None
    with ad.no_grad():
        for i in range(1, k + 1):
            if alive.size == 0:
                break
            h = block_forward(model, i, h)
            prev = exit_logits(model, i, h, prev, model.cfg.isc_enabled)
            logits = prev.data
            done = confidence(logits) >= sched.thresholds[i - 1]
            labels[alive[done]] = logits.argmax(axis=1)[done]
            exits[alive[done]] = i
            keep = ~done
            alive = alive[keep]
            h, prev = ad.Tensor(h.data[keep]), ad.Tensor(logits[keep])
    return AdaptivePrediction(labels, exits, np.asarray(costs)[exits - 1])


def oracle_predict(model: MultiExitModel, x, sched: ThresholdSchedule) -> AdaptivePrediction:
    """Reference early exit: run every exit, then scan in order."""
    out = forward_all(model, x, "infer")
    costs = np.asarray(count_macs(model.cfg))
    n = np.asarray(x).shape[0]
    labels = np.empty(n, dtype=np.int64)
    exits = np.empty(n, dtype=np.int64)
    confs = [confidence(lg) for lg in out.logits]
    for s in range(n):
        for i in range(model.k):
            if confs[i][s] >= sched.thresholds[i] or i == model.k - 1:
                labels[s] = int(np.argmax(out.logits[i].data[s]))
                exits[s] = i + 1
                break
    return AdaptivePrediction(labels, exits, costs[exits - 1])


def expected_cost(q: float, cost_prefix) -> float:
    """Modelled mean cost when a fraction ``q`` of remaining samples exits at each stage.

    Exit ``i < k`` receives ``q (1-q)^(i-1)``; exit ``k`` takes the rest.
    """
    c = np.asarray(cost_prefix, dtype=np.float64)
    survive = (1.0 - q) ** np.arange(len(c))
    return float(c[0] + np.sum(np.diff(c) * survive[1:]))


def solve_exit_fraction(budget: float, cost_prefix, iters: int = 200) -> float:
    """Smallest ``q`` in [0, 1] whose modelled cost does not exceed ``budget``."""
    c = list(cost_prefix)
    if budget < c[0]:
        raise InfeasibleBudgetError(f"budget {budget} is below the cheapest exit cost {c[0]}")
    if budget >= c[-1]:
        return 0.0
    lo, hi = 0.0, 1.0
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        if expected_cost(mid, c) <= budget:
            hi = mid
        else:
            lo = mid
    return hi


def thresholds_for_fraction(confidences: list[np.ndarray], q: float) -> list[float]:
    """Sequential quantile thresholds from per-exit validation confidences.

    At exit ``i`` the ``ceil(q * m)`` most confident of the ``m`` samples still
    in flight leave; the threshold is the lowest confidence among them.
    """
    k = len(confidences)
    n = confidences[0].size
    alive = np.ones(n, dtype=bool)
    thresholds = []
    for i in range(k - 1):
        conf = confidences[i][alive]
        n_exit = min(math.ceil(q * conf.size - 1e-12), conf.size)
        if n_exit <= 0:
            t = math.inf
        else:
            t = float(np.sort(conf)[::-1][n_exit - 1])
        thresholds.append(t)
        alive &= ~(confidences[i] >= t)
    thresholds.append(0.0)
    return thresholds


def exit_confidences(model: MultiExitModel, x) -> list[np.ndarray]:
    with ad.no_grad():
        return [confidence(lg) for _, lg in iter_exits(model, x)]


def calibrate_thresholds(model: MultiExitModel, x_val, budget: float,
                         cost_prefix=None) -> ThresholdSchedule:
    """Thresholds whose validation-set average cost meets ``budget``."""
    if len(x_val) == 0:
        raise ValueError("validation set is empty")
    cost_prefix = count_macs(model.cfg) if cost_prefix is None else list(cost_prefix)
    q = solve_exit_fraction(budget, cost_prefix)
    thresholds = thresholds_for_fraction(exit_confidences(model, x_val), q)
    return ThresholdSchedule(thresholds, q, float(budget))


def anytime_eval(model: MultiExitModel, x, y) -> list[float]:
    """Accuracy of every exit on every sample, no early exit."""
    y = np.asarray(y)
    out = forward_all(model, x, "infer")
    return [float(np.mean(lg.data.argmax(axis=1) == y)) for lg in out.logits]


@dataclass
class BudgetPoint:
    budget: float
    avg_cost: float
    accuracy: float
    exit_histogram: list[int]
    q: float = float("nan")
    thresholds: list[float] = field(default_factory=list)


@dataclass
class BudgetReport:
    points: list[BudgetPoint]

    def write_csv(self, path) -> None:
        k = len(self.points[0].exit_histogram) if self.points else 0
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["budget", "avg_cost", "accuracy"] + [f"n_exit_{i}" for i in range(1, k + 1)])
            for p in self.points:
                w.writerow([repr(p.budget), repr(p.avg_cost), repr(p.accuracy)] + p.exit_histogram)

    def write_curve(self, path) -> None:
        """Whitespace-separated ``avg_cost accuracy`` pairs for gnuplot."""
        with open(path, "w") as f:
            f.write("# avg_cost accuracy budget\n")
            for p in self.points:
                f.write(f"{p.avg_cost!r} {p.accuracy!r} {p.budget!r}\n")


def budgeted_batch_eval(model: MultiExitModel, x_test, y_test, budgets, x_val,
                        clamp_infeasible: bool = False) -> BudgetReport:
    """Calibrate on ``x_val`` for each budget, then evaluate early exit on the test split.

    A budget below the exit-1 cost raises :class:`InfeasibleBudgetError`
    unless ``clamp_infeasible``, in which case every sample exits at 1 and the
    row's ``avg_cost`` shows the overrun.
    """
    budgets = [float(b) for b in budgets]
    if any(b2 < b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ValueError("budgets must be ascending")
    y_test = np.asarray(y_test)
    cost_prefix = count_macs(model.cfg)
    val_conf = exit_confidences(model, x_val)
    points = []
    for b in budgets:
        if clamp_infeasible and b < cost_prefix[0]:
            q = 1.0
        else:
            q = solve_exit_fraction(b, cost_prefix)
        sched = ThresholdSchedule(thresholds_for_fraction(val_conf, q), q, b)
        pred = predict_adaptive(model, x_test, sched)
        hist = np.bincount(pred.exits, minlength=model.k + 1)[1:]
        points.append(BudgetPoint(b, float(pred.costs.mean()), float(np.mean(pred.labels == y_test)),
                                  [int(v) for v in hist], q, sched.thresholds))
    return BudgetReport(points)
