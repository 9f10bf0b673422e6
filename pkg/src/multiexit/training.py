"""Joint multi-exit training: losses, gradient equilibrium, distillation, SGD.

Training runs in two phases. Phase 1 trains every parameter on the weighted
sum of per-exit cross-entropies, optionally through the gradient-equilibrium
graph. Phase 2 freezes everything except the last affine layer of each head
and fine-tunes with the transfer paths active and, optionally, one-for-all
distillation from the last exit.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from typing import TYPE_CHECKING

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, TrainingDivergedError
from .network import MultiExitModel, forward_all, last_layer_params

if TYPE_CHECKING:
    from .data import Dataset


@dataclass
class TrainConfig:
    """Hyperparameters for both training phases.

    ``lambdas=None`` weights every exit by 1. ``lr0_phase2=None`` reuses
    ``lr0``. ``alpha`` and ``temperature`` only matter when ``ofa_enabled``.
    """

    lambdas: tuple[float, ...] | None = None
    alpha: float = 0.5
    temperature: float = 2.0
    ge_enabled: bool = True
    isc_enabled: bool = True
    ofa_enabled: bool = True
    isc_phase1: bool = False
    lr0: float = 0.1
    lr0_phase2: float | None = None
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-4
    phase1_epochs: int = 40
    phase2_epochs: int = 20
    lr_drop_points: tuple[float, ...] = (0.5, 0.75)
    batch_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lambdas is not None:
            self.lambdas = tuple(float(v) for v in self.lambdas)
            if any(not v > 0 for v in self.lambdas):
                raise ConfigError("every lambda must be > 0")
        self.lr_drop_points = tuple(float(v) for v in self.lr_drop_points)
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.phase1_epochs < 0 or self.phase2_epochs < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")

    def lambda_for(self, k: int) -> tuple[float, ...]:
        if self.lambdas is None:
            return (1.0,) * k
        if len(self.lambdas) != k:
            raise ConfigError(f"need {k} lambdas, got {len(self.lambdas)}")
        return self.lambdas


def train_config_fields() -> dict[str, type]:
    return {f.name: f.type for f in fields(TrainConfig)}


# ---------------------------------------------------------------------------
# losses


def _labels(y) -> np.ndarray:
    return np.asarray(y, dtype=np.intp)


def plain_sum_loss(model: MultiExitModel, x, y, cfg: TrainConfig, isc_mode: str = "off") -> Tensor:
    """``sum_i lambda_i * CE(y, f_i(x))``."""
    out = forward_all(model, x, isc_mode)
    return _weighted_ce(out.logits, _labels(y), cfg.lambda_for(model.k))


def ge_forward_loss(model: MultiExitModel, x, y, cfg: TrainConfig, isc_mode: str = "off") -> Tensor:
    """Same value as :func:`plain_sum_loss`, built on the gradient-equilibrium graph."""
    out = forward_all(model, x, isc_mode, ge=True)
    return _weighted_ce(out.logits, _labels(y), cfg.lambda_for(model.k))


def _weighted_ce(logits, y, lambdas):
    total = None
    for lam, lg in zip(lambdas, logits):
        term = ad.cross_entropy_loss(lg, y)
        if lam != 1.0:
            term = term * lam
        total = term if total is None else total + term
    return total


def ge_scale_factors(k: int) -> list[tuple[float, float | None]]:
    """(head branch, next-block branch) gradient factors for each stage."""
    return [(1.0 / (k - i + 1), (k - i) / (k - i + 1) if i < k else None)
            for i in range(1, k + 1)]


def ofa_exit_loss(teacher_logits, student_logits, y, alpha: float, T: float) -> Tensor:
    """``alpha * CE(student, y) + (1 - alpha) * KL(teacher || student)`` at temperature ``T``."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    ce = ad.cross_entropy_loss(student_logits, y)
    if alpha == 1.0:
        return ce
    kl = ad.kl_divergence_loss(teacher_logits, student_logits, T)
    if alpha == 0.0:
        return kl
    return ce * alpha + kl * (1.0 - alpha)


def phase2_loss(model: MultiExitModel, x, y, cfg: TrainConfig) -> tuple[Tensor, list[Tensor]]:
    """Fine-tuning loss: OFA (or plain CE) on exits ``1..k-1``, CE on exit ``k``."""
    isc_mode = "train" if cfg.isc_enabled else "off"
    out = forward_all(model, x, isc_mode)
    y = _labels(y)
    lambdas = cfg.lambda_for(model.k)
    teacher = ad.stop_gradient(out.logits[-1])
    total = None
    for i, lg in enumerate(out.logits):
        if i < model.k - 1 and cfg.ofa_enabled:
            term = ofa_exit_loss(teacher, lg, y, cfg.alpha, cfg.temperature)
        else:
            term = ad.cross_entropy_loss(lg, y)
        if lambdas[i] != 1.0:
            term = term * lambdas[i]
        total = term if total is None else total + term
    return total, out.logits


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptimizerState:
    """SGD velocity buffers for the parameters being trained."""

    param_names: list[str]
    lr: float
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def make_optimizer(model: MultiExitModel, lr: float, names=None) -> OptimizerState:
    names = list(model.params) if names is None else list(names)
    return OptimizerState(names, lr, {n: np.zeros_like(model.params[n].data) for n in names})


def sgd_step(model: MultiExitModel, opt_state: OptimizerState, cfg: TrainConfig) -> None:
    """One SGD update with (Nesterov) momentum and L2 weight decay, then clear grads.

    ``g = grad + wd * p; v = mu * v + g; p -= lr * (g + mu * v)`` (Nesterov) or
    ``p -= lr * v`` (classical).
    """
    lr, mu, wd = opt_state.lr, cfg.momentum, cfg.weight_decay
    for name in opt_state.param_names:
        p = model.params[name]
        if p.grad is None:
            continue
        g = p.grad + wd * p.data if wd else p.grad
        if mu:
            v = opt_state.velocity[name]
            v *= mu
            v += g
            step = g + mu * v if cfg.nesterov else v
        else:
            step = g
        p.data = p.data - lr * step
    model.zero_grad()


def lr_at_epoch(cfg: TrainConfig, epoch: int, phase: int = 1) -> float:
    """Step schedule: divide by 10 at each passed fraction of the phase length."""
    n_epochs = cfg.phase1_epochs if phase == 1 else cfg.phase2_epochs
    lr0 = cfg.lr0 if phase == 1 or cfg.lr0_phase2 is None else cfg.lr0_phase2
    passed = sum(1 for frac in cfg.lr_drop_points if epoch >= frac * n_epochs)
    return lr0 * 10.0 ** (-passed)


# ---------------------------------------------------------------------------
# training loops


@dataclass
class LogRow:
    epoch: int
    phase: int
    exit_index: int
    split: str
    accuracy: float
    loss: float
    grad_var_block1: float


LOG_COLUMNS = ["epoch", "phase", "exit_index", "split", "accuracy", "loss", "grad_var_block1"]


@dataclass
class TrainingLog:
    rows: list[LogRow] = field(default_factory=list)

    def extend(self, other: "TrainingLog") -> None:
        self.rows.extend(other.rows)

    def final_accuracy(self, split: str = "val") -> list[float]:
        """Per-exit accuracy from the last logged epoch of ``split``."""
        rows = [r for r in self.rows if r.split == split]
        if not rows:
            return []
        last = max((r.phase, r.epoch) for r in rows)
        sel = sorted((r for r in rows if (r.phase, r.epoch) == last), key=lambda r: r.exit_index)
        return [r.accuracy for r in sel]

    def grad_var_block1(self, phase: int = 1) -> list[float]:
        """Per-epoch block-1 gradient variance (one value per epoch)."""
        return [r.grad_var_block1 for r in self.rows
                if r.phase == phase and r.exit_index == 1 and r.split == "train"]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for r in self.rows:
                w.writerow([r.epoch, r.phase, r.exit_index, r.split, repr(r.accuracy),
                            repr(r.loss), "" if math.isnan(r.grad_var_block1) else repr(r.grad_var_block1)])


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def _coordinate_variance(samples: list[np.ndarray]) -> float:
    """Variance across samples of each coordinate, averaged over coordinates."""
    if len(samples) < 2:
        return float("nan")
    return float(np.var(np.stack(samples), axis=0, ddof=1).mean())


def evaluate_exits(model: MultiExitModel, x, y, isc_mode: str = "infer",
                   batch_size: int = 4096) -> tuple[list[float], list[float]]:
    """Per-exit accuracy and mean cross-entropy, without recording a tape."""
    y = _labels(y)
    k = model.k
    correct = np.zeros(k)
    loss = np.zeros(k)
    with ad.no_grad():
        for start in range(0, len(y), batch_size):
            xb, yb = x[start:start + batch_size], y[start:start + batch_size]
            out = forward_all(model, xb, "train" if isc_mode != "off" else "off")
            for i, lg in enumerate(out.logits):
                correct[i] += np.sum(lg.data.argmax(axis=1) == yb)
                loss[i] += ad.cross_entropy_loss(lg, yb).item() * len(yb)
    n = max(len(y), 1)
    return list(correct / n), list(loss / n)


def _log_epoch(log, model, data, epoch, phase, isc_mode, grad_var):
    for split, x, y in (("train", data.x_train, data.y_train), ("val", data.x_val, data.y_val)):
        if len(y) == 0:
            continue
        accs, losses = evaluate_exits(model, x, y, isc_mode)
        for i, (a, lo) in enumerate(zip(accs, losses), start=1):
            log.rows.append(LogRow(epoch, phase, i, split, float(a), float(lo), grad_var))


def _check_finite(loss: Tensor, phase: int, epoch: int, step: int) -> None:
    value = loss.item()
    if not math.isfinite(value):
        raise TrainingDivergedError(
            f"non-finite loss {value} in phase {phase}, epoch {epoch}, step {step}")


def train_phase1(model: MultiExitModel, data: "Dataset", cfg: TrainConfig) -> TrainingLog:
    """Train all parameters on the joint loss (GE graph when ``cfg.ge_enabled``).

    The logged ``grad_var_block1`` is the across-step variance of the block-1
    gradient actually applied, averaged over block-1 coordinates.
    """
    log = TrainingLog()
    if cfg.phase1_epochs == 0:
        return log
    rng = np.random.default_rng([cfg.seed, 1])
    opt = make_optimizer(model, cfg.lr0)
    isc_mode = "train" if (cfg.isc_phase1 and cfg.isc_enabled) else "off"
    loss_fn = ge_forward_loss if cfg.ge_enabled else plain_sum_loss
    w1, b1 = model.params["block1.weight"], model.params["block1.bias"]
    step = 0
    for epoch in range(cfg.phase1_epochs):
        opt.lr = lr_at_epoch(cfg, epoch, 1)
        block1_grads = []
        for idx in _batches(len(data.y_train), cfg.batch_size, rng):
            loss = loss_fn(model, data.x_train[idx], data.y_train[idx], cfg, isc_mode)
            _check_finite(loss, 1, epoch, step)
            ad.backward(loss)
            block1_grads.append(np.concatenate([w1.grad.ravel(), b1.grad.ravel()]))
            sgd_step(model, opt, cfg)
            step += 1
        _log_epoch(log, model, data, epoch, 1, "infer" if isc_mode != "off" else "off",
                   _coordinate_variance(block1_grads))
    return log


def train_phase2(model: MultiExitModel, data: "Dataset", cfg: TrainConfig) -> TrainingLog:
    """Fine-tune only the last affine layer of each head.

    Every other parameter is excluded from the tape for the duration, so it is
    bit-identical afterwards.
    """
    log = TrainingLog()
    if cfg.phase2_epochs == 0:
        return log
    trainable = set(last_layer_params(model))
    frozen = [p for n, p in model.params.items() if n not in trainable]
    for p in frozen:
        p.requires_grad = False
    try:
        rng = np.random.default_rng([cfg.seed, 2])
        opt = make_optimizer(model, cfg.lr0, sorted(trainable, key=list(model.params).index))
        isc_mode = "infer" if cfg.isc_enabled else "off"
        step = 0
        for epoch in range(cfg.phase2_epochs):
            opt.lr = lr_at_epoch(cfg, epoch, 2)
            for idx in _batches(len(data.y_train), cfg.batch_size, rng):
                loss, _ = phase2_loss(model, data.x_train[idx], data.y_train[idx], cfg)
                _check_finite(loss, 2, epoch, step)
                ad.backward(loss)
                sgd_step(model, opt, cfg)
                step += 1
            _log_epoch(log, model, data, epoch, 2, isc_mode, float("nan"))
    finally:
        for p in frozen:
            p.requires_grad = True
    return log


def train(model: MultiExitModel, data: "Dataset", cfg: TrainConfig) -> TrainingLog:
    log = train_phase1(model, data, cfg)
    log.extend(train_phase2(model, data, cfg))
    return log


# ---------------------------------------------------------------------------
# gradient variance


@dataclass
class BlockVariance:
    block: int
    var_plain: float
    var_ge: float
    per_loss_var: list[float]

    @property
    def bound(self) -> float:
        """Twice the largest single-loss variance."""
        return 2.0 * max(self.per_loss_var)


@dataclass
class GradVarianceReport:
    """Gradient variance at each block's parameters over resampled batches.

    Variance is taken across steps for every parameter coordinate and then
    averaged over the block's coordinates. ``var_plain`` is for the plain
    summed loss, ``var_ge`` for the same loss on the gradient-equilibrium
    graph, ``per_loss_var[j]`` for exit ``j+1``'s loss alone (plain graph).
    """

    n_steps: int
    blocks: list[BlockVariance]

    def write_csv(self, path) -> None:
        k = len(self.blocks)
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["block", "var_plain", "var_ge", "bound_2max"]
                       + [f"var_loss_{j}" for j in range(1, k + 1)])
            for b in self.blocks:
                w.writerow([b.block, repr(b.var_plain), repr(b.var_ge), repr(b.bound)]
                           + [repr(v) for v in b.per_loss_var])


def _block_grad(model, i):
    """Flattened block-``i`` gradient; zero when no loss reached the block."""
    parts = []
    for p in (model.params[f"block{i}.weight"], model.params[f"block{i}.bias"]):
        parts.append(np.zeros(p.data.size) if p.grad is None else p.grad.ravel())
    return np.concatenate(parts)


def per_loss_block_grads(model: MultiExitModel, x, y, cfg: TrainConfig,
                         ge: bool = False, isc_mode: str = "off") -> np.ndarray:
    """Gradient of each ``lambda_j * CE_j`` at each block's parameters.

    Returns an object array ``g[j][i]`` (0-based exit j, block i).
    """
    y = _labels(y)
    k = model.k
    lambdas = cfg.lambda_for(k)
    out = forward_all(model, x, isc_mode, ge=ge)
    grads = np.empty((k, k), dtype=object)
    for j, lg in enumerate(out.logits):
        loss = ad.cross_entropy_loss(lg, y) * lambdas[j]
        model.zero_grad()
        ad.backward(loss)
        for i in range(k):
            grads[j, i] = _block_grad(model, i + 1)
    model.zero_grad()
    return grads


def measure_grad_variance(model: MultiExitModel, data: "Dataset", cfg: TrainConfig,
                          n_steps: int = 100, batch_size: int | None = None,
                          seed: int = 0) -> GradVarianceReport:
    """Measure block-gradient variance at fixed parameters over ``n_steps`` batches.

    The plain and GE graphs see identical batches at every step.
    """
    if n_steps < 30:
        raise ValueError("n_steps must be >= 30")
    k = model.k
    bs = batch_size or cfg.batch_size
    rng = np.random.default_rng([seed, 3])
    per_loss = [[[] for _ in range(k)] for _ in range(k)]
    plain = [[] for _ in range(k)]
    ge = [[] for _ in range(k)]
    for _ in range(n_steps):
        idx = rng.choice(len(data.y_train), size=min(bs, len(data.y_train)), replace=False)
        xb, yb = data.x_train[idx], data.y_train[idx]
        g = per_loss_block_grads(model, xb, yb, cfg)
        for i in range(k):
            plain[i].append(sum(g[j, i] for j in range(k)))
            for j in range(k):
                per_loss[i][j].append(g[j, i])
        model.zero_grad()
        ad.backward(ge_forward_loss(model, xb, yb, cfg))
        for i in range(k):
            ge[i].append(_block_grad(model, i + 1))
        model.zero_grad()
    blocks = []
    for i in range(k):
        blocks.append(BlockVariance(
            i + 1,
            _coordinate_variance(plain[i]),
            _coordinate_variance(ge[i]),
            [_coordinate_variance(per_loss[i][j]) for j in range(k)],
        ))
    return GradVarianceReport(n_steps, blocks)
