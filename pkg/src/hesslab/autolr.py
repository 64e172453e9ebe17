"""Optimisers and the curvature-driven learning-rate / momentum learner.

SGD uses heavy-ball momentum (v <- rho v - alpha g; w <- w + v).  Adam keeps
bias-corrected moments with the damping added after the square root.  The
auto-LR learner periodically runs Lanczos on a freshly drawn batch Hessian,
drops a dominant near-degenerate Ritz node, clamps the rest to a positive
floor and converts the extremal nodes into Polyak or Nesterov (alpha, rho).
"""

from __future__ import annotations

import csv
import enum
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import lanczos, nn
from ._random import spawn

log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 3


class RitzFilterError(RuntimeError):
    """Filtering removed every Ritz node; keep the previous hyperparameters."""


class GridSearchError(RuntimeError):
    def __init__(self, message: str, outcomes: list[dict]):
        super().__init__(message)
        self.outcomes = outcomes


# --------------------------------------------------------------------------
# Optimiser states and steps
# --------------------------------------------------------------------------


@dataclass
class SgdMomentum:
    velocity: np.ndarray
    alpha: float
    rho: float = 0.0


@dataclass
class Adam:
    m1: np.ndarray
    m2: np.ndarray
    alpha: float
    beta1: float = 0.9
    beta2: float = 0.999
    delta: float = 1e-8
    step: int = 0

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError("Adam damping must be positive")


OptimizerState = SgdMomentum | Adam


def make_optimizer(kind: str, P: int, alpha: float, rho: float = 0.0, delta: float = 1e-8) -> OptimizerState:
    if kind == "sgd":
        return SgdMomentum(np.zeros(P), alpha, rho)
    if kind == "adam":
        return Adam(np.zeros(P), np.zeros(P), alpha, delta=delta)
    raise ValueError(f"unknown optimizer {kind!r}")


def sgd_step(state: SgdMomentum, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    state.velocity = state.rho * state.velocity - state.alpha * grad
    return params + state.velocity


def adam_step(state: Adam, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    state.step += 1
    state.m1 = state.beta1 * state.m1 + (1 - state.beta1) * grad
    state.m2 = state.beta2 * state.m2 + (1 - state.beta2) * grad * grad
    m1_hat = state.m1 / (1 - state.beta1**state.step)
    m2_hat = state.m2 / (1 - state.beta2**state.step)
    return params - state.alpha * m1_hat / (np.sqrt(m2_hat) + state.delta)


def optimizer_step(state: OptimizerState, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if isinstance(state, Adam):
        return adam_step(state, params, grad)
    return sgd_step(state, params, grad)


def inspect_adam_eta(state: Adam) -> np.ndarray:
    """Adam's implied per-coordinate curvature sqrt(m2_hat) (nonnegative)."""
    if state.step == 0:
        return np.zeros_like(state.m2)
    return np.sqrt(state.m2 / (1 - state.beta2**state.step))


# --------------------------------------------------------------------------
# Curvature probes and hyperparameter rules
# --------------------------------------------------------------------------


class AutoLrMode(str, enum.Enum):
    POLYAK = "polyak"
    NESTEROV = "nesterov"


@dataclass(frozen=True)
class AutoLrConfig:
    mode: AutoLrMode = AutoLrMode.POLYAK
    probe_period_epochs: int = 20
    m: int = 20
    mass_threshold: float = 0.5
    psd_floor: float = 1e-6  # relative to the largest Ritz node
    kind: str = "hessian"
    nesterov_lr_normalized: bool = False
    polyak_lr_verbatim: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", AutoLrMode(self.mode))
        if not 0 < self.mass_threshold < 1:
            raise ValueError("mass_threshold must lie in (0, 1)")
        if self.m < 2:
            raise ValueError("need at least 2 Lanczos steps")
        if self.probe_period_epochs < 1:
            raise ValueError("probe period must be >= 1 epoch")


def probe_curvature(params, spec: nn.MlpSpec, batch: nn.Dataset, m: int, seed=None, kind: str = "hessian") -> lanczos.RitzSpectrum:
    """Ritz spectrum of the batch curvature at the current parameters."""
    op = nn.hessian_operator(params, spec, batch, kind)
    return lanczos.ritz_quadrature(lanczos.lanczos_decompose(op, min(m, spec.P), seed=seed))


def filter_ritz(spec: lanczos.RitzSpectrum, mass_threshold: float = 0.5, psd_floor: float = 1e-12) -> tuple[float, float]:
    """(top, bottom) curvature after dropping a dominant node and clamping to psd_floor."""
    if len(spec) == 0:
        raise RitzFilterError("empty Ritz spectrum")
    nodes, weights = spec.nodes, spec.weights
    i = int(np.argmax(weights))
    if weights[i] > mass_threshold:
        keep = np.arange(len(nodes)) != i
        nodes = nodes[keep]
        if nodes.size == 0:
            raise RitzFilterError("dominant node was the only node; reuse previous (alpha, rho)")
    nodes = np.maximum(nodes, psd_floor)
    return float(nodes.max()), float(nodes.min())


def _check_pair(top: float, bottom: float):
    if not 0 < bottom <= top:
        raise ValueError(f"need 0 < bottom <= top, got top={top}, bottom={bottom}")


def polyak_hyperparams(top: float, bottom: float, verbatim: bool = False) -> tuple[float, float]:
    """Heavy-ball step and momentum for curvature in [bottom, top].

    alpha = (2 / (sqrt(top) + sqrt(bottom)))^2 and
    rho = ((sqrt(top) - sqrt(bottom)) / (sqrt(top) + sqrt(bottom)))^2 give the
    optimal rate (sqrt(k) - 1)/(sqrt(k) + 1) on a quadratic.  ``verbatim`` uses
    the unsquared step 2 / (sqrt(top) + sqrt(bottom)), which is not
    dimensionally a step size and can diverge (e.g. on [1, 4]).
    """
    _check_pair(top, bottom)
    a, b = math.sqrt(top), math.sqrt(bottom)
    alpha = 2.0 / (a + b)
    return (alpha if verbatim else alpha * alpha), ((a - b) / (a + b)) ** 2


def nesterov_hyperparams(top: float, bottom: float, normalized: bool = False) -> tuple[float, float]:
    """alpha = sqrt(bottom/top) (divided by top when ``normalized``), rho = (a-b)/(a+b)."""
    _check_pair(top, bottom)
    a, b = math.sqrt(top), math.sqrt(bottom)
    alpha = b / a
    if normalized:
        alpha /= top
    return alpha, (a - b) / (a + b)


@dataclass
class AveragedIterate:
    mean: np.ndarray | None = None
    count: int = 0

    def update(self, params: np.ndarray) -> None:
        self.count += 1
        if self.mean is None:
            self.mean = np.array(params, dtype=float)
        else:
            self.mean += (params - self.mean) / self.count


def flat_linear_schedule(alpha0: float, t: float, T: float, r: float = 0.01) -> float:
    """Flat for the first half, linear decay to alpha0 * r by 90%, then flat."""
    frac = t / T
    if frac <= 0.5:
        return alpha0
    if frac <= 0.9:
        return alpha0 * (1 - (1 - r) * (frac - 0.5) / 0.4)
    return alpha0 * r


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


@dataclass
class RunConfig:
    spec: nn.MlpSpec
    train: nn.Dataset
    val: nn.Dataset | None = None
    optimizer: str = "sgd"
    lr: float = 0.1
    momentum: float = 0.0
    adam_delta: float = 1e-8
    weight_decay: float = 0.0
    schedule: str = "constant"  # or "flat_linear"
    schedule_r: float = 0.01
    autolr: AutoLrConfig | None = None
    batch_size: int = 32
    epochs: int = 10
    swa_start: int | None = None
    init_scale: float = 1.0
    init_params: np.ndarray | None = None
    seed: int = 0

    def manifest(self) -> dict:
        return {
            "spec": json.loads(self.spec.to_json()),
            "N_train": self.train.N,
            "N_val": self.val.N if self.val is not None else 0,
            "optimizer": self.optimizer,
            "lr": self.lr,
            "momentum": self.momentum,
            "adam_delta": self.adam_delta,
            "weight_decay": self.weight_decay,
            "schedule": self.schedule,
            "schedule_r": self.schedule_r,
            "autolr": None
            if self.autolr is None
            else {
                "mode": self.autolr.mode.value,
                "probe_period_epochs": self.autolr.probe_period_epochs,
                "m": self.autolr.m,
                "mass_threshold": self.autolr.mass_threshold,
                "psd_floor": self.autolr.psd_floor,
                "kind": self.autolr.kind,
                "nesterov_lr_normalized": self.autolr.nesterov_lr_normalized,
                "polyak_lr_verbatim": self.autolr.polyak_lr_verbatim,
            },
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "swa_start": self.swa_start,
            "init_scale": self.init_scale,
            "seed": self.seed,
        }


HISTORY_FIELDS = ("epoch", "train_loss", "train_err", "val_err", "alpha", "rho")


@dataclass
class TrainingHistory:
    rows: list[dict] = field(default_factory=list)
    probes: list[dict] = field(default_factory=list)
    diverged: bool = False
    diverged_epoch: int | None = None
    params: np.ndarray | None = None
    swa: AveragedIterate = field(default_factory=AveragedIterate)
    swa_val_err: float | None = None
    state: OptimizerState | None = None

    @property
    def outcome(self) -> str:
        return "diverged" if self.diverged else "completed"

    @property
    def final_val_err(self) -> float:
        if not self.rows:
            return math.nan
        return self.rows[-1]["val_err"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HISTORY_FIELDS)
        for row in self.rows:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in HISTORY_FIELDS[1:]])
        return buf.getvalue()


def _error(params, spec, data: nn.Dataset | None) -> float:
    if data is None:
        return math.nan
    return 1.0 - nn.accuracy(params, spec, data)


def _full_loss(params, spec, data) -> float:
    try:
        return nn.batch_loss(params, spec, data)
    except FloatingPointError:
        return math.inf


def _autolr_update(cfg: AutoLrConfig, params, spec, data, B, rng, seed, state: SgdMomentum, probes, epoch):
    batch = nn.sample_batch(data, B, rng)
    ritz = probe_curvature(params, spec, batch, cfg.m, seed=seed, kind=cfg.kind)
    floor = cfg.psd_floor * max(float(ritz.nodes.max()), 0.0)
    record = {"epoch": epoch, "n_nodes": len(ritz), "accepted": False}
    try:
        if floor <= 0:
            raise RitzFilterError("no positive curvature in probe")
        top, bottom = filter_ritz(ritz, cfg.mass_threshold, floor)
        if cfg.mode is AutoLrMode.POLYAK:
            alpha, rho = polyak_hyperparams(top, bottom, cfg.polyak_lr_verbatim)
        else:
            alpha, rho = nesterov_hyperparams(top, bottom, cfg.nesterov_lr_normalized)
        if not (alpha > 0 and 0 <= rho < 1):
            raise RitzFilterError(f"rejected alpha={alpha}, rho={rho}")
    except RitzFilterError as exc:
        log.info("epoch %d: curvature probe rejected (%s); keeping alpha=%g rho=%g", epoch, exc, state.alpha, state.rho)
        record.update(alpha=state.alpha, rho=state.rho)
        probes.append(record)
        return
    state.alpha, state.rho = alpha, rho
    record.update(top=top, bottom=bottom, alpha=alpha, rho=rho, accepted=True)
    probes.append(record)


def train(cfg: RunConfig) -> TrainingHistory:
    """Run one deterministic training job; stops early when it diverges."""
    spec, data = cfg.spec, cfg.train
    ss_init, ss_batches, ss_probe = spawn(cfg.seed, 3)
    if cfg.init_params is not None:
        params = np.array(cfg.init_params, dtype=float)
    else:
        params = nn.init_params(spec, ss_init, cfg.init_scale)
    if cfg.autolr is not None and cfg.optimizer != "sgd":
        raise ValueError("auto learning rates drive the SGD-momentum optimiser only")
    state = make_optimizer(cfg.optimizer, spec.P, cfg.lr, cfg.momentum, cfg.adam_delta)
    probe_rng = np.random.default_rng(ss_probe)
    probe_seeds = iter(ss_probe.spawn(cfg.epochs // (cfg.autolr.probe_period_epochs if cfg.autolr else 1) + 1))
    hist = TrainingHistory()

    initial_loss = _full_loss(params, spec, data)
    blowups = 0
    epoch_seeds = ss_batches.spawn(cfg.epochs)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        for epoch in range(cfg.epochs):
            if cfg.autolr is not None and epoch % cfg.autolr.probe_period_epochs == 0:
                _autolr_update(cfg.autolr, params, spec, data, min(cfg.batch_size, data.N), probe_rng, next(probe_seeds), state, hist.probes, epoch)
            elif cfg.autolr is None and cfg.schedule == "flat_linear":
                state.alpha = flat_linear_schedule(cfg.lr, epoch, cfg.epochs, cfg.schedule_r)

            broke = False
            for batch in nn.batch_stream(data, cfg.batch_size, seed=epoch_seeds[epoch]):
                try:
                    grad = nn.gradient(params, spec, batch)
                except FloatingPointError:
                    broke = True
                    break
                params = optimizer_step(state, params, grad)
                if cfg.weight_decay:
                    params = params - state.alpha * cfg.weight_decay * params
                if not np.all(np.isfinite(params)):
                    broke = True
                    break

            loss = math.inf if broke else _full_loss(params, spec, data)
            rho = state.rho if isinstance(state, SgdMomentum) else 0.0
            hist.rows.append(
                {
                    "epoch": epoch + 1,
                    "train_loss": loss,
                    "train_err": math.nan if broke else _error(params, spec, data),
                    "val_err": math.nan if broke else _error(params, spec, cfg.val),
                    "alpha": state.alpha,
                    "rho": rho,
                }
            )
            if not math.isfinite(loss):
                hist.diverged, hist.diverged_epoch = True, epoch + 1
                break
            blowups = blowups + 1 if loss > DIVERGENCE_FACTOR * initial_loss else 0
            if blowups >= DIVERGENCE_PATIENCE:
                hist.diverged, hist.diverged_epoch = True, epoch + 1
                break
            if cfg.swa_start is not None and epoch + 1 >= cfg.swa_start:
                hist.swa.update(params)

    hist.params = params
    hist.state = state
    if hist.swa.mean is not None and not hist.diverged:
        hist.swa_val_err = _error(hist.swa.mean, spec, cfg.val)
    return hist


def _workers() -> int:
    try:
        return max(1, int(os.environ.get("HESSLAB_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class GridResult:
    best_alpha: float
    outcomes: list[dict]


def lr_grid_search(cfg: RunConfig, grid: Sequence[float], workers: int | None = None) -> GridResult:
    """Largest learning rate on the grid that trains without diverging.

    Every run reuses the same seed, so the result does not depend on the
    number of workers.  Ties on alpha go to the lower final validation error.
    """
    grid = [float(a) for a in grid]
    workers = workers or _workers()

    def run(alpha):
        h = train(replace(cfg, lr=alpha))
        return {"alpha": alpha, "outcome": h.outcome, "diverged_epoch": h.diverged_epoch, "final_val_err": h.final_val_err}

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(run, grid))
    else:
        outcomes = [run(a) for a in grid]

    stable = [o for o in outcomes if o["outcome"] == "completed"]
    if not stable:
        raise GridSearchError("every learning rate on the grid diverged", outcomes)

    def key(o):
        err = o["final_val_err"]
        return (o["alpha"], -(err if math.isfinite(err) else math.inf))

    return GridResult(max(stable, key=key)["alpha"], outcomes)


def log_grid(lo: float, hi: float, n: int) -> np.ndarray:
    return np.logspace(math.log10(lo), math.log10(hi), n)
