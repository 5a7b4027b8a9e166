"""Training loop for the supervised and self-supervised objectives.

Every step seeds its own generators from ``(seed, step, purpose)``.  A run
resumed from the checkpoint at step ``k`` therefore draws exactly what the
uninterrupted run would have drawn from step ``k`` on.
"""

import csv
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import losses
from .data import training_scope
from .errors import ContractError, NumericError
from .netcore import OptimizerState, adam_step, save_checkpoint

MODES = ("supervised", "sure", "ne-sure", "ne-sure+ei")
TRACE_COLUMNS = ("step", "loss", "fidelity", "divergence", "ei", "lr")

_BATCH, _AUG, _PROBE, _EI, _NOISE = range(5)


class TrainingAborted(NumericError):
    """Raised when a step produces a non-finite loss or gradient."""

    def __init__(self, message, step, last_good=None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good


@dataclass
class TrainConfig:
    mode: str = "ne-sure"
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    lr_schedule: str = "constant"
    seed: int = 0
    alpha_min: float = 0.05
    alpha_max: float = 1.0
    mu_max: float = 1.0
    weights: tuple = (1.0, 1.0)
    sure: losses.SureConfig = field(default_factory=losses.SureConfig)
    sigma_t_min: float = 0.005
    sigma_t_max: float = 0.15
    ei_sigma_min: float = 0.01
    checkpoint_every: int = 0

    def validate(self):
        if self.mode not in MODES:
            raise ContractError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 0 or self.batch_size < 1:
            raise ContractError("steps must be >= 0 and batch_size >= 1")
        if self.lr <= 0:
            raise ContractError("lr must be positive")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ContractError("lr_schedule must be 'constant' or 'cosine'")
        if not 0 < self.alpha_min <= self.alpha_max <= 1:
            raise ContractError("need 0 < alpha_min <= alpha_max <= 1")
        if self.mu_max < 0:
            raise ContractError("mu_max must be non-negative")
        if not 0 < self.sigma_t_min <= self.sigma_t_max:
            raise ContractError("need 0 < sigma_t_min <= sigma_t_max")
        return self

    def lr_at(self, step):
        if self.lr_schedule == "constant" or self.steps <= 1:
            return self.lr
        # cosine decay to a tenth of the base rate
        frac = min(step, self.steps) / self.steps
        return self.lr * (0.1 + 0.45 * (1.0 + math.cos(math.pi * frac)))


def step_rng(seed, step, purpose):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step), int(purpose)]))


@dataclass
class TrainResult:
    model: object
    state: OptimizerState
    trace: list


def _supervised_step(model, cfg, images, idx, step):
    x = images[idx]
    rng = step_rng(cfg.seed, step, _NOISE)
    lo, hi = math.log(cfg.sigma_t_min), math.log(cfg.sigma_t_max)
    sigma = np.exp(rng.uniform(lo, hi, size=len(idx))) if hi > lo else np.full(len(idx), cfg.sigma_t_min)
    eta = rng.standard_normal(x.shape)
    return losses.supervised_loss(model, x, sigma, eta)


def _self_supervised_step(model, cfg, meas, group, idx, step):
    y = meas.y[idx]
    n = len(idx)
    probe = losses.draw_probe(step_rng(cfg.seed, step, _PROBE), y.shape, cfg.sure.probe_kind)
    if cfg.mode == "sure":
        return losses.sure_loss(model, y, meas.sigma_n, cfg.sure, probe)
    aug = losses.draw_augmentation(step_rng(cfg.seed, step, _AUG), n, cfg.alpha_min, cfg.alpha_max, cfg.mu_max)
    if cfg.mode == "ne-sure":
        return losses.ne_sure_loss(model, y, meas.sigma_n, aug, cfg.sure, probe)
    ei = losses.draw_ei(step_rng(cfg.seed, step, _EI), n, group.size, meas.sigma_n, y.shape[1:], cfg.ei_sigma_min)
    return losses.combined_loss(model, y, meas.op, group, meas.sigma_n, (aug, probe, ei), cfg.weights, cfg.sure)


def train(model, cfg, measurements=None, dataset=None, group=None, state=None, trace=None,
          checkpoint_dir=None, callback=None):
    """Run ``cfg.steps`` optimizer steps (counting steps already in ``state``).

    Supervised mode reads ``dataset`` (clean images).  The self-supervised modes
    only see ``measurements`` and run inside a self-supervised training scope,
    where touching clean images raises.  ``trace`` rows are appended in place.
    With ``checkpoint_dir`` set, checkpoints land there every
    ``cfg.checkpoint_every`` steps and at the end.  On a non-finite step the
    model is rolled back, saved as ``last_good.ckpt``, and
    :class:`TrainingAborted` is raised.
    """
    cfg.validate()
    state = state if state is not None else OptimizerState(lr=cfg.lr)
    trace = trace if trace is not None else []
    if cfg.mode == "supervised":
        if dataset is None:
            raise ContractError("supervised mode needs a clean dataset")
        scope, count = "supervised", len(dataset)
    else:
        if measurements is None:
            raise ContractError(f"{cfg.mode} mode needs measurements")
        if cfg.mode == "ne-sure+ei" and group is None:
            raise ContractError("ne-sure+ei mode needs a transform group")
        scope, count = "self-supervised", len(measurements)
    if count == 0:
        raise ContractError("empty training set")
    batch = min(cfg.batch_size, count)
    if checkpoint_dir is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)

    with training_scope(scope):
        images = dataset.images if scope == "supervised" else None
        while state.step < cfg.steps:
            step = state.step
            idx = np.sort(step_rng(cfg.seed, step, _BATCH).choice(count, size=batch, replace=False))
            backup = (model.get_vector(), {k: v.copy() for k, v in state.m.items()},
                      {k: v.copy() for k, v in state.v.items()})
            state.lr = cfg.lr_at(step)
            try:
                if scope == "supervised":
                    res = _supervised_step(model, cfg, images, idx, step)
                else:
                    res = _self_supervised_step(model, cfg, measurements, group, idx, step)
                if not math.isfinite(res.value):
                    raise NumericError(f"non-finite loss {res.value}")
                adam_step(model, res.tape, state)
            except NumericError as exc:
                model.set_vector(backup[0])
                state.m, state.v, state.step = backup[1], backup[2], step
                path = None
                if checkpoint_dir is not None:
                    path = os.path.join(checkpoint_dir, "last_good.ckpt")
                    save_checkpoint(model, state, path)
                raise TrainingAborted(f"training aborted at step {step}: {exc}", step, path) from exc
            row = {"step": step, "loss": res.value, "lr": state.lr}
            for col in ("fidelity", "divergence", "ei"):
                row[col] = res.terms.get(col, float("nan"))
            trace.append(row)
            if callback is not None:
                callback(row)
            done = state.step
            if checkpoint_dir is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                save_checkpoint(model, state, os.path.join(checkpoint_dir, f"step_{done:06d}.ckpt"))
    if checkpoint_dir is not None:
        save_checkpoint(model, state, os.path.join(checkpoint_dir, "final.ckpt"))
    return TrainResult(model, state, trace)


def write_trace(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in TRACE_COLUMNS[1:]])


def read_trace(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {c: float(rec[c]) for c in TRACE_COLUMNS[1:]}
            row["step"] = int(rec["step"])
            rows.append(row)
    return rows


def evaluate_mse(model, clean, sigma_t, seed=0, sigma_ref=None, batch=256):
    """Mean per-pixel MSE of ``denoise_at(model, x + sigma_t eta, sigma_t)`` over ``clean``."""
    from .sampler import denoise_at

    clean = np.asarray(clean, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(round(sigma_t * 1e9))]))
    noisy = clean + sigma_t * rng.standard_normal(clean.shape)
    total = 0.0
    for i in range(0, clean.shape[0], batch):
        out = denoise_at(model, noisy[i:i + batch], sigma_t, sigma_ref)
        total += float(np.sum((out - clean[i:i + batch]) ** 2))
    return total / clean.size
