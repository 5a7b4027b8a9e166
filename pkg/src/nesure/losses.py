"""Training objectives: supervised score matching, MC-SURE, NE-SURE and EI.

Every loss accepts a single image ``(C,H,W)`` or a batch ``(B,C,H,W)``.  Its value is
the per-sample loss (a sum over pixels) averaged over the batch, and the returned
tape holds the exact gradient of that value.  Each call gives back a
:class:`LossResult`, which unpacks as ``value, tape = loss(...)``.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericError
from .netcore import GradientTape

PROBE_KINDS = ("rademacher", "gaussian")


@dataclass
class LossResult:
    value: float
    tape: GradientTape
    terms: dict = field(default_factory=dict)

    def __iter__(self):
        return iter((self.value, self.tape))


@dataclass(frozen=True)
class SureConfig:
    delta: float = 1e-3
    probe_kind: str = "rademacher"

    def __post_init__(self):
        if not 0.0 < self.delta <= 1e-2:
            raise ContractError("MC-SURE step delta must lie in (0, 1e-2]")
        if self.probe_kind not in PROBE_KINDS:
            raise ContractError(f"probe_kind must be one of {PROBE_KINDS}")


@dataclass(frozen=True)
class AugmentationDraw:
    """Per-sample amplitude ``alpha`` and offset ``mu``."""

    alpha: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        alpha = np.atleast_1d(np.asarray(self.alpha, dtype=np.float64))
        mu = np.atleast_1d(np.asarray(self.mu, dtype=np.float64))
        if np.any(alpha <= 0) or np.any(alpha > 1):
            raise ContractError("alpha must lie in (0, 1]")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "mu", mu)


@dataclass(frozen=True)
class EiDraw:
    g: np.ndarray
    sigma_prime: np.ndarray
    eta: np.ndarray

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.g, dtype=np.int64))
        sp = np.atleast_1d(np.asarray(self.sigma_prime, dtype=np.float64))
        if np.any(sp <= 0):
            raise ContractError("sigma_prime must be positive")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "sigma_prime", sp)
        object.__setattr__(self, "eta", np.asarray(self.eta, dtype=np.float64))


def draw_probe(rng, shape, kind="rademacher"):
    if kind == "rademacher":
        return rng.integers(0, 2, size=shape).astype(np.float64) * 2.0 - 1.0
    if kind == "gaussian":
        return rng.standard_normal(shape)
    raise ContractError(f"unknown probe kind {kind!r}")


def draw_augmentation(rng, n, alpha_min=0.05, alpha_max=1.0, mu_max=1.0):
    """Fresh (alpha, mu) per sample: alpha ~ U[alpha_min, alpha_max], mu ~ U[0, mu_max)."""
    alpha = rng.uniform(alpha_min, alpha_max, size=n) if alpha_max > alpha_min else np.full(n, alpha_max)
    mu = rng.uniform(0.0, mu_max, size=n) if mu_max > 0 else np.zeros(n)
    return AugmentationDraw(alpha, mu)


def draw_ei(rng, n, group_size, sigma_n, image_shape, sigma_min=0.01):
    """Fresh (g, sigma', eta) per sample with sigma' ~ U(sigma_min, sigma_n]."""
    g = rng.integers(0, group_size, size=n)
    sp = sigma_n - rng.uniform(0.0, sigma_n - sigma_min, size=n) if sigma_n > sigma_min else np.full(n, sigma_n)
    eta = rng.standard_normal((n,) + tuple(image_shape))
    return EiDraw(g, sp, eta)


def _batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ContractError(f"expected (C,H,W) or (B,C,H,W), got {x.shape}")
    return x, False


def _per_sample(v, n):
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if v.size == 1:
        v = np.full(n, v[0])
    if v.size != n:
        raise ContractError(f"expected {n} per-sample values, got {v.size}")
    return v


def _bcast(v):
    return v[:, None, None, None]


def _sum_px(a):
    return a.reshape(a.shape[0], -1).sum(axis=1)


def _finite(value, what):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite {what}")


def supervised_loss(model, x, sigma_t, eta, with_grad=True):
    """``||D(x + sigma_t eta, sigma_t) - x||^2`` and its parameter gradient."""
    xb, _ = _batch(x)
    n = xb.shape[0]
    s = _per_sample(sigma_t, n)
    if np.any(s <= 0):
        raise ContractError("sigma_t must be positive")
    eb = np.asarray(eta, dtype=np.float64).reshape(xb.shape)
    out, trace = model.forward(xb + _bcast(s) * eb, s, keep=True)
    _finite(out, "denoiser output")
    r = out - xb
    per = _sum_px(r * r)
    tape = model.backward(trace, 2.0 * r / n)[0] if with_grad else GradientTape()
    return LossResult(float(per.mean()), tape, {"fidelity": float(per.mean())})


def _probe_input(y, probe, delta):
    y_pert = y + delta * probe
    if np.any((y_pert == y) & (probe != 0)):
        raise NumericError(f"MC-SURE perturbation delta={delta:g} underflows against the input magnitude")
    return y_pert


def mc_divergence(model, y, sigma, cfg, probe):
    """``(1/delta) <probe, D(y + delta probe) - D(y)>`` averaged over the batch."""
    yb, _ = _batch(y)
    pb = np.asarray(probe, dtype=np.float64).reshape(yb.shape)
    s = _per_sample(sigma, yb.shape[0])
    base = model.forward(yb, s)
    pert = model.forward(_probe_input(yb, pb, cfg.delta), s)
    return float(np.mean(_sum_px(pb * (pert - base)) / cfg.delta))


def _sure_core(model, y, sigma, cfg, probe, with_grad):
    n = y.shape[0]
    s = _per_sample(sigma, n)
    pb = np.asarray(probe, dtype=np.float64).reshape(y.shape)
    out0, tr0 = model.forward(y, s, keep=True)
    out1, tr1 = model.forward(_probe_input(y, pb, cfg.delta), s, keep=True)
    _finite(out0, "denoiser output")
    _finite(out1, "denoiser output")
    r = y - out0
    fid = _sum_px(r * r)
    div = _sum_px(pb * (out1 - out0)) / cfg.delta
    weight = 2.0 * s * s
    per = fid + weight * div
    tape = GradientTape()
    if with_grad:
        coef = _bcast(weight / cfg.delta) * pb
        tape = model.backward(tr0, (-2.0 * r - coef) / n)[0]
        model.backward(tr1, coef / n, tape)
    terms = {"fidelity": float(fid.mean()), "divergence": float((weight * div).mean())}
    return LossResult(float(per.mean()), tape, terms)


def sure_loss(model, y, sigma_n, cfg, probe, with_grad=True):
    """``||y - D(y, s)||^2 + 2 s^2 div D(y, s)`` with an MC divergence, ``s = sigma_n``."""
    yb, _ = _batch(y)
    return _sure_core(model, yb, sigma_n, cfg, probe, with_grad)


def ne_sure_loss(model, y, sigma_n, draw, cfg, probe, with_grad=True):
    """SURE at the rescaled input ``alpha y + mu`` and noise level ``alpha sigma_n``."""
    yb, _ = _batch(y)
    n = yb.shape[0]
    alpha = _per_sample(draw.alpha, n)
    mu = _per_sample(draw.mu, n)
    scaled = _bcast(alpha) * yb + _bcast(mu)
    return _sure_core(model, scaled, alpha * _per_sample(sigma_n, n), cfg, probe, with_grad)


def ei_term(model, y, op, group, draw, sigma_n, with_grad=True, stop_gradient=False):
    """``||T_g xhat - D(A(T_g xhat + sigma' eta), sigma')||^2`` with ``xhat = D(A^T y, sigma_n)``.

    The noise is projected by ``A`` so the re-measured signal has the same
    embedded support as real measurements.  Gradients flow through both
    denoiser calls unless ``stop_gradient`` is set.
    """
    yb, _ = _batch(y)
    n = yb.shape[0]
    g = np.broadcast_to(draw.g, (n,)) if draw.g.size == 1 else draw.g
    sp = _per_sample(draw.sigma_prime, n)
    eta = np.asarray(draw.eta, dtype=np.float64).reshape(yb.shape)
    xhat, tr1 = model.forward(op.adjoint(yb), _per_sample(sigma_n, n), keep=True)
    _finite(xhat, "denoiser output")
    t = np.stack([group.transform(g[i], xhat[i]) for i in range(n)])
    z = op.apply(t + _bcast(sp) * eta)
    out, tr2 = model.forward(z, sp, keep=True)
    _finite(out, "denoiser output")
    r = t - out
    per = _sum_px(r * r)
    tape = GradientTape()
    if with_grad:
        tape, dz = model.backward(tr2, -2.0 * r / n, None, wrt_input=not stop_gradient)
        if not stop_gradient:
            dt = 2.0 * r / n + op.adjoint(dz)
            dxhat = np.stack([group.inverse_transform(g[i], dt[i]) for i in range(n)])
            model.backward(tr1, dxhat, tape)
    return LossResult(float(per.mean()), tape, {"ei": float(per.mean())})


def combined_loss(model, y, op, group, sigma_n, draws, weights=(1.0, 1.0), cfg=None,
                  with_grad=True, stop_gradient=False):
    """``w_sure * NE-SURE + w_ei * EI``; ``draws = (augmentation, probe, ei_draw)``."""
    w_sure, w_ei = (float(w) for w in weights)
    if w_sure < 0 or w_ei < 0:
        raise ContractError("loss weights must be non-negative")
    if w_sure == 0 and w_ei == 0:
        raise ContractError("at least one loss weight must be positive")
    cfg = cfg or SureConfig()
    aug, probe, ei = draws
    value = 0.0
    tape = GradientTape()
    terms = {}
    if w_sure > 0:
        part = ne_sure_loss(model, y, sigma_n, aug, cfg, probe, with_grad)
        value += w_sure * part.value
        tape.merge(part.tape, w_sure)
        terms.update(part.terms)
    if w_ei > 0:
        part = ei_term(model, y, op, group, ei, sigma_n, with_grad, stop_gradient)
        value += w_ei * part.value
        tape.merge(part.tape, w_ei)
        terms.update(part.terms)
    return LossResult(value, tape, terms)
