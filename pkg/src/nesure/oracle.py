"""Closed-form and quadrature MMSE denoisers used as verification oracles.

All denoisers here act on points ``y`` of shape ``(..., d)``.  Isotropic Gaussian
mixtures give exact posterior means through conjugate per-component updates.
Low-dimensional priors with no closed form go through trapezoidal quadrature.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import trapezoid
from scipy.special import logsumexp

from .errors import ContractError


class QuadratureWarning(UserWarning):
    pass


@dataclass(frozen=True)
class GmmPrior:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        m = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        v = np.asarray(self.variances, dtype=np.float64).reshape(-1)
        if not (w.size == m.shape[0] == v.size):
            raise ContractError("weights, means and variances disagree on the component count")
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ContractError("weights must be positive and sum to 1")
        if np.any(v <= 0):
            raise ContractError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", m)
        object.__setattr__(self, "variances", v)

    @property
    def dim(self):
        return self.means.shape[1]

    def _log_resp(self, y, sigma):
        # log w_k N(y; m_k, (v_k + sigma^2) I), shape (..., K)
        tot = self.variances + sigma ** 2
        sq = np.sum((y[..., None, :] - self.means) ** 2, axis=-1)
        return (np.log(self.weights) - 0.5 * self.dim * np.log(2 * np.pi * tot) - 0.5 * sq / tot)

    def smoothed_log_density(self, y, sigma):
        """``log p_sigma(y)`` for the prior convolved with ``N(0, sigma^2 I)``."""
        return logsumexp(self._log_resp(np.asarray(y, dtype=np.float64), sigma), axis=-1)

    def log_density(self, x):
        return self.smoothed_log_density(x, 0.0)

    def density(self, x):
        return np.exp(self.log_density(x))

    def posterior_mean(self, y, sigma):
        y = np.asarray(y, dtype=np.float64)
        if sigma <= 0:
            raise ContractError("sigma must be positive")
        lr = self._log_resp(y, sigma)
        resp = np.exp(lr - logsumexp(lr, axis=-1, keepdims=True))
        tot = self.variances + sigma ** 2
        comp = (self.variances[:, None] * y[..., None, :] + sigma ** 2 * self.means) / tot[:, None]
        return np.einsum("...k,...kd->...d", resp, comp)

    def sample(self, rng, n):
        k = rng.choice(self.weights.size, size=n, p=self.weights)
        return self.means[k] + np.sqrt(self.variances[k])[:, None] * rng.standard_normal((n, self.dim))


def gmm_posterior_mean(prior, y, sigma):
    """Exact ``E[x | y]`` for ``y = x + sigma * eta`` under a :class:`GmmPrior`."""
    return prior.posterior_mean(y, sigma)


@dataclass(frozen=True)
class ScaleMixturePrior:
    """Zero-mean Gaussian scale mixture with geometrically spaced scales.

    Component ``k`` has standard deviation ``tau0 * ratio**k`` and weight
    proportional to ``ratio**(-beta * k)``.  Between the smallest and largest
    scales the density behaves like ``||x||**-(beta + dim)``, a positively
    homogeneous function of order ``-(beta + dim)``.
    """

    tau0: float
    ratio: float
    levels: int
    beta: float
    dim: int
    base: GmmPrior = field(init=False, repr=False)

    def __post_init__(self):
        if self.ratio <= 1 or self.levels < 1 or self.tau0 <= 0:
            raise ContractError("need ratio > 1, levels >= 1, tau0 > 0")
        k = np.arange(self.levels)
        r = float(self.ratio)
        w = r ** (-float(self.beta) * k)
        base = GmmPrior(w / w.sum(), np.zeros((self.levels, self.dim)), (self.tau0 * r ** k) ** 2)
        object.__setattr__(self, "base", base)

    @property
    def homogeneity_order(self):
        return -(self.beta + self.dim)

    @property
    def scale_band(self):
        """Norm range ``(lo, hi)`` away from both scale cutoffs."""
        rd = np.sqrt(self.dim)
        return self.tau0 * rd * self.ratio, self.tau0 * rd * self.ratio ** (self.levels - 2)

    def posterior_mean(self, y, sigma):
        return self.base.posterior_mean(y, sigma)

    def density(self, x):
        return self.base.density(x)

    def log_density(self, x):
        return self.base.log_density(x)

    def sample(self, rng, n):
        return self.base.sample(rng, n)


def _grid_axes(y, sigma, bounds, resolution):
    axes = []
    for i, yi in enumerate(y):
        lo, hi = bounds[i] if bounds is not None else (yi - 10 * sigma, yi + 10 * sigma)
        if lo > yi - 6 * sigma or hi < yi + 6 * sigma:
            raise ContractError("quadrature grid must cover at least 6 sigma around y")
        axes.append(np.linspace(lo, hi, resolution))
    return axes


def _quadrature(density, y, sigma, axes):
    mesh = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([m.ravel() for m in mesh], axis=-1)
    with np.errstate(divide="ignore"):
        logp = np.log(np.asarray(density(pts), dtype=np.float64))
    logw = logp - 0.5 * np.sum((pts - y) ** 2, axis=-1) / sigma ** 2
    top = np.max(logw)
    if not np.isfinite(top):
        raise ContractError("prior density vanishes on the whole grid")
    w = np.exp(logw - top).reshape(mesh[0].shape)

    def integrate(f):
        for ax in reversed(axes):
            f = trapezoid(f, ax, axis=-1)
        return f

    z = integrate(w)
    return np.array([integrate(w * m) / z for m in mesh])


def brute_force_mmse(density, y, sigma, bounds=None, resolution=2001, tol=1e-6, return_error=False):
    """Posterior mean by trapezoidal quadrature, for dimension at most 2.

    ``density`` maps points of shape ``(N, d)`` to (unnormalized) prior values.
    The estimate is repeated on the grid of every other node.  If the two
    disagree by more than ``tol`` a :class:`QuadratureWarning` is issued.
    """
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if y.size > 2:
        raise ContractError("brute-force MMSE supports dimension <= 2")
    if sigma <= 0:
        raise ContractError("sigma must be positive")
    if resolution % 2 == 0:
        resolution += 1
    axes = _grid_axes(y, sigma, bounds, resolution)
    fine = _quadrature(density, y, sigma, axes)
    coarse = _quadrature(density, y, sigma, [a[::2] for a in axes])
    err = float(np.max(np.abs(fine - coarse)))
    if err > tol:
        warnings.warn(f"quadrature not converged: halving changes the estimate by {err:.2e}", QuadratureWarning)
    return (fine, err) if return_error else fine


def tweedie_mean(prior, y, sigma, step=1e-6):
    """``y + sigma^2 grad log p_sigma(y)`` with a central-difference gradient."""
    y = np.asarray(y, dtype=np.float64)
    grad = np.empty_like(y)
    for i in range(y.shape[-1]):
        e = np.zeros(y.shape[-1])
        e[i] = step
        grad[..., i] = (prior.smoothed_log_density(y + e, sigma)
                        - prior.smoothed_log_density(y - e, sigma)) / (2 * step)
    return y + sigma ** 2 * grad


@dataclass
class EquivarianceReport:
    sigma_pairs: list = field(default_factory=list)
    epsilon: list = field(default_factory=list)

    def add(self, sigma, sigma_prime, eps):
        if eps < 0:
            raise ContractError("epsilon must be non-negative")
        self.sigma_pairs.append((float(sigma), float(sigma_prime)))
        self.epsilon.append(float(eps))

    @property
    def monotone_decreasing(self):
        """True when epsilon strictly decreases as sigma decreases (pairs sorted by sigma)."""
        order = np.argsort([-p[0] for p in self.sigma_pairs])
        eps = np.asarray(self.epsilon)[order]
        return bool(np.all(np.diff(eps) < 0))

    def rows(self):
        verdict = self.monotone_decreasing
        return [{"sigma": s, "sigma_prime": sp, "epsilon": e, "monotone_decreasing": verdict}
                for (s, sp), e in zip(self.sigma_pairs, self.epsilon)]


def scale_equivariance_error(denoiser, sigma, sigma_prime, test_points):
    """Mean of ``||D(y, s') - (s'/s) D((s/s') y, s)||`` over ``test_points``."""
    if sigma <= 0 or sigma_prime <= 0:
        raise ContractError("noise levels must be positive")
    y = np.asarray(test_points, dtype=np.float64)
    if sigma == sigma_prime:
        return 0.0
    direct = denoiser(y, sigma_prime)
    rescaled = (sigma_prime / sigma) * denoiser((sigma / sigma_prime) * y, sigma)
    diff = (direct - rescaled).reshape(y.shape[0], -1)
    return float(np.mean(np.linalg.norm(diff, axis=1)))


def equivariance_sweep(prior, sigmas, ratio=0.5, n_points=2000, seed=0, include_identity=True):
    """Measure epsilon(sigma, ratio * sigma) for a prior's exact MMSE denoiser.

    Test points are noisy draws ``x + sigma' eta`` with ``x`` from the prior.
    With ``include_identity``, a ``(sigma, sigma)`` row is added for every
    sigma; those rows are zero by construction and are skipped by the
    monotonicity verdict.
    """
    rng = np.random.default_rng(seed)
    x = prior.sample(rng, n_points)
    noise = rng.standard_normal(x.shape)
    report = EquivarianceReport()
    identity = EquivarianceReport()
    for s in sigmas:
        sp = ratio * s
        report.add(s, sp, scale_equivariance_error(prior.posterior_mean, s, sp, x + sp * noise))
        if include_identity:
            identity.add(s, s, scale_equivariance_error(prior.posterior_mean, s, s, x + s * noise))
    return report, identity


def homogeneity_check(density, alpha, order, probe_points):
    """``max |p(alpha x) / (alpha^order p(x)) - 1|`` over ``probe_points``."""
    if alpha <= 0:
        raise ContractError("alpha must be positive")
    x = np.asarray(probe_points, dtype=np.float64)
    return float(np.max(np.abs(density(alpha * x) / (alpha ** order * density(x)) - 1.0)))


def band_probe_points(prior, n=200, seed=0, alpha_span=2.0):
    """Random directions with norms spread over the prior's mid-scale band.

    The band is shrunk by ``alpha_span`` on both ends so ``alpha x`` stays inside
    it for ``alpha`` in ``[1/alpha_span, alpha_span]``.
    """
    rng = np.random.default_rng(seed)
    lo, hi = prior.scale_band
    lo, hi = lo * alpha_span, hi / alpha_span
    if lo >= hi:
        raise ContractError("scale band too narrow for the requested alpha span")
    u = rng.standard_normal((n, prior.dim))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = np.exp(rng.uniform(np.log(lo), np.log(hi), size=n))
    return u * r[:, None]
