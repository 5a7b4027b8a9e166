"""Scaled-down experiment drivers shared by the CLI and the acceptance suite."""

import math
from dataclasses import dataclass, field

import numpy as np

from . import data, losses, metrics, operators, train
from .errors import ContractError
from .netcore import Denoiser, FixedDenoiser
from .sampler import SamplerConfig, default_sigma_min, denoise_at, karras_schedule, posterior_sample


def oracle_denoiser(prior):
    """Wrap a prior's exact posterior mean as an image-shaped fixed denoiser."""

    def fn(y, sigma):
        flat = y.reshape(y.shape[0], -1)
        s = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (y.shape[0],))
        out = np.empty_like(flat)
        for level in np.unique(s):
            rows = s == level
            out[rows] = prior.posterior_mean(flat[rows], float(level))
        return out.reshape(y.shape)

    return FixedDenoiser(fn)


@dataclass
class SureReport:
    sigma: float
    dim: int
    n_draws: int
    mean_sure: float
    noise_term: float
    mean_mse: float
    gap: float
    se: float

    @property
    def passed(self):
        return abs(self.gap) < 3.0 * self.se

    def row(self):
        return {"sigma": self.sigma, "dim": self.dim, "n_draws": self.n_draws, "mean_sure": self.mean_sure,
                "noise_term": self.noise_term, "mean_mse": self.mean_mse, "gap": self.gap, "se": self.se,
                "within_3se": self.passed}


def sure_unbiasedness(prior, sigma, n_draws=20000, seed=0, cfg=None, chunk=100):
    """Compare the MC-SURE value with ``n sigma^2 +`` true MSE for the oracle denoiser.

    Draws are processed in chunks of ``chunk`` through :func:`losses.sure_loss`.
    The standard error comes from the spread of per-chunk gaps.
    """
    cfg = cfg or losses.SureConfig()
    if n_draws < 2 * chunk:
        raise ContractError("need at least two chunks of draws")
    rng = np.random.default_rng(seed)
    model = oracle_denoiser(prior)
    d = prior.dim
    sure_vals, mse_vals = [], []
    for _ in range(n_draws // chunk):
        x = prior.sample(rng, chunk).reshape(chunk, 1, 1, d)
        y = x + sigma * rng.standard_normal(x.shape)
        probe = losses.draw_probe(rng, y.shape, cfg.probe_kind)
        res = losses.sure_loss(model, y, sigma, cfg, probe, with_grad=False)
        sure_vals.append(res.value)
        mse_vals.append(float(np.mean(np.sum((model(y, sigma) - x) ** 2, axis=(1, 2, 3)))))
    sure_vals, mse_vals = np.array(sure_vals), np.array(mse_vals)
    noise = d * sigma * sigma
    gaps = sure_vals - noise - mse_vals
    return SureReport(float(sigma), d, len(gaps) * chunk, float(sure_vals.mean()), noise, float(mse_vals.mean()),
                      float(gaps.mean()), float(gaps.std(ddof=1) / math.sqrt(len(gaps))))


def loglog_slope(n_values, excess):
    """Least-squares slope of ``log(excess)`` against ``log(N)``; NaN if any excess <= 0."""
    n = np.asarray(n_values, dtype=np.float64)
    e = np.asarray(excess, dtype=np.float64)
    if n.size < 3:
        raise ContractError("a slope fit needs at least three N values")
    if np.any(e <= 0) or not np.all(np.isfinite(e)):
        return float("nan")
    return float(np.polyfit(np.log(n), np.log(e), 1)[0])


@dataclass
class ModelSpec:
    features: int = 16
    depth: int = 4
    kernel: int = 3
    residual: bool = True
    seed: int = 0

    def build(self, shape):
        return Denoiser.build(tuple(shape), self.features, self.depth, self.kernel, self.residual, self.seed)


def fit(mode, shape, spec, train_cfg, dataset=None, measurements=None, group=None, **kwargs):
    """Build a fresh model and train it with ``train_cfg`` (``mode`` overrides ``train_cfg.mode``)."""
    cfg = train.TrainConfig(**{**train_cfg.__dict__, "mode": mode})
    model = spec.build(shape)
    train.train(model, cfg, measurements=measurements, dataset=dataset, group=group, **kwargs)
    return model


def generate(generator, n, shape, seed, params=None):
    """Dispatch to a dataset generator by tag."""
    if generator == "gsm_textures":
        return data.generate_gsm_textures(n, shape, seed, params)
    if generator == "dead_leaves":
        return data.generate_dead_leaves(n, shape, seed, params)
    raise ContractError(f"unknown generator {generator!r}")


def gsm_oracle_mse(test, sigma, params, seed=0):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(round(sigma * 1e9))]))
    y = test + sigma * rng.standard_normal(test.shape)
    return float(np.mean((data.gsm_mmse(y, sigma, test.shape[1:], params) - test) ** 2))


@dataclass
class GeneralizationResult:
    sigma_eval: tuple
    mse: dict = field(default_factory=dict)
    oracle: dict = field(default_factory=dict)

    def ratio(self, mode, sigma):
        return self.mse[mode][sigma] / self.mse["supervised"][sigma]

    def rows(self):
        out = []
        for s in self.sigma_eval:
            row = {"sigma_eval": s, "oracle": self.oracle.get(s, float("nan"))}
            row.update({m: v[s] for m, v in self.mse.items()})
            out.append(row)
        return out


def generalization_experiment(shape=(1, 16, 16), n=5000, sigma_n=0.075, sigma_eval=(0.02, 0.05, 0.075),
                              train_cfg=None, spec=None, n_test=500, data_seed=1, noise_seed=7,
                              test_seed=99, gsm=None, modes=("supervised", "sure", "ne-sure")):
    """Train each mode on the same GSM set and measure one-step MSE at each ``sigma_eval``.

    The self-supervised models only see ``A(x + sigma_n eta)`` with frozen noise.
    The supervised baseline sees the clean images with fresh noise per step.
    Every model is evaluated directly at ``sigma_eval``.
    """
    gsm = gsm or data.GsmParams()
    spec = spec or ModelSpec()
    train_cfg = train_cfg or train.TrainConfig(steps=2000, lr=2e-3, lr_schedule="cosine", seed=3)
    ds = data.generate_gsm_textures(n, shape, data_seed, gsm)
    meas = data.simulate_measurements(ds, operators.identity(shape), sigma_n, noise_seed)
    test = data.generate_gsm_textures(n_test, shape, test_seed, gsm).images
    result = GeneralizationResult(tuple(sigma_eval))
    for mode in modes:
        clean = None
        if mode == "supervised":
            ds.firewall = False
            clean = ds
        model = fit(mode, shape, spec, train_cfg, dataset=clean, measurements=meas)
        ds.firewall = True
        result.mse[mode] = {s: train.evaluate_mse(model, test, s) for s in sigma_eval}
    result.oracle = {s: gsm_oracle_mse(test, s, gsm) for s in sigma_eval}
    return result


@dataclass
class ComplexityResult:
    n_values: tuple
    sigma_t: tuple
    reference: dict
    mse: dict
    slopes: dict

    def excess(self, n, s):
        return self.mse[n][s] - self.reference[s]

    def rows(self):
        return [{"sigma_t": s, "N": n, "mse": self.mse[n][s], "reference_mse": self.reference[s],
                 "excess_mse": self.excess(n, s)} for s in self.sigma_t for n in self.n_values]

    def slope_rows(self):
        return [{"sigma_t": s, "slope": self.slopes[s]} for s in self.sigma_t]


def sample_complexity(shape=(1, 16, 16), n_values=(500, 1000, 5000, 15000), sigma_n=0.05,
                      sigma_t=(0.02, 0.05, 0.1), mode="ne-sure", train_cfg=None, spec=None, n_test=1000,
                      data_seed=1, noise_seed=7, test_seed=99, generator="gsm_textures", gen_params=None,
                      log=None):
    """Excess one-step MSE against N, relative to a supervised model on the largest N.

    Levels above ``sigma_n`` are reached with the rescaling identity anchored at
    ``sigma_n``; the others are direct evaluations.
    """
    n_values = tuple(sorted(int(v) for v in n_values))
    if len(n_values) < 3:
        raise ContractError("sample-complexity sweep needs at least three N values")
    spec = spec or ModelSpec()
    train_cfg = train_cfg or train.TrainConfig(steps=2000, lr=2e-3, lr_schedule="cosine", seed=3)
    ds = generate(generator, n_values[-1], shape, data_seed, gen_params)
    meas = data.simulate_measurements(ds, operators.identity(shape), sigma_n, noise_seed)
    test = generate(generator, n_test, shape, test_seed, gen_params).images

    def score(model, anchor):
        return {s: train.evaluate_mse(model, test, s, sigma_ref=anchor if anchor and s > anchor else None)
                for s in sigma_t}

    ds.firewall = False
    ref_model = fit("supervised", shape, spec, train_cfg, dataset=ds)
    ds.firewall = True
    reference = score(ref_model, None)
    if log:
        log(f"reference {reference}")
    mse = {}
    for n in n_values:
        if mode == "supervised":
            clean = ds.subset(n)
            clean.firewall = False
            model = fit(mode, shape, spec, train_cfg, dataset=clean)
        else:
            model = fit(mode, shape, spec, train_cfg, measurements=meas.subset(n))
        mse[n] = score(model, sigma_n if mode != "supervised" else None)
        if log:
            log(f"N={n} {mse[n]}")
    slopes = {s: loglog_slope(n_values, [mse[n][s] - reference[s] for n in n_values]) for s in sigma_t}
    return ComplexityResult(n_values, tuple(sigma_t), reference, mse, slopes)


@dataclass
class InpaintingResult:
    psnr_missing_model: float
    psnr_missing_zero_fill: float
    spectrum_distance_samples: float
    spectrum_distance_one_step: float
    psnr_one_step: float
    psnr_samples: float

    @property
    def margin_db(self):
        return self.psnr_missing_model - self.psnr_missing_zero_fill

    def row(self):
        return dict(self.__dict__, margin_db=self.margin_db)


def masked_psnr(clean, estimate, missing, peak=1.0):
    sel = np.broadcast_to(missing, clean.shape)
    err = float(np.mean((clean[sel] - estimate[sel]) ** 2))
    return float("inf") if err == 0 else 10.0 * math.log10(peak * peak / err)


def inpainting_experiment(shape=(1, 16, 16), n=5000, sigma_n=0.075, keep=0.7, mask_seed=0, train_cfg=None,
                          spec=None, n_test=64, data_seed=1, noise_seed=7, test_seed=99, test_noise_seed=8,
                          sampler_seed=0, group_kind="circular_shifts", dl_params=None):
    """NE-SURE+EI inpainting on dead leaves with one fixed mask shared by every image."""
    spec = spec or ModelSpec()
    train_cfg = train_cfg or train.TrainConfig(steps=2000, lr=2e-3, lr_schedule="cosine", seed=3)
    op = operators.inpaint_mask(shape, keep, mask_seed)
    group = operators.make_group(group_kind, shape)
    ds = data.generate_dead_leaves(n, shape, data_seed, dl_params)
    meas = data.simulate_measurements(ds, op, sigma_n, noise_seed)
    model = fit("ne-sure+ei", shape, spec, train_cfg, measurements=meas, group=group)

    test = data.generate_dead_leaves(n_test, shape, test_seed, dl_params)
    tmeas = data.simulate_measurements(test, op, sigma_n, test_noise_seed)
    clean = test.images
    missing = ~op.keep_map()
    zero_fill = op.adjoint(tmeas.y)
    one_step = denoise_at(model, zero_fill, sigma_n)
    sched = karras_schedule(default_sigma_min(sigma_n), sigma_n)
    samples = posterior_sample(model, tmeas.y, op, SamplerConfig(sched, seed=sampler_seed))
    return InpaintingResult(
        psnr_missing_model=masked_psnr(clean, one_step, missing),
        psnr_missing_zero_fill=masked_psnr(clean, zero_fill, missing),
        spectrum_distance_samples=metrics.spectrum_distance(samples, clean),
        spectrum_distance_one_step=metrics.spectrum_distance(one_step, clean),
        psnr_one_step=metrics.psnr(clean, one_step),
        psnr_samples=metrics.psnr(clean, samples),
    )
