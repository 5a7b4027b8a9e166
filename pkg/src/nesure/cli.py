"""Command-line front end.

Every subcommand reads one INI config (``--config``; defaults otherwise) plus
``--set section.key=value`` overrides, and works inside
``<root>/<run name>/``.  The root comes from ``--root``, then ``$NESURE_RUNS``,
then ``./runs``.  Exit codes: 0 success, 2 config error, 3 numeric abort,
4 IO error.
"""

import argparse
import csv
import glob
import json
import os
import sys


from . import __version__, config, data, experiments, metrics, operators, pnm, train
from .errors import AuditViolation, ConfigError, ContractError, NumericError
from .netcore import load_checkpoint
from .oracle import ScaleMixturePrior, equivariance_sweep
from .sampler import SamplerConfig, default_sigma_min, denoise_at, karras_schedule, posterior_sample

ENV_ROOT = "NESURE_RUNS"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class RunDir:
    """Layout ``<root>/<name>/{config.echo, metadata.json, data/, checkpoints/, csv/, images/}``."""

    def __init__(self, root, name):
        self.path = os.path.join(root, name)

    def sub(self, *parts):
        return os.path.join(self.path, *parts)

    def claim(self, *parts, allow_existing=False):
        """Create an output directory, refusing one that already holds files."""
        d = self.sub(*parts)
        if os.path.isdir(d) and os.listdir(d) and not allow_existing:
            raise FileExistsError(f"refusing to reuse non-empty output directory {d}")
        os.makedirs(d, exist_ok=True)
        return d

    def record(self, stage, cfg, extra=None):
        """Echo the config and add this stage to the run metadata."""
        os.makedirs(self.path, exist_ok=True)
        with open(self.sub("config.echo"), "w") as fh:
            fh.write(cfg.echo())
        meta_path = self.sub("metadata.json")
        meta = {"version": __version__, "stages": {}}
        if os.path.exists(meta_path):
            with open(meta_path) as fh:
                meta = json.load(fh)
        entry = {"version": __version__, "overrides": cfg.overrides, "config": cfg.as_dict(),
                 "config_source": cfg.source_text}
        entry.update(extra or {})
        meta["stages"][stage] = entry
        with open(meta_path, "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)


def _write_rows(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def _gen_params(cfg):
    d = cfg["dataset"]
    if d["generator"] == "gsm_textures":
        return data.GsmParams(d["gsm_spectrum_exponent"], d["gsm_tau0"], d["gsm_ratio"], d["gsm_levels"],
                              d["gsm_beta"], d["gsm_offset"])
    return data.DeadLeavesParams(rmin=d["dl_rmin"], rmax=d["dl_rmax"], exponent=d["dl_exponent"])


def _operator(cfg):
    o = cfg["operator"]
    return operators.make_operator(o["kind"], tuple(cfg["dataset"]["shape"]), keep=o["keep"], seed=o["mask_seed"])


def _model_spec(cfg):
    m = cfg["model"]
    return experiments.ModelSpec(m["features"], m["depth"], m["kernel"], m["residual"], m["seed"])


def _train_config(cfg):
    l, o = cfg["loss"], cfg["optimizer"]
    from .losses import SureConfig

    return train.TrainConfig(
        mode=l["mode"], steps=o["steps"], batch_size=o["batch_size"], lr=o["lr"], lr_schedule=o["lr_schedule"],
        seed=o["seed"], alpha_min=l["alpha_min"], alpha_max=l["alpha_max"], mu_max=l["mu_max"],
        weights=(l["w_sure"], l["w_ei"]), sure=SureConfig(l["delta"], l["probe"]),
        sigma_t_min=l["sigma_t_min"], sigma_t_max=l["sigma_t_max"], ei_sigma_min=l["ei_sigma_min"],
        checkpoint_every=o["checkpoint_every"])


def _range(dataset):
    lo, hi = dataset.value_range
    return (lo, hi) if hi > lo else (lo - 0.5, lo + 0.5)


def _save_images(directory, images, value_range):
    ext = "pgm" if images.shape[1] == 1 else "ppm"
    for i, img in enumerate(images):
        pnm.write_pnm(os.path.join(directory, f"{i:05d}.{ext}"), img, value_range)


def cmd_gen(cfg, run, args):
    """Write train/test datasets and their frozen-noise measurements."""
    out = run.claim("data")
    d = cfg["dataset"]
    shape = tuple(d["shape"])
    op = _operator(cfg)
    params = _gen_params(cfg)
    m = cfg["measurement"]
    train_ds = experiments.generate(d["generator"], d["n"], shape, d["seed"], params)
    test_ds = experiments.generate(d["generator"], d["n_test"], shape, d["test_seed"], params)
    data.save_dataset(train_ds, os.path.join(out, "train.eqdl"))
    data.save_dataset(test_ds, os.path.join(out, "test.eqdl"))
    train_meas = data.simulate_measurements(train_ds, op, m["sigma_n"], m["master_seed"])
    test_meas = data.simulate_measurements(test_ds, op, m["sigma_n"], m["test_master_seed"])
    data.save_measurements(train_meas, os.path.join(out, "train_meas.eqdl"))
    data.save_measurements(test_meas, os.path.join(out, "test_meas.eqdl"))
    run.record("gen", cfg, {"train_payload_sha256": train_meas.payload_hash(),
                            "test_payload_sha256": test_meas.payload_hash()})
    print(f"wrote {len(train_ds)} train / {len(test_ds)} test images to {out}")


def _latest_checkpoint(directory):
    steps = sorted(glob.glob(os.path.join(directory, "step_*.ckpt")))
    return steps[-1] if steps else None


def cmd_train(cfg, run, args):
    tcfg = _train_config(cfg)
    ckpt_dir = run.claim("checkpoints", allow_existing=args.resume)
    csv_dir = run.claim("csv", "train", allow_existing=args.resume)
    trace_path = os.path.join(csv_dir, "trace.csv")
    shape = tuple(cfg["dataset"]["shape"])
    model, state, trace = None, None, []
    if args.resume:
        path = _latest_checkpoint(ckpt_dir)
        if path is None:
            raise FileNotFoundError(f"no step checkpoint to resume from in {ckpt_dir}")
        model, state = load_checkpoint(path)
        if os.path.exists(trace_path):
            trace = [r for r in train.read_trace(trace_path) if r["step"] < state.step]
        print(f"resuming from {path} at step {state.step}")
    if model is None:
        model = _model_spec(cfg).build(shape)
    firewall = {"mode": tcfg.mode, "firewall": tcfg.mode != "supervised"}
    dataset = measurements = group = None
    if tcfg.mode == "supervised":
        dataset = data.load_dataset(run.sub("data", "train.eqdl"))
        dataset.firewall = False
    else:
        measurements = data.load_measurements(run.sub("data", "train_meas.eqdl"))
        if measurements.shape != shape:
            raise ConfigError(f"[dataset] shape: {shape} does not match measurements {measurements.shape}")
        if tcfg.mode == "ne-sure+ei":
            o = cfg["operator"]
            group = operators.make_group(o["group"], shape, stride=o["group_stride"])
    every = tcfg.checkpoint_every

    def on_step(row):
        if every and (row["step"] + 1) % every == 0:
            train.write_trace(trace_path, trace)

    try:
        train.train(model, tcfg, measurements=measurements, dataset=dataset, group=group, state=state,
                    trace=trace, checkpoint_dir=ckpt_dir, callback=on_step)
    finally:
        train.write_trace(trace_path, trace)
        run.record("train", cfg, {"firewall": firewall, "resumed": bool(args.resume), "steps_logged": len(trace)})
    print(f"trained {tcfg.mode} to step {tcfg.steps}; final loss {trace[-1]['loss']:.6g}" if trace else "no steps run")


def _load_model(run, args):
    path = args.checkpoint or run.sub("checkpoints", "final.ckpt")
    model, _ = load_checkpoint(path)
    return model, path


def cmd_denoise(cfg, run, args):
    sigmas = tuple(args.sigma_eval) if args.sigma_eval else cfg["eval"]["sigma_eval"]
    if any(s <= 0 for s in sigmas):
        raise ConfigError("sigma_eval: noise levels must be positive")
    sigma_ref = cfg["eval"]["sigma_ref"] or None
    model, _ = _load_model(run, args)
    csv_dir = run.claim("csv", "denoise")
    img_dir = run.claim("images", "denoise")
    if args.measurements:
        meas = data.load_measurements(args.measurements)
        reference = data.load_dataset(args.reference) if args.reference else None
        inputs = {s: meas for s in sigmas}
    else:
        reference = data.load_dataset(run.sub("data", "test.eqdl"))
        op = data.load_measurements(run.sub("data", "test_meas.eqdl")).op
        seed = cfg["measurement"]["test_master_seed"]
        inputs = {s: data.simulate_measurements(reference, op, s, seed) for s in sigmas}
    curve = []
    for s in sigmas:
        meas = inputs[s]
        est = denoise_at(model, meas.op.adjoint(meas.y), s, sigma_ref)
        sub = os.path.join(img_dir, f"sigma_{s:g}")
        os.makedirs(sub)
        rng = _range(reference) if reference is not None else (float(est.min()), float(est.max()) + 1e-12)
        _save_images(sub, est, rng)
        data.save_dataset(data.Dataset(est, "denoised", 0, {"sigma_eval": s}), os.path.join(sub, "recon.eqdl"))
        if reference is not None:
            rep = metrics.MetricReport.compute(reference.images, est, with_spectrum=False)
            rep.write_csv(os.path.join(csv_dir, f"metrics_sigma_{s:g}.csv"))
            agg = rep.aggregate()
            curve.append({"sigma_eval": s, "mse": agg["mse"], "psnr": agg["psnr"], "ssim": agg["ssim"]})
            print(f"sigma_eval={s:g}: mse={agg['mse']:.4e} psnr={agg['psnr']:.2f} dB ssim={agg['ssim']:.4f}")
    _write_rows(os.path.join(csv_dir, "curve.csv"), curve)
    run.record("denoise", cfg, {"sigma_eval": list(sigmas), "sigma_ref": sigma_ref})


def _schedule(cfg, sigma_n):
    sc = cfg["schedule"]
    hi = sc["sigma_max"] or sigma_n
    lo = sc["sigma_min"] or default_sigma_min(sigma_n)
    return karras_schedule(lo, hi, sc["gamma"], sc["K"])


def cmd_sample(cfg, run, args):
    model, _ = _load_model(run, args)
    meas = data.load_measurements(args.measurements or run.sub("data", "test_meas.eqdl"))
    reference = data.load_dataset(args.reference or run.sub("data", "test.eqdl"))
    n = min(cfg["schedule"]["n_samples"], len(meas))
    sc = cfg["schedule"]
    scfg = SamplerConfig(_schedule(cfg, meas.sigma_n), use_heun=sc["heun"], seed=sc["seed"],
                         noise_rule=sc["noise_rule"])
    csv_dir = run.claim("csv", "sample")
    img_dir = run.claim("images", "sample")
    y = meas.y[:n]
    clean = reference.images[:n]
    samples = posterior_sample(model, y, meas.op, scfg, sigma_ref=cfg["eval"]["sigma_ref"] or None)
    one_step = denoise_at(model, meas.op.adjoint(y), meas.sigma_n)
    _save_images(img_dir, samples, _range(reference))
    data.save_dataset(data.Dataset(samples, "posterior_samples", sc["seed"], {}), os.path.join(img_dir, "recon.eqdl"))
    rep = metrics.MetricReport.compute(clean, samples)
    d_samp = metrics.spectrum_distance(samples, clean)
    d_one = metrics.spectrum_distance(one_step, clean)
    rep.write_csv(os.path.join(csv_dir, "metrics.csv"), {"spectrum_distance": d_samp})
    for tag, imgs in (("samples", samples), ("one_step", one_step), ("truth", clean)):
        r, p = metrics.radial_spectrum(imgs)
        metrics.write_curve_csv(os.path.join(csv_dir, f"spectrum_{tag}.csv"), r, p, ("radius", "power"))
    _write_rows(os.path.join(csv_dir, "summary.csv"),
                [{"n": n, "K": scfg.schedule.K, "gamma": scfg.schedule.gamma, "sigma_max": scfg.schedule.sigma_max,
                  "sigma_min": scfg.schedule.sigma_min, "spectrum_distance_samples": d_samp,
                  "spectrum_distance_one_step": d_one, "psnr_samples": rep.aggregate()["psnr"],
                  "psnr_one_step": metrics.psnr(clean, one_step)}])
    run.record("sample", cfg, {"n_samples": n, "seed": sc["seed"]})
    print(f"{n} samples: spectrum distance {d_samp:.4f} (one-step {d_one:.4f})")


def cmd_oracle(cfg, run, args):
    o = cfg["oracle"]
    prior = ScaleMixturePrior(o["tau0"], o["ratio"], o["levels"], o["beta"], o["dim"])
    report, identity = equivariance_sweep(prior, o["sigmas"], o["sigma_ratio"], o["n_points"], cfg["run"]["seed"])
    csv_dir = run.claim("csv", "oracle")
    rows = report.rows() + [dict(r, monotone_decreasing="") for r in identity.rows()]
    _write_rows(os.path.join(csv_dir, "equivariance.csv"), rows)
    sure = experiments.sure_unbiasedness(prior.base, o["sure_sigma"], o["sure_draws"], cfg["run"]["seed"])
    _write_rows(os.path.join(csv_dir, "sure_unbiasedness.csv"), [sure.row()])
    run.record("oracle-check", cfg, {"monotone_decreasing": report.monotone_decreasing,
                                     "sure_within_3se": sure.passed})
    for r in report.rows():
        print(f"eps({r['sigma']:g}, {r['sigma_prime']:g}) = {r['epsilon']:.6g}")
    print(f"monotone decreasing: {report.monotone_decreasing}")
    print(f"SURE gap {sure.gap:.4g} (3 SE = {3 * sure.se:.4g}): {'ok' if sure.passed else 'FAIL'}")


def cmd_bench(cfg, run, args):
    b = cfg["bench"]
    if len(b["n_values"]) < 3:
        raise ConfigError("[bench] n_values: at least three N values are needed for a slope fit")
    tcfg = _train_config(cfg)
    mode = tcfg.mode if tcfg.mode != "supervised" else "ne-sure"
    csv_dir = run.claim("csv", "bench")
    result = experiments.sample_complexity(
        tuple(cfg["dataset"]["shape"]), b["n_values"], cfg["measurement"]["sigma_n"], b["sigma_t"], mode, tcfg,
        _model_spec(cfg), b["n_test"], cfg["dataset"]["seed"], cfg["measurement"]["master_seed"],
        cfg["dataset"]["test_seed"], cfg["dataset"]["generator"], _gen_params(cfg), log=print)
    _write_rows(os.path.join(csv_dir, "excess_mse.csv"), result.rows())
    _write_rows(os.path.join(csv_dir, "slopes.csv"), result.slope_rows())
    run.record("bench-complexity", cfg, {"slopes": {str(k): v for k, v in result.slopes.items()}})
    for s, k in result.slopes.items():
        print(f"sigma_t={s:g}: log-log slope {k:.3f}")


def cmd_eval(cfg, run, args):
    """Recompute metrics, spectra and patch-norm histograms for a stage's reconstructions."""
    e = cfg["eval"]
    recon_path = args.recon or run.sub("images", args.stage, "recon.eqdl")
    recon = data.load_dataset(recon_path).images
    reference = data.load_dataset(args.reference or run.sub("data", "test.eqdl")).images[:len(recon)]
    csv_dir = run.claim("csv", "eval", args.stage)
    rep = metrics.MetricReport.compute(reference, recon)
    if not e["ssim"]:
        rep.ssim = [float("nan")] * len(rep.mse)
    rep.write_csv(os.path.join(csv_dir, "metrics.csv"))
    if e["spectrum"]:
        r, p = metrics.radial_spectrum(recon)
        metrics.write_curve_csv(os.path.join(csv_dir, "spectrum.csv"), r, p, ("radius", "power"))
    if e["histogram"]:
        counts, edges = metrics.patch_norm_histogram(recon, e["patch_size"], e["bins"])
        centers = 0.5 * (edges[:-1] + edges[1:])
        metrics.write_curve_csv(os.path.join(csv_dir, "patch_norms.csv"), centers, counts, ("norm", "count"))
    run.record(f"eval:{args.stage}", cfg, {"recon": recon_path})
    agg = rep.aggregate()
    print(f"{args.stage}: mse={agg['mse']:.4e} psnr={agg['psnr']:.2f} dB ssim={agg['ssim']:.4f}")


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "denoise": cmd_denoise,
    "sample": cmd_sample,
    "oracle-check": cmd_oracle,
    "bench-complexity": cmd_bench,
    "eval": cmd_eval,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="nesure", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI config file (defaults when omitted)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config field; may be repeated")
    common.add_argument("--root", help=f"output root (default ${ENV_ROOT} or ./runs)")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate datasets and frozen-noise measurements")
    p = sub.add_parser("train", parents=[common], help="train a denoiser")
    p.add_argument("--resume", action="store_true", help="continue from the latest step checkpoint")
    for name, text in (("denoise", "one-step denoising at chosen noise levels"),
                       ("sample", "posterior sampling on test measurements")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", help="checkpoint file (default: the run's final checkpoint)")
        p.add_argument("--measurements", help="measurement file (default: the run's test measurements)")
        p.add_argument("--reference", help="clean dataset for metrics")
        if name == "denoise":
            p.add_argument("--sigma-eval", type=float, nargs="+", help="noise levels (default [eval] sigma_eval)")
    sub.add_parser("oracle-check", parents=[common], help="equivariance and SURE-unbiasedness oracle reports")
    sub.add_parser("bench-complexity", parents=[common], help="excess MSE against training-set size")
    p = sub.add_parser("eval", parents=[common], help="metrics for a stage's saved reconstructions")
    p.add_argument("--stage", default="denoise/sigma_0.075", help="images/<stage>/recon.eqdl to score")
    p.add_argument("--recon", help="explicit reconstruction file")
    p.add_argument("--reference", help="clean dataset (default: the run's test set)")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = config.load_config(args.config, args.set) if args.config else config.default_config(args.set)
        root = args.root or os.environ.get(ENV_ROOT) or "runs"
        run = RunDir(root, cfg.name)
        COMMANDS[args.command](cfg, run, args)
    except (ConfigError, ContractError, AuditViolation) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
