"""Distortion metrics, radial spectra and patch-norm histograms."""

import csv
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError

PSNR_SENTINEL = 999.0


def _pair(x, x_hat):
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ContractError(f"shape mismatch: {x.shape} vs {x_hat.shape}")
    return x, x_hat


def mse(x, x_hat):
    x, x_hat = _pair(x, x_hat)
    return float(np.mean((x - x_hat) ** 2))


def psnr(x, x_hat, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    if peak <= 0:
        raise ContractError("peak must be positive")
    err = mse(x, x_hat)
    if err == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / err))


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (r / sigma) ** 2)
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation over the last two axes
    rows = sliding_window_view(img, g.size, axis=-2) @ g
    return sliding_window_view(rows, g.size, axis=-1) @ g


def ssim(x, x_hat, window=11, window_sigma=1.5, peak=1.0, k1=0.01, k2=0.03):
    """Mean single-scale SSIM; colour images are scored per channel and averaged."""
    x, x_hat = _pair(x, x_hat)
    if x.ndim == 2:
        x, x_hat = x[None], x_hat[None]
    if x.shape[-1] < window or x.shape[-2] < window:
        raise ContractError(f"image {x.shape[-2:]} smaller than the {window}-tap window")
    g = gaussian_window(window, window_sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mx = _filter_valid(x, g)
    my = _filter_valid(x_hat, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(x_hat * x_hat, g) - my * my
    sxy = _filter_valid(x * x_hat, g) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(np.mean(smap))


def radial_spectrum(images):
    """Mean 2-D power per integer frequency radius, averaged over images and channels.

    Returns ``(radii, power)``; radius 0 is the DC bin.
    """
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.shape[-1] != imgs.shape[-2]:
        raise ContractError("radial spectrum needs square images")
    n = imgs.shape[-1]
    flat = imgs.reshape((-1, n, n))
    power = np.mean(np.abs(np.fft.fft2(flat)) ** 2, axis=0) / (n * n)
    f = np.fft.fftfreq(n) * n
    r = np.rint(np.sqrt(f[:, None] ** 2 + f[None, :] ** 2)).astype(int)
    counts = np.bincount(r.ravel())
    curve = np.bincount(r.ravel(), power.ravel()) / np.maximum(counts, 1)
    keep = np.arange(n // 2 + 1)
    return keep, curve[keep]


def spectrum_distance(images, reference, floor=1e-20):
    """Mean absolute log10-power gap between radial spectra, DC excluded."""
    _, p = radial_spectrum(images)
    _, q = radial_spectrum(reference)
    return float(np.mean(np.abs(np.log10(p[1:] + floor) - np.log10(q[1:] + floor))))


def patch_norms(images, patch_size):
    imgs = np.asarray(images, dtype=np.float64)
    if imgs.ndim == 3:
        imgs = imgs[None]
    b, c, h, w = imgs.shape
    ph, pw = h // patch_size, w // patch_size
    if ph == 0 or pw == 0:
        raise ContractError("patch larger than image")
    crop = imgs[:, :, :ph * patch_size, :pw * patch_size]
    blocks = crop.reshape(b, c, ph, patch_size, pw, patch_size)
    return np.sqrt(np.sum(blocks ** 2, axis=(1, 3, 5))).ravel()


def patch_norm_histogram(images, patch_size, bins=32):
    """Histogram of l2 norms of non-overlapping ``patch_size`` squares (all channels)."""
    norms = patch_norms(images, patch_size)
    if np.all(norms == norms[0]):
        v = norms[0]
        edges = np.array([v - 0.5, v + 0.5]) if v == 0 else np.array([v * 0.999, v * 1.001])
        return np.array([norms.size]), edges
    counts, edges = np.histogram(norms, bins=bins)
    return counts, edges


@dataclass
class MetricReport:
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    mse: list = field(default_factory=list)
    spectrum: tuple = None
    histogram: tuple = None

    @classmethod
    def compute(cls, clean, estimate, peak=1.0, with_spectrum=False):
        clean = np.asarray(clean, dtype=np.float64)
        estimate = np.asarray(estimate, dtype=np.float64)
        rep = cls()
        for x, xh in zip(clean, estimate):
            rep.mse.append(mse(x, xh))
            rep.psnr.append(psnr(x, xh, peak))
            rep.ssim.append(ssim(x, xh, peak=peak) if min(x.shape[-2:]) >= 11 else float("nan"))
        if with_spectrum:
            rep.spectrum = radial_spectrum(estimate)
        return rep

    def aggregate(self):
        m = float(np.mean(self.mse)) if self.mse else float("nan")
        return {"mse": m, "psnr": 10 * np.log10(1.0 / m) if m > 0 else float("inf"),
                "mean_psnr": float(np.mean(np.minimum(self.psnr, PSNR_SENTINEL))) if self.psnr else float("nan"),
                "ssim": float(np.nanmean(self.ssim)) if self.ssim else float("nan")}

    def write_csv(self, path, extra=None):
        """One row per image, aggregate row last; infinite PSNR is written as the sentinel."""
        extra = extra or {}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "mse", "psnr", "ssim"] + list(extra))
            for i, (m, p, s) in enumerate(zip(self.mse, self.psnr, self.ssim)):
                w.writerow([i, repr(m), repr(min(p, PSNR_SENTINEL)), repr(s)] + list(extra.values()))
            agg = self.aggregate()
            w.writerow(["all", repr(agg["mse"]), repr(min(agg["mean_psnr"], PSNR_SENTINEL)),
                        repr(agg["ssim"])] + list(extra.values()))


def write_curve_csv(path, x, y, header=("x", "y")):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for a, b in zip(x, y):
            w.writerow([repr(float(a)), repr(float(b))])
