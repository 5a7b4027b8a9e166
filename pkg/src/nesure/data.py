"""Synthetic datasets, frozen-noise measurement simulation and dataset files.

Clean images sit behind a firewall.  Inside :func:`training_scope` in
self-supervised mode, reading :attr:`Dataset.images` raises
:class:`~nesure.errors.AuditViolation`.  A supervised baseline must say so
explicitly by turning ``dataset.firewall`` off.
"""

import contextlib
import contextvars
import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _binio
from .errors import AuditViolation, ChecksumError, ContractError, FormatError, VersionError
from .operators import LinearOperator

DATASET_MAGIC = b"EQDL"
DATASET_VERSION = 1

_SCOPE = contextvars.ContextVar("nesure_training_scope", default=None)


@contextlib.contextmanager
def training_scope(mode="self-supervised"):
    """Mark the enclosed code as a training path of the given mode."""
    token = _SCOPE.set(mode)
    try:
        yield
    finally:
        _SCOPE.reset(token)


def current_scope():
    return _SCOPE.get()


@dataclass
class Dataset:
    _images: np.ndarray = field(repr=False)
    generator_tag: str
    seed: int
    params: dict = field(default_factory=dict)
    firewall: bool = True

    def __post_init__(self):
        imgs = np.asarray(self._images, dtype=np.float64)
        if imgs.ndim != 4:
            raise ContractError("dataset images must be stacked as (N, C, H, W)")
        self._images = imgs

    @property
    def images(self):
        if self.firewall and _SCOPE.get() == "self-supervised":
            raise AuditViolation("clean images read inside a self-supervised training scope")
        return self._images

    @property
    def shape(self):
        return tuple(self._images.shape[1:])

    def __len__(self):
        return self._images.shape[0]

    @property
    def value_range(self):
        if len(self) == 0:
            return (0.0, 0.0)
        return (float(self._images.min()), float(self._images.max()))

    def subset(self, n):
        return Dataset(self._images[:n], self.generator_tag, self.seed, dict(self.params), self.firewall)


def _image_rng(seed, index):
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


@dataclass(frozen=True)
class DeadLeavesParams:
    rmin: float = 1.0
    rmax: float = 16.0
    exponent: float = 3.0
    intensity: tuple = (0.0, 1.0)
    max_disks: int = 8192
    chunk: int = 256

    def validate(self):
        if not 0 < self.rmin < self.rmax:
            raise ContractError("dead-leaves radii need 0 < rmin < rmax")
        if self.exponent <= 1:
            raise ContractError("radius power-law exponent must exceed 1")
        lo, hi = self.intensity
        if hi < lo:
            raise ContractError("intensity range is inverted")


def _powerlaw_radii(rng, n, rmin, rmax, exponent):
    # inverse CDF of p(r) ~ r^-exponent on [rmin, rmax]
    a = 1.0 - exponent
    u = rng.random(n)
    return (rmin ** a + u * (rmax ** a - rmin ** a)) ** (1.0 / a)


def _dead_leaves_image(rng, shape, p):
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    py = yy.ravel().astype(np.float64)
    px = xx.ravel().astype(np.float64)
    img = np.zeros((c, h * w))
    open_idx = np.arange(h * w)
    drawn = 0
    lo, hi = p.intensity
    while open_idx.size and drawn < p.max_disks:
        k = p.chunk
        r = _powerlaw_radii(rng, k, p.rmin, p.rmax, p.exponent)
        cy = rng.uniform(0, h, k)
        cx = rng.uniform(0, w, k)
        colors = rng.uniform(lo, hi, (k, c))
        dy = np.abs(py[open_idx][None, :] - cy[:, None])
        dx = np.abs(px[open_idx][None, :] - cx[:, None])
        dy = np.minimum(dy, h - dy)
        dx = np.minimum(dx, w - dx)
        hit = dy * dy + dx * dx <= (r * r)[:, None]
        got = hit.any(axis=0)
        first = np.argmax(hit[:, got], axis=0)
        img[:, open_idx[got]] = colors[first].T
        open_idx = open_idx[~got]
        drawn += k
    if open_idx.size:
        img[:, open_idx] = rng.uniform(lo, hi, (c, 1))
    return img.reshape(shape)


def generate_dead_leaves(n_images, shape, seed, params=None):
    """Occlusion images of uniformly coloured disks with power-law radii.

    Disks wrap around the borders so the ensemble is exactly invariant to
    circular shifts.  Image ``i`` depends only on ``(seed, i)``.
    """
    params = params or DeadLeavesParams()
    params.validate()
    shape = tuple(int(v) for v in shape)
    imgs = np.zeros((n_images,) + shape)
    for i in range(n_images):
        imgs[i] = _dead_leaves_image(_image_rng(seed, i), shape, params)
    return Dataset(imgs, "dead_leaves", int(seed), params.__dict__.copy())


@dataclass(frozen=True)
class GsmParams:
    spectrum_exponent: float = 2.0
    tau0: float = 0.05
    ratio: float = 2.0
    levels: int = 4
    beta: float = 0.0
    offset: float = 0.0

    def validate(self):
        if self.tau0 <= 0 or self.ratio <= 1 or self.levels < 1:
            raise ContractError("GSM params need tau0 > 0, ratio > 1, levels >= 1")

    def scales(self):
        return self.tau0 * float(self.ratio) ** np.arange(self.levels)

    def scale_weights(self):
        w = float(self.ratio) ** (-float(self.beta) * np.arange(self.levels))
        return w / w.sum()


def gsm_spectrum(shape, exponent):
    """Per-frequency power of the unit-variance texture field (DC removed)."""
    _, h, w = shape
    f = np.sqrt(np.fft.fftfreq(h)[:, None] ** 2 + np.fft.fftfreq(w)[None, :] ** 2)
    power = np.where(f > 0, np.maximum(f, 1.0 / max(h, w)) ** (-exponent), 0.0)
    return power * (h * w) / power.sum()


def generate_gsm_textures(n_images, shape, seed, params=None):
    """Gaussian fields with a power-law spectrum times a per-image scale.

    The scale is drawn from ``tau0 * ratio**k`` with weights ``ratio**(-beta k)``;
    each field has unit expected per-pixel variance before scaling.
    """
    params = params or GsmParams()
    params.validate()
    shape = tuple(int(v) for v in shape)
    amp = np.sqrt(gsm_spectrum(shape, params.spectrum_exponent))
    scales, weights = params.scales(), params.scale_weights()
    imgs = np.zeros((n_images,) + shape)
    for i in range(n_images):
        rng = _image_rng(seed, i)
        s = scales[rng.choice(scales.size, p=weights)]
        white = rng.standard_normal(shape)
        field_ = np.fft.ifft2(np.fft.fft2(white) * amp).real
        imgs[i] = params.offset + s * field_
    return Dataset(imgs, "gsm_textures", int(seed), params.__dict__.copy())


def gsm_mmse(y, sigma, shape, params):
    """Exact posterior mean for :func:`generate_gsm_textures` data under Gaussian noise."""
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 3
    yb = (y[None] if single else y) - params.offset
    power = gsm_spectrum(shape, params.spectrum_exponent)
    n = int(np.prod(shape))
    yf = np.fft.fft2(yb)
    # |FFT|^2 / n of white noise with variance v has mean v per frequency
    pw = np.abs(yf) ** 2 / n
    logp = []
    for s in params.scales():
        var = s * s * power + sigma * sigma
        logp.append(-0.5 * np.sum(np.log(var) + pw / var, axis=(1, 2, 3)))
    logp = np.array(logp).T + np.log(params.scale_weights())
    resp = np.exp(logp - logp.max(axis=1, keepdims=True))
    resp /= resp.sum(axis=1, keepdims=True)
    out = np.zeros_like(yb)
    for k, s in enumerate(params.scales()):
        gain = s * s * power / (s * s * power + sigma * sigma)
        out += resp[:, k, None, None, None] * np.fft.ifft2(yf * gain).real
    out += params.offset
    return out[0] if single else out


def box_muller_noise(master_seed, index, count):
    """Standard normals from a counter-based Philox stream keyed by ``(master_seed, index)``."""
    gen = np.random.Generator(np.random.Philox(key=[int(master_seed) & (2 ** 64 - 1), int(index)]))
    pairs = (count + 1) // 2
    u = gen.random(2 * pairs)
    u1 = 1.0 - u[0::2]
    u2 = u[1::2]
    rad = np.sqrt(-2.0 * np.log(u1))
    z = np.empty(2 * pairs)
    z[0::2] = rad * np.cos(2 * np.pi * u2)
    z[1::2] = rad * np.sin(2 * np.pi * u2)
    return z[:count]


@dataclass(frozen=True)
class MeasurementRecord:
    y: np.ndarray
    image_index: int
    sigma_n: float
    operator_id: str
    noise_seed: int


@dataclass
class MeasurementSet:
    """Frozen noisy measurements of a dataset through one operator."""

    y: np.ndarray
    op: LinearOperator
    sigma_n: float
    master_seed: int
    generator_tag: str = ""
    dataset_seed: int = 0

    def __len__(self):
        return self.y.shape[0]

    @property
    def shape(self):
        return tuple(self.y.shape[1:])

    def record(self, i):
        return MeasurementRecord(self.y[i], i, self.sigma_n, self.op.operator_id, noise_seed(self.master_seed, i))

    @property
    def records(self):
        return [self.record(i) for i in range(len(self))]

    def payload_hash(self):
        return hashlib.sha256(np.ascontiguousarray(self.y, dtype="<f8").tobytes()).hexdigest()

    def subset(self, n):
        return MeasurementSet(self.y[:n], self.op, self.sigma_n, self.master_seed, self.generator_tag,
                              self.dataset_seed)


def noise_seed(master_seed, index):
    """64-bit identifier of image ``index``'s noise stream (reporting only)."""
    digest = hashlib.sha256(struct.pack("<QQ", int(master_seed) & (2 ** 64 - 1), int(index))).digest()
    return int.from_bytes(digest[:8], "little")


def simulate_measurements(dataset, op, sigma_n, master_seed):
    """``y_i = A (x_i + sigma_n eta_i)`` with ``eta_i`` keyed by ``(master_seed, i)``.

    The noise of image ``i`` never depends on iteration order, so every epoch,
    restart or reshuffle sees the same measurements.
    """
    if sigma_n < 0:
        raise ContractError("sigma_n must be non-negative")
    if tuple(op.image_shape) != dataset.shape:
        raise ContractError(f"operator shape {op.image_shape} does not match dataset shape {dataset.shape}")
    x = dataset._images
    n_px = int(np.prod(dataset.shape))
    y = np.empty_like(x)
    for i in range(len(dataset)):
        eta = box_muller_noise(master_seed, i, n_px).reshape(dataset.shape)
        y[i] = op.apply(x[i] + sigma_n * eta)
    return MeasurementSet(y, op, float(sigma_n), int(master_seed), dataset.generator_tag, dataset.seed)


def _write(path, header, planes, mask=None):
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [DATASET_MAGIC, _binio.pack_u32(DATASET_VERSION), _binio.pack_u32(len(head)), head,
             np.ascontiguousarray(planes, dtype="<f8").tobytes()]
    if mask is not None:
        parts.append(np.packbits(np.asarray(mask, dtype=bool).ravel()).tobytes())
    with open(path, "wb") as fh:
        fh.write(_binio.with_crc(b"".join(parts)))


def _read(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16 or blob[:4] != DATASET_MAGIC:
        raise FormatError(f"{path}: not a dataset file (bad magic or truncated)")
    reader = _binio.Reader(blob, 4)
    version = reader.u32()
    if version != DATASET_VERSION:
        raise VersionError(f"{path}: unsupported dataset version {version}")
    body = _binio.verify_crc(blob)
    reader = _binio.Reader(body, 8)
    header = json.loads(reader.take(reader.u32()).decode("utf-8"))
    shape = tuple(header["shape"])
    count = int(header["count"])
    n = count * int(np.prod(shape))
    planes = np.frombuffer(reader.take(8 * n), dtype="<f8").astype(np.float64).reshape((count,) + shape)
    mask = None
    if header.get("has_mask"):
        bits = int(np.prod(shape))
        mask = np.unpackbits(np.frombuffer(reader.take((bits + 7) // 8), dtype=np.uint8))[:bits]
        mask = mask.astype(bool).reshape(shape)
    if not reader.at_end():
        raise FormatError(f"{path}: trailing bytes after payload")
    return header, planes, mask


def save_dataset(dataset, path):
    lo, hi = dataset.value_range
    header = {"kind": "dataset", "shape": list(dataset.shape), "count": len(dataset), "seed": dataset.seed,
              "generator_tag": dataset.generator_tag, "params": _jsonable(dataset.params),
              "value_range": [lo, hi], "has_mask": False}
    _write(path, header, dataset._images)


def load_dataset(path):
    header, planes, _ = _read(path)
    if header.get("kind") != "dataset":
        raise FormatError(f"{path}: holds {header.get('kind')!r}, not a clean dataset")
    return Dataset(planes, header["generator_tag"], int(header["seed"]), header.get("params", {}))


def save_measurements(meas, path):
    op = meas.op
    header = {"kind": "measurements", "shape": list(meas.shape), "count": len(meas),
              "seed": meas.dataset_seed, "generator_tag": meas.generator_tag, "operator_id": op.operator_id,
              "sigma_n": meas.sigma_n, "master_seed": meas.master_seed, "has_mask": op.mask is not None}
    _write(path, header, meas.y, op.mask)


def load_measurements(path):
    header, planes, mask = _read(path)
    if header.get("kind") != "measurements":
        raise FormatError(f"{path}: holds {header.get('kind')!r}, not measurements")
    op = LinearOperator(header["operator_id"], tuple(header["shape"]), mask)
    return MeasurementSet(planes, op, float(header["sigma_n"]), int(header["master_seed"]),
                          header.get("generator_tag", ""), int(header.get("seed", 0)))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


__all__ = [
    "ChecksumError", "Dataset", "DeadLeavesParams", "GsmParams", "MeasurementRecord", "MeasurementSet",
    "box_muller_noise", "generate_dead_leaves", "generate_gsm_textures", "gsm_mmse", "load_dataset",
    "load_measurements", "save_dataset", "save_measurements", "simulate_measurements", "training_scope",
]
