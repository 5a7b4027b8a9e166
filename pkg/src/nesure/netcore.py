"""Sigma-conditioned convolutional denoiser with hand-written reverse mode.

Images are ``float64`` arrays shaped ``(C, H, W)`` or batched ``(B, C, H, W)``.
Internally activations are kept channels-last so each 3x3 convolution is a sum
of nine dense matmuls.  Padding is circular, which makes every layer commute
exactly with circular shifts of the input.

Any object exposing ``forward(y, sigma, keep)``, ``backward(trace, upstream,
tape, wrt_input)``, ``params`` and ``__call__`` can be trained by the losses in
:mod:`nesure.losses`; besides :class:`Denoiser` this module provides a few tiny
reference models used as oracles in tests.
"""

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _binio
from .errors import ChecksumError, ContractError, FormatError, NumericError, VersionError

CHECKPOINT_MAGIC = b"NESURECK"
CHECKPOINT_VERSION = 1

_ACTIVATIONS = ("relu", "identity")


def _as_batch(y, image_shape=None):
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 3
    if single:
        y = y[None]
    if y.ndim != 4:
        raise ContractError(f"expected (C,H,W) or (B,C,H,W) input, got shape {y.shape}")
    if image_shape is not None and tuple(y.shape[1:]) != tuple(image_shape):
        raise ContractError(f"input shape {y.shape[1:]} does not match model shape {tuple(image_shape)}")
    if not np.all(np.isfinite(y)):
        raise NumericError("non-finite input rejected")
    return y, single


def _as_sigma(sigma, batch):
    s = np.asarray(sigma, dtype=np.float64)
    if s.ndim == 0:
        s = np.full(batch, float(s))
    s = s.reshape(-1)
    if s.shape[0] != batch:
        raise ContractError(f"got {s.shape[0]} noise levels for a batch of {batch}")
    if not np.all(s > 0) or not np.all(np.isfinite(s)):
        raise ContractError("sigma must be positive and finite")
    return s


class GradientTape:
    """Per-parameter gradient accumulators, keyed like ``model.params``."""

    def __init__(self, model=None):
        self.grads = {}
        if model is not None:
            self.grads = {k: np.zeros_like(v) for k, v in model.params.items()}

    def __getitem__(self, name):
        return self.grads[name]

    def __iter__(self):
        return iter(self.grads)

    def items(self):
        return self.grads.items()

    def add(self, name, value):
        if name in self.grads:
            self.grads[name] += value
        else:
            self.grads[name] = np.array(value, dtype=np.float64)

    def merge(self, other, scale=1.0):
        for k, v in other.items():
            self.add(k, scale * v)
        return self

    def scaled(self, factor):
        out = GradientTape()
        out.grads = {k: factor * v for k, v in self.grads.items()}
        return out

    def zero(self):
        for v in self.grads.values():
            v[...] = 0.0

    def check_aligned(self, model):
        for k, v in self.grads.items():
            if k not in model.params or model.params[k].shape != v.shape:
                raise ContractError(f"gradient {k!r} is not aligned with model parameters")

    def is_finite(self):
        return all(np.all(np.isfinite(v)) for v in self.grads.values())

    def vector(self, model):
        return np.concatenate([self.grads.get(k, np.zeros_like(p)).ravel() for k, p in model.params.items()])


class _Model:
    """Shared parameter plumbing for the differentiable models."""

    params: dict

    @property
    def param_count(self):
        return int(sum(p.size for p in self.params.values()))

    def __call__(self, y, sigma):
        return self.forward(y, sigma)

    def get_vector(self):
        return np.concatenate([p.ravel() for p in self.params.values()])

    def set_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        i = 0
        for p in self.params.values():
            p[...] = vec[i:i + p.size].reshape(p.shape)
            i += p.size

    def copy(self):
        raise NotImplementedError


@dataclass(frozen=True)
class ConvLayer:
    in_channels: int
    out_channels: int
    kernel: int = 3
    activation: str = "relu"
    film: bool = True

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ContractError("kernel size must be odd and positive")


def _im2col(x, k):
    # x: (B,H,W,C) -> (B*H*W, k*k*C), column order (i, j, c), circular padding
    b, h, w, c = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="wrap") if pad else x
    win = sliding_window_view(xp, (k, k), axis=(1, 2))
    return win.transpose(0, 1, 2, 4, 5, 3).reshape(b * h * w, k * k * c)


def _circular_conv(x, wmat, col=None):
    """Circular 'same' correlation; ``wmat`` is (k,k,C,F).  Returns ``(out, col)``."""
    b, h, w, _ = x.shape
    k, f = wmat.shape[0], wmat.shape[3]
    if col is None:
        col = _im2col(x, k)
    return (col @ wmat.reshape(-1, f)).reshape(b, h, w, f), col


def _circular_conv_backward(col, wmat, dout, need_dx=True):
    """Weight gradient and (optionally) input gradient of :func:`_circular_conv`."""
    k, c, f = wmat.shape[0], wmat.shape[2], wmat.shape[3]
    d2 = dout.reshape(-1, f)
    dw = (col.T @ d2).reshape(wmat.shape)
    if not need_dx:
        return dw, None
    # adjoint of circular correlation: correlate with the flipped, transposed kernel
    wflip = wmat[::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, c)
    b, h, w, _ = dout.shape
    dx = _im2col(dout, k) @ wflip
    return dw, dx.reshape(b, h, w, c)


class Denoiser(_Model):
    """Stack of circular convolutions with FiLM conditioning on ``log(sigma)``.

    Hidden layer ``l`` computes ``act((conv(h) + b) * (1 + a_l s + c_l) + d_l s)``
    with ``s = log(sigma)`` and per-channel ``a_l, c_l, d_l``.  With
    ``residual=True`` the input is added to the last layer's output.
    """

    def __init__(self, layers, image_shape, residual=False, params=None):
        self.layers = [l if isinstance(l, ConvLayer) else ConvLayer(*l) for l in layers]
        self.image_shape = tuple(int(v) for v in image_shape)
        self.residual = bool(residual)
        if not self.layers:
            raise ContractError("a denoiser needs at least one layer")
        if self.layers[0].in_channels != self.image_shape[0] or self.layers[-1].out_channels != self.image_shape[0]:
            raise ContractError("first/last layer channels must match the image channels")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_channels != b.in_channels:
                raise ContractError("consecutive layer channel counts disagree")
        self.params = {}
        for i, l in enumerate(self.layers):
            self.params[f"conv{i}.weight"] = np.zeros((l.out_channels, l.in_channels, l.kernel, l.kernel))
            self.params[f"conv{i}.bias"] = np.zeros(l.out_channels)
            if l.film:
                for name in ("scale_w", "scale_b", "shift_w"):
                    self.params[f"film{i}.{name}"] = np.zeros(l.out_channels)
        if params is not None:
            for k, v in params.items():
                if k not in self.params or self.params[k].shape != np.shape(v):
                    raise ContractError(f"parameter {k!r} does not fit this architecture")
                self.params[k] = np.array(v, dtype=np.float64)

    @classmethod
    def build(cls, image_shape, features=16, depth=4, kernel=3, residual=True, seed=0):
        """He-initialized residual network; the output layer starts near zero."""
        c = image_shape[0]
        if depth < 2:
            raise ContractError("depth must be at least 2")
        widths = [c] + [features] * (depth - 1) + [c]
        layers = [ConvLayer(widths[i], widths[i + 1], kernel,
                            "relu" if i < depth - 1 else "identity", i < depth - 1)
                  for i in range(depth)]
        model = cls(layers, image_shape, residual=residual)
        rng = np.random.default_rng(seed)
        for i, l in enumerate(layers):
            fan_in = l.in_channels * l.kernel * l.kernel
            std = np.sqrt(2.0 / fan_in)
            if i == depth - 1:
                std *= 0.1
            model.params[f"conv{i}.weight"][...] = rng.normal(0.0, std, model.params[f"conv{i}.weight"].shape)
        return model

    def copy(self):
        return Denoiser(self.layers, self.image_shape, self.residual,
                        {k: v.copy() for k, v in self.params.items()})

    def forward(self, y, sigma, keep=False):
        yb, single = _as_batch(y, self.image_shape)
        s = np.log(_as_sigma(sigma, yb.shape[0]))[:, None, None, None]
        h = yb.transpose(0, 2, 3, 1)
        caches = []
        for i, l in enumerate(self.layers):
            wmat = self.params[f"conv{i}.weight"].transpose(2, 3, 1, 0)
            z, col = _circular_conv(h, wmat)
            z += self.params[f"conv{i}.bias"]
            gain = None
            z2 = z
            if l.film:
                gain = 1.0 + self.params[f"film{i}.scale_w"] * s + self.params[f"film{i}.scale_b"]
                z2 = z * gain + self.params[f"film{i}.shift_w"] * s
            out = np.maximum(z2, 0.0) if l.activation == "relu" else z2
            if keep:
                caches.append((col, z, gain, z2))
            h = out
        out = h.transpose(0, 3, 1, 2)
        if self.residual:
            out = out + yb
        if not np.all(np.isfinite(out)):
            raise NumericError("denoiser produced non-finite output")
        result = out[0] if single else out
        if keep:
            return result, {"caches": caches, "s": s, "single": single}
        return result

    def backward(self, trace, upstream, tape=None, wrt_input=False):
        """Accumulate d<upstream, D(y, sigma)>/d(theta) into ``tape``.

        Returns ``(tape, dy)``; ``dy`` is ``None`` unless ``wrt_input``.
        """
        caches, s = trace["caches"], trace["s"]
        up = np.asarray(upstream, dtype=np.float64)
        if trace["single"]:
            up = up[None]
        expected = (caches[0][1].shape[0],) + self.image_shape
        if up.shape != expected:
            raise ContractError(f"upstream shape {up.shape} does not match output shape {expected}")
        if tape is None:
            tape = GradientTape(self)
        else:
            tape.check_aligned(self)
        dh = up.transpose(0, 2, 3, 1)
        for i in reversed(range(len(self.layers))):
            l = self.layers[i]
            col, z, gain, z2 = caches[i]
            dz2 = dh * (z2 > 0.0) if l.activation == "relu" else dh
            if l.film:
                tape.add(f"film{i}.scale_w", np.einsum("bhwf,bhwf,b->f", dz2, z, s[:, 0, 0, 0]))
                tape.add(f"film{i}.scale_b", np.einsum("bhwf,bhwf->f", dz2, z))
                tape.add(f"film{i}.shift_w", np.einsum("bhwf,b->f", dz2, s[:, 0, 0, 0]))
                dz = dz2 * gain
            else:
                dz = dz2
            tape.add(f"conv{i}.bias", dz.sum(axis=(0, 1, 2)))
            wmat = self.params[f"conv{i}.weight"].transpose(2, 3, 1, 0)
            need_dx = i > 0 or wrt_input
            dw, dh = _circular_conv_backward(col, wmat, dz, need_dx)
            tape.add(f"conv{i}.weight", dw.transpose(3, 2, 0, 1))
        dy = None
        if wrt_input:
            dy = dh.transpose(0, 3, 1, 2)
            if self.residual:
                dy = dy + up
            if trace["single"]:
                dy = dy[0]
        return tape, dy


class ScalarGain(_Model):
    """``D(z, sigma) = c * z`` with one trainable gain."""

    def __init__(self, gain=1.0):
        self.params = {"gain": np.array([float(gain)])}

    def copy(self):
        return ScalarGain(self.params["gain"][0])

    def forward(self, y, sigma, keep=False):
        y = np.asarray(y, dtype=np.float64)
        out = self.params["gain"][0] * y
        return (out, {"y": y}) if keep else out

    def backward(self, trace, upstream, tape=None, wrt_input=False):
        tape = tape if tape is not None else GradientTape(self)
        up = np.asarray(upstream, dtype=np.float64)
        tape.add("gain", np.array([np.sum(up * trace["y"])]))
        return tape, (self.params["gain"][0] * up if wrt_input else None)


class LinearDenoiser(_Model):
    """``D(z, sigma) = W vec(z)`` for a dense matrix ``W`` over flattened images."""

    def __init__(self, weight, image_shape):
        self.image_shape = tuple(image_shape)
        n = int(np.prod(self.image_shape))
        weight = np.array(weight, dtype=np.float64)
        if weight.shape != (n, n):
            raise ContractError(f"weight must be {n}x{n}")
        self.params = {"weight": weight}

    def copy(self):
        return LinearDenoiser(self.params["weight"].copy(), self.image_shape)

    def forward(self, y, sigma, keep=False):
        yb, single = _as_batch(y, self.image_shape)
        flat = yb.reshape(yb.shape[0], -1)
        out = (flat @ self.params["weight"].T).reshape(yb.shape)
        out = out[0] if single else out
        return (out, {"flat": flat, "single": single}) if keep else out

    def backward(self, trace, upstream, tape=None, wrt_input=False):
        tape = tape if tape is not None else GradientTape(self)
        up = np.asarray(upstream, dtype=np.float64).reshape(trace["flat"].shape)
        tape.add("weight", up.T @ trace["flat"])
        dy = None
        if wrt_input:
            dy = (up @ self.params["weight"]).reshape((-1,) + self.image_shape)
            dy = dy[0] if trace["single"] else dy
        return tape, dy


class FixedDenoiser(_Model):
    """Wrap a parameter-free callable ``fn(y, sigma)`` (e.g. an MMSE oracle)."""

    def __init__(self, fn):
        self.fn = fn
        self.params = {}

    def copy(self):
        return FixedDenoiser(self.fn)

    def forward(self, y, sigma, keep=False):
        out = np.asarray(self.fn(np.asarray(y, dtype=np.float64), sigma), dtype=np.float64)
        return (out, None) if keep else out

    def backward(self, trace, upstream, tape=None, wrt_input=False):
        if wrt_input:
            raise ContractError("fixed denoisers do not provide input gradients")
        return (tape if tape is not None else GradientTape()), None


def forward(model, y, sigma):
    """Evaluate ``D_theta(y, sigma)``."""
    return model.forward(y, sigma)


def backward(model, tape, y, sigma, upstream, wrt_input=False):
    """Reverse-mode gradient of ``<upstream, D_theta(y, sigma)>``.

    Gradients are accumulated into ``tape`` (a fresh tape when ``None``).
    Returns the tape, or ``(tape, dy)`` when ``wrt_input`` is set.
    """
    _, trace = model.forward(y, sigma, keep=True)
    tape, dy = model.backward(trace, upstream, tape, wrt_input)
    return (tape, dy) if wrt_input else tape


@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(model, tape, state):
    """Apply one bias-corrected Adam update in place; returns ``(model, state)``."""
    if not tape.is_finite():
        bad = [k for k, g in tape.items() if not np.all(np.isfinite(g))]
        raise NumericError(f"non-finite gradient at step {state.step + 1} in {bad}")
    tape.check_aligned(model)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in model.params.items():
        g = tape.grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return model, state


_ACT_CODES = {"relu": 0.0, "identity": 1.0}


def save_checkpoint(model, state, path, version=CHECKPOINT_VERSION):
    """Write ``model`` (a :class:`Denoiser`) and optimizer ``state`` to ``path``."""
    arch = np.array([[l.in_channels, l.out_channels, l.kernel, _ACT_CODES[l.activation], float(l.film)]
                     for l in model.layers], dtype=np.float64)
    blocks = [
        ("arch.image_shape", np.array(model.image_shape, dtype=np.float64)),
        ("arch.residual", np.array([float(model.residual)])),
        ("arch.layers", arch),
    ]
    blocks += [(f"param.{k}", v) for k, v in model.params.items()]
    if state is not None:
        blocks.append(("opt.scalars", np.array([state.step, state.lr, state.beta1, state.beta2, state.eps])))
        blocks += [(f"opt.m.{k}", v) for k, v in state.m.items()]
        blocks += [(f"opt.v.{k}", v) for k, v in state.v.items()]
    body = b"".join([CHECKPOINT_MAGIC, _binio.pack_u32(version), _binio.pack_u32(len(blocks))]
                    + [_binio.pack_block(n, a) for n, a in blocks])
    with open(path, "wb") as fh:
        fh.write(_binio.with_crc(body))


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, state_or_None)``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 20 or blob[:8] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic or truncated)")
    version = _binio.Reader(blob, 8).u32()
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    body = _binio.verify_crc(blob)
    reader = _binio.Reader(body, 12)
    blocks = dict(reader.block() for _ in range(reader.u32()))
    if not reader.at_end():
        raise FormatError(f"{path}: trailing bytes after last block")
    try:
        codes = {v: k for k, v in _ACT_CODES.items()}
        layers = [ConvLayer(int(r[0]), int(r[1]), int(r[2]), codes[float(r[3])], bool(r[4]))
                  for r in np.atleast_2d(blocks["arch.layers"])]
        params = {k[len("param."):]: v for k, v in blocks.items() if k.startswith("param.")}
        model = Denoiser(layers, blocks["arch.image_shape"].astype(int), bool(blocks["arch.residual"][0]), params)
    except (KeyError, ContractError) as exc:
        raise FormatError(f"{path}: inconsistent checkpoint contents ({exc})") from exc
    state = None
    if "opt.scalars" in blocks:
        step, lr, b1, b2, eps = blocks["opt.scalars"]
        state = OptimizerState(lr=float(lr), beta1=float(b1), beta2=float(b2), eps=float(eps), step=int(step),
                               m={k[6:]: v for k, v in blocks.items() if k.startswith("opt.m.")},
                               v={k[6:]: v for k, v in blocks.items() if k.startswith("opt.v.")})
    return model, state


__all__ = [
    "ChecksumError", "ConvLayer", "Denoiser", "FixedDenoiser", "GradientTape", "LinearDenoiser",
    "OptimizerState", "ScalarGain", "adam_step", "backward", "forward", "load_checkpoint", "save_checkpoint",
]
