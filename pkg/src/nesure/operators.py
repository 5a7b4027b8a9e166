"""Linear measurement operators and pixel-permutation transform groups.

Measurements are kept in embedded form: ``A x`` has the image's shape with zeros
at dropped coordinates, so ``A`` is a diagonal 0/1 projection and its own
adjoint.  This lets measurements be fed straight to a denoiser.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

OPERATOR_KINDS = ("identity", "inpaint_mask", "bayer_cfa")


def _check_shape(x, image_shape):
    x = np.asarray(x, dtype=np.float64)
    if tuple(x.shape[-3:]) != tuple(image_shape) or x.ndim not in (3, 4):
        raise ContractError(f"array of shape {x.shape} does not match operator image shape {tuple(image_shape)}")
    return x


@dataclass(frozen=True, eq=False)
class LinearOperator:
    kind: str
    image_shape: tuple
    mask: np.ndarray = None

    def __post_init__(self):
        if self.kind not in OPERATOR_KINDS:
            raise ContractError(f"unknown operator kind {self.kind!r}")
        object.__setattr__(self, "image_shape", tuple(int(v) for v in self.image_shape))
        if self.kind == "identity":
            object.__setattr__(self, "mask", None)
        else:
            if self.mask is None:
                raise ContractError(f"{self.kind} operator needs a mask")
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != self.image_shape:
                raise ContractError(f"mask shape {mask.shape} != image shape {self.image_shape}")
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)

    @property
    def operator_id(self):
        return self.kind

    @property
    def rank(self):
        return int(np.prod(self.image_shape)) if self.mask is None else int(self.mask.sum())

    def keep_map(self):
        return np.ones(self.image_shape, dtype=bool) if self.mask is None else self.mask

    def apply(self, x):
        x = _check_shape(x, self.image_shape)
        return x.copy() if self.mask is None else np.where(self.mask, x, 0.0)

    def adjoint(self, z):
        return self.apply(z)

    def __call__(self, x):
        return self.apply(x)


def identity(image_shape):
    return LinearOperator("identity", image_shape)


def inpaint_mask(image_shape, keep=0.7, seed=0):
    """Random pixel mask keeping exactly ``round(keep * H * W)`` pixel sites.

    Each site receives one seeded uniform draw and the sites with the smallest
    draws are kept; all channels of a site share its fate.
    """
    if not 0.0 < keep <= 1.0:
        raise ContractError("keep fraction must lie in (0, 1]")
    c, h, w = image_shape
    draws = np.random.default_rng(seed).random(h * w)
    n_keep = int(round(keep * h * w))
    site = np.zeros(h * w, dtype=bool)
    site[np.argsort(draws, kind="stable")[:n_keep]] = True
    mask = np.broadcast_to(site.reshape(1, h, w), (c, h, w))
    return LinearOperator("inpaint_mask", image_shape, mask)


def bayer_cfa(image_shape):
    """RGGB colour filter array anchored at pixel (0, 0); needs 3 channels."""
    c, h, w = image_shape
    if c != 3:
        raise ContractError("bayer_cfa needs an RGB image shape")
    rows = np.arange(h)[:, None] % 2
    cols = np.arange(w)[None, :] % 2
    mask = np.stack([(rows == 0) & (cols == 0),
                     (rows + cols) == 1,
                     (rows == 1) & (cols == 1)])
    return LinearOperator("bayer_cfa", image_shape, mask)


def make_operator(kind, image_shape, keep=0.7, seed=0):
    if kind == "identity":
        return identity(image_shape)
    if kind == "inpaint_mask":
        return inpaint_mask(image_shape, keep, seed)
    if kind == "bayer_cfa":
        return bayer_cfa(image_shape)
    raise ContractError(f"unknown operator kind {kind!r}")


def apply(op, x):
    return op.apply(x)


def adjoint(op, z):
    return op.adjoint(z)


# Group elements are tuples of primitive moves applied left to right:
# ("shift", dy, dx), ("rot", k), ("flip", axis).

def _apply_move(move, x, inverse=False):
    kind = move[0]
    if kind == "shift":
        dy, dx = (-move[1], -move[2]) if inverse else move[1:]
        return np.roll(x, (dy, dx), axis=(-2, -1))
    if kind == "rot":
        k = (-move[1] if inverse else move[1]) % 4
        return np.rot90(x, k, axes=(-2, -1))
    if kind == "flip":
        return np.flip(x, axis=move[1])
    raise ContractError(f"unknown move {move!r}")


@dataclass(frozen=True)
class TransformGroup:
    kind: str
    image_shape: tuple
    elements: tuple = field(repr=False)

    def __len__(self):
        return len(self.elements)

    @property
    def size(self):
        return len(self.elements)

    def _element(self, g):
        if not 0 <= int(g) < len(self.elements):
            raise ContractError(f"group index {g} out of range for |G| = {len(self.elements)}")
        return self.elements[int(g)]

    def transform(self, g, x):
        x = _check_shape(x, self.image_shape)
        for move in self._element(g):
            x = _apply_move(move, x)
        return np.ascontiguousarray(x)

    def inverse_transform(self, g, x):
        x = _check_shape(x, self.image_shape)
        for move in reversed(self._element(g)):
            x = _apply_move(move, x, inverse=True)
        return np.ascontiguousarray(x)


def circular_shifts(image_shape, stride=1):
    """All circular translations, or every ``stride``-th offset on each axis."""
    _, h, w = image_shape
    elements = tuple(((("shift", dy, dx),)) for dy in range(0, h, stride) for dx in range(0, w, stride))
    return TransformGroup("circular_shifts", tuple(image_shape), elements)


def rotations90(image_shape):
    if image_shape[1] != image_shape[2]:
        raise ContractError("90-degree rotations need square images")
    return TransformGroup("rotations90", tuple(image_shape), tuple((("rot", k),) for k in range(4)))


def flips(image_shape):
    elements = ((), (("flip", -1),), (("flip", -2),), (("flip", -1), ("flip", -2)))
    return TransformGroup("flips", tuple(image_shape), elements)


def product(first, second):
    """Direct product; element ``(a, b)`` applies ``second[b]`` then ``first[a]``."""
    if first.image_shape != second.image_shape:
        raise ContractError("product of groups over different image shapes")
    elements = tuple(eb + ea for ea in first.elements for eb in second.elements)
    return TransformGroup("product", first.image_shape, elements)


def make_group(kind, image_shape, stride=1):
    if kind == "circular_shifts":
        return circular_shifts(image_shape, stride)
    if kind == "rotations90":
        return rotations90(image_shape)
    if kind == "flips":
        return flips(image_shape)
    if kind == "rotations90+flips":
        return product(rotations90(image_shape), flips(image_shape))
    raise ContractError(f"unknown group kind {kind!r}")


def transform(group, g, x):
    return group.transform(g, x)


def inverse_transform(group, g, x):
    return group.inverse_transform(g, x)


@dataclass(frozen=True)
class VirtualOperator:
    """The composition ``A T_g``."""

    op: LinearOperator
    group: TransformGroup
    g: int

    @property
    def image_shape(self):
        return self.op.image_shape

    def apply(self, x):
        return self.op.apply(self.group.transform(self.g, x))

    def adjoint(self, z):
        return self.group.inverse_transform(self.g, self.op.adjoint(z))

    def keep_map(self):
        """Image-space coordinates observed through this virtual operator."""
        return self.group.inverse_transform(self.g, self.op.keep_map().astype(np.float64)) > 0.5

    def __call__(self, x):
        return self.apply(x)


def virtual_operator(op, group, g):
    group._element(g)
    if op.image_shape != group.image_shape:
        raise ContractError("operator and group act on different image shapes")
    return VirtualOperator(op, group, int(g))
