"""Complex image container, pointwise complex arithmetic and the centered
orthonormal 2-D Fourier transform.

Arrays are plain ``numpy.float64`` ndarrays. A :class:`ComplexImage` keeps
the real and imaginary planes separately because the network consumes them
as two real channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, ShapeMismatchError

__all__ = [
    "ComplexImage",
    "fft2_centered",
    "ifft2_centered",
    "fft2c",
    "ifft2c",
    "cadd",
    "cmul",
    "cmul_conj",
    "cscale",
    "cconj",
    "inner",
]


def _frozen(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class ComplexImage:
    """An H x W complex image stored as separate real/imag planes."""

    re: np.ndarray
    im: np.ndarray

    def __post_init__(self):
        re = _frozen(self.re)
        im = _frozen(self.im)
        if re.ndim != 2:
            raise InvalidArgumentError(f"ComplexImage needs a 2-D plane, got shape {re.shape}")
        if re.shape != im.shape:
            raise ShapeMismatchError(f"re {re.shape} and im {im.shape} differ")
        if re.shape[0] < 1 or re.shape[1] < 1:
            raise InvalidArgumentError(f"empty image {re.shape}")
        object.__setattr__(self, "re", re)
        object.__setattr__(self, "im", im)

    @classmethod
    def from_complex(cls, z) -> "ComplexImage":
        z = np.asarray(z)
        return cls(np.real(z), np.imag(z))

    @classmethod
    def zeros(cls, height: int, width: int) -> "ComplexImage":
        return cls(np.zeros((height, width)), np.zeros((height, width)))

    @property
    def shape(self) -> tuple[int, int]:
        return self.re.shape

    @property
    def height(self) -> int:
        return self.re.shape[0]

    @property
    def width(self) -> int:
        return self.re.shape[1]

    def to_complex(self) -> np.ndarray:
        return self.re + 1j * self.im

    def abs(self) -> np.ndarray:
        return np.hypot(self.re, self.im)

    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.re**2) + np.sum(self.im**2)))

    def equals(self, other: "ComplexImage") -> bool:
        """Bitwise equality of both planes."""
        return (
            self.shape == other.shape
            and np.array_equal(self.re, other.re)
            and np.array_equal(self.im, other.im)
        )


def _check_same(a: ComplexImage, b: ComplexImage):
    if a.shape != b.shape:
        raise ShapeMismatchError(f"shapes {a.shape} and {b.shape} differ")


# Array-level transforms over the last two axes. ifftshift moves the centered
# DC sample (floor(H/2), floor(W/2)) to the corner for odd sizes too.
def fft2c(x: np.ndarray) -> np.ndarray:
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise InvalidArgumentError(f"cannot transform array of shape {x.shape}")
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.fft2(np.fft.ifftshift(x, axes=axes), norm="ortho"), axes=axes)


def ifft2c(x: np.ndarray) -> np.ndarray:
    if x.ndim < 2 or x.shape[-1] < 1 or x.shape[-2] < 1:
        raise InvalidArgumentError(f"cannot transform array of shape {x.shape}")
    axes = (-2, -1)
    return np.fft.fftshift(np.fft.ifft2(np.fft.ifftshift(x, axes=axes), norm="ortho"), axes=axes)


def fft2_centered(img: ComplexImage) -> ComplexImage:
    """Unitary 2-D DFT with the DC term at ``(H // 2, W // 2)``."""
    return ComplexImage.from_complex(fft2c(img.to_complex()))


def ifft2_centered(img: ComplexImage) -> ComplexImage:
    """Inverse (and adjoint) of :func:`fft2_centered`."""
    return ComplexImage.from_complex(ifft2c(img.to_complex()))


def cadd(a: ComplexImage, b: ComplexImage) -> ComplexImage:
    _check_same(a, b)
    return ComplexImage(a.re + b.re, a.im + b.im)


def cmul(a: ComplexImage, b: ComplexImage) -> ComplexImage:
    _check_same(a, b)
    return ComplexImage(a.re * b.re - a.im * b.im, a.re * b.im + a.im * b.re)


def cmul_conj(a: ComplexImage, b: ComplexImage) -> ComplexImage:
    """Pointwise ``a * conj(b)``."""
    _check_same(a, b)
    return ComplexImage(a.re * b.re + a.im * b.im, a.im * b.re - a.re * b.im)


def cconj(a: ComplexImage) -> ComplexImage:
    return ComplexImage(a.re, -a.im)


def cscale(a: ComplexImage, s: complex) -> ComplexImage:
    s = complex(s)
    return ComplexImage(s.real * a.re - s.imag * a.im, s.real * a.im + s.imag * a.re)


def inner(a, b) -> complex:
    """Complex inner product ``sum(conj(a) * b)`` over images or lists of images."""
    if isinstance(a, ComplexImage):
        a, b = [a], [b]
    if len(a) != len(b):
        raise ShapeMismatchError(f"{len(a)} vs {len(b)} images")
    total = 0j
    for u, v in zip(a, b):
        _check_same(u, v)
        total += complex(np.vdot(u.to_complex(), v.to_complex()))
    return total
