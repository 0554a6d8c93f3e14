"""Multicoil Cartesian MR encoding: masks, E = mask * F * S, its adjoint and
the least-squares data misfit."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, ShapeMismatchError
from .tensor_core import ComplexImage, fft2c, ifft2c

__all__ = [
    "SamplingMask",
    "CoilSensitivities",
    "KSpaceSample",
    "make_mask",
    "default_acs_size",
    "forward_E",
    "adjoint_E",
    "objective",
    "zero_filled",
]


@dataclass(frozen=True, eq=False)
class SamplingMask:
    keep: np.ndarray
    acs_size: int = 0

    def __post_init__(self):
        keep = np.array(self.keep, dtype=np.float64, copy=True)
        if keep.ndim != 2:
            raise InvalidArgumentError(f"mask must be 2-D, got {keep.shape}")
        if not np.all((keep == 0.0) | (keep == 1.0)):
            raise InvalidArgumentError("mask values must be 0 or 1")
        keep.flags.writeable = False
        object.__setattr__(self, "keep", keep)

    @property
    def shape(self):
        return self.keep.shape

    @property
    def num_kept(self) -> int:
        return int(self.keep.sum())


@dataclass(frozen=True, eq=False)
class CoilSensitivities:
    maps: tuple[ComplexImage, ...]

    def __post_init__(self):
        maps = tuple(self.maps)
        if not maps:
            raise InvalidArgumentError("need at least one coil")
        if any(m.shape != maps[0].shape for m in maps):
            raise ShapeMismatchError("coil maps differ in shape")
        object.__setattr__(self, "maps", maps)

    @classmethod
    def from_array(cls, maps) -> "CoilSensitivities":
        return cls(tuple(ComplexImage.from_complex(m) for m in np.asarray(maps)))

    @property
    def num_coils(self) -> int:
        return len(self.maps)

    @property
    def shape(self):
        return self.maps[0].shape

    def stack(self) -> np.ndarray:
        """Complex array of shape (C, H, W)."""
        return np.stack([m.to_complex() for m in self.maps])


@dataclass(frozen=True, eq=False)
class KSpaceSample:
    d: tuple[ComplexImage, ...]
    mask: SamplingMask
    sens: CoilSensitivities
    truth: ComplexImage | None = None

    def __post_init__(self):
        d = tuple(self.d)
        object.__setattr__(self, "d", d)
        if len(d) != self.sens.num_coils:
            raise ShapeMismatchError(f"{len(d)} k-space coils vs {self.sens.num_coils} maps")
        for dc in d:
            if dc.shape != self.mask.shape or dc.shape != self.sens.shape:
                raise ShapeMismatchError("k-space, mask and sensitivities disagree in shape")
        if self.truth is not None and self.truth.shape != self.mask.shape:
            raise ShapeMismatchError("truth shape differs from mask")

    def kspace(self) -> np.ndarray:
        return np.stack([dc.to_complex() for dc in self.d])


def default_acs_size(height: int, width: int) -> int:
    return 24 if min(height, width) >= 32 else 0


def make_mask(height: int, width: int, accel_row: int, accel_col: int, acs_size: int = 0) -> SamplingMask:
    """Regular lattice undersampling from index 0 plus a centered ACS square."""
    if height < 1 or width < 1:
        raise InvalidArgumentError(f"bad mask size {height}x{width}")
    if accel_row < 1 or accel_col < 1:
        raise InvalidArgumentError(f"acceleration must be >= 1, got {accel_row}x{accel_col}")
    if acs_size < 0 or acs_size > min(height, width):
        raise InvalidArgumentError(f"acs_size {acs_size} outside [0, {min(height, width)}]")
    keep = np.zeros((height, width))
    keep[::accel_row, ::accel_col] = 1.0
    if acs_size:
        r0 = height // 2 - acs_size // 2
        c0 = width // 2 - acs_size // 2
        keep[r0 : r0 + acs_size, c0 : c0 + acs_size] = 1.0
    return SamplingMask(keep, acs_size)


def _check(shape, sens: CoilSensitivities, mask: SamplingMask):
    if tuple(shape) != sens.shape or tuple(shape) != mask.shape:
        raise ShapeMismatchError(f"image {tuple(shape)}, sens {sens.shape}, mask {mask.shape}")


def forward_E(x: ComplexImage, sens: CoilSensitivities, mask: SamplingMask) -> list[ComplexImage]:
    _check(x.shape, sens, mask)
    k = fft2c(sens.stack() * x.to_complex()) * mask.keep
    # Multiplying by 0 leaves -0.0 or NaN behind; force exact zeros.
    k[:, mask.keep == 0] = 0.0
    return [ComplexImage.from_complex(kc) for kc in k]


def adjoint_E(d: Sequence[ComplexImage], sens: CoilSensitivities, mask: SamplingMask) -> ComplexImage:
    if len(d) != sens.num_coils:
        raise ShapeMismatchError(f"{len(d)} k-space coils vs {sens.num_coils} maps")
    for dc in d:
        _check(dc.shape, sens, mask)
    k = np.stack([dc.to_complex() for dc in d]) * mask.keep
    img = np.sum(np.conj(sens.stack()) * ifft2c(k), axis=0)
    return ComplexImage.from_complex(img)


def objective(x: ComplexImage, sample: KSpaceSample) -> float:
    """Squared data misfit ``sum_c ||d_c - (E x)_c||^2``."""
    ex = forward_E(x, sample.sens, sample.mask)
    total = 0.0
    for dc, ec in zip(sample.d, ex):
        total += float(np.sum((dc.re - ec.re) ** 2) + np.sum((dc.im - ec.im) ** 2))
    return total


def zero_filled(sample: KSpaceSample) -> ComplexImage:
    """The adjoint reconstruction E^H d used as network input."""
    return adjoint_E(sample.d, sample.sens, sample.mask)
