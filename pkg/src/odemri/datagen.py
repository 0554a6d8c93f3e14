"""Synthetic multicoil datasets: ellipse phantoms with smooth phase, Gaussian
coil profiles, and noisy undersampled k-space.

Every random draw comes from a generator seeded by ``(seed, index, stream)``
so any sample can be regenerated on its own.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import odet
from .errors import CorruptFileError, InvalidArgumentError, MissingFileError, ShapeMismatchError
from .mri_model import CoilSensitivities, KSpaceSample, SamplingMask, forward_E, make_mask
from .tensor_core import ComplexImage, fft2c

__all__ = [
    "PhantomSpec",
    "DataConfig",
    "Dataset",
    "make_phantom",
    "raw_sensitivities",
    "make_sensitivities",
    "simulate_kspace",
    "generate_dataset",
    "write_dataset",
    "read_dataset",
    "MANIFEST_VERSION",
]

MANIFEST_VERSION = 1
MAX_MAGNITUDE = 1.2

# stream ids keep the per-purpose generators independent
_PHANTOM, _SENS, _NOISE = 0, 1, 2


def _rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), int(index), stream])


@dataclass(frozen=True)
class PhantomSpec:
    height: int = 32
    width: int = 32
    min_ellipses: int = 3
    max_ellipses: int = 8
    min_intensity: float = 0.2
    max_intensity: float = 1.0
    phase_order: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise InvalidArgumentError("phantoms need H, W >= 16")
        if not 1 <= self.min_ellipses <= self.max_ellipses:
            raise InvalidArgumentError("need 1 <= min_ellipses <= max_ellipses")
        if not 0 <= self.min_intensity <= self.max_intensity:
            raise InvalidArgumentError("need 0 <= min_intensity <= max_intensity")
        if not 0 <= self.phase_order <= 2:
            raise InvalidArgumentError("phase_order must be 0, 1 or 2")


def _grid(height, width):
    # normalized coordinates in [-1, 1) with 0 at the centered pixel
    y = (np.arange(height) - height // 2) / (height / 2)
    x = (np.arange(width) - width // 2) / (width / 2)
    return np.meshgrid(y, x, indexing="ij")


def make_phantom(spec: PhantomSpec, index: int) -> ComplexImage:
    """Random ellipse phantom; a pure function of ``(spec, index)``."""
    rng = _rng(spec.seed, index, _PHANTOM)
    yy, xx = _grid(spec.height, spec.width)
    n = int(rng.integers(spec.min_ellipses, spec.max_ellipses + 1))
    mag = np.zeros((spec.height, spec.width))
    for k in range(n):
        if k == 0:
            # large "head" outline so most of the field of view has signal
            cy, cx = rng.uniform(-0.1, 0.1, size=2)
            ay, ax = rng.uniform(0.6, 0.85, size=2)
        else:
            cy, cx = rng.uniform(-0.5, 0.5, size=2)
            ay, ax = rng.uniform(0.08, 0.45, size=2)
        angle = rng.uniform(0.0, np.pi)
        value = rng.uniform(spec.min_intensity, spec.max_intensity)
        c, s = np.cos(angle), np.sin(angle)
        u = (xx - cx) * c + (yy - cy) * s
        v = -(xx - cx) * s + (yy - cy) * c
        mag += value * ((u / ax) ** 2 + (v / ay) ** 2 <= 1.0)
    mag = np.clip(mag, 0.0, MAX_MAGNITUDE)

    terms = [(i, j) for i in range(spec.phase_order + 1) for j in range(spec.phase_order + 1 - i)]
    coef = rng.normal(size=len(terms))
    phi = sum(cf * yy**i * xx**j for cf, (i, j) in zip(coef, terms))
    peak = np.max(np.abs(phi))
    target = rng.uniform(0.0, np.pi / 4)
    if peak > 0:
        phi = phi * (target / peak)
    return ComplexImage(mag * np.cos(phi), mag * np.sin(phi))


def _coil_centers(height, width, num_coils):
    radius = 0.55 * min(height, width) / 2
    angles = 2 * np.pi * np.arange(num_coils) / num_coils
    cy = height // 2 + radius * np.sin(angles)
    cx = width // 2 + radius * np.cos(angles)
    return angles, cy, cx


def raw_sensitivities(height: int, width: int, num_coils: int, seed: int = 0) -> np.ndarray:
    """Unnormalized complex coil profiles, shape (C, H, W)."""
    if num_coils < 1:
        raise InvalidArgumentError("num_coils must be >= 1")
    if height < 1 or width < 1:
        raise InvalidArgumentError("bad image size")
    rng = _rng(seed, 0, _SENS)
    _, cy, cx = _coil_centers(height, width, num_coils)
    rr, cc = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    sigma = 0.5 * min(height, width)
    yy, xx = _grid(height, width)
    maps = np.empty((num_coils, height, width), dtype=np.complex128)
    for c in range(num_coils):
        mag = np.exp(-((rr - cy[c]) ** 2 + (cc - cx[c]) ** 2) / (2 * sigma**2))
        ky, kx = rng.uniform(-0.5, 0.5, size=2)
        phase = np.pi * (ky * yy + kx * xx) + 2 * np.pi * c / num_coils
        maps[c] = mag * np.exp(1j * phase)
    return maps


def make_sensitivities(height: int, width: int, num_coils: int, seed: int = 0) -> CoilSensitivities:
    """Gaussian coil profiles normalized so that sum_c |S_c|^2 == 1 per pixel."""
    raw = raw_sensitivities(height, width, num_coils, seed)
    sos = np.sqrt(np.sum(np.abs(raw) ** 2, axis=0))
    return CoilSensitivities.from_array(raw / sos)


def simulate_kspace(
    truth: ComplexImage,
    sens: CoilSensitivities,
    mask: SamplingMask,
    noise_sigma: float,
    seed,
) -> KSpaceSample:
    """d_c = mask * (F(S_c x) + n_c), n_c complex Gaussian with per-component std sigma."""
    if noise_sigma < 0:
        raise InvalidArgumentError("noise_sigma must be >= 0")
    if truth.shape != sens.shape or truth.shape != mask.shape:
        raise ShapeMismatchError("truth, sensitivities and mask disagree in shape")
    if noise_sigma == 0:
        return KSpaceSample(tuple(forward_E(truth, sens, mask)), mask, sens, truth)
    rng = np.random.default_rng(seed)
    shape = (sens.num_coils,) + truth.shape
    noise = noise_sigma * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
    k = fft2c(sens.stack() * truth.to_complex()) + noise
    k = k * mask.keep
    k[:, mask.keep == 0] = 0.0
    return KSpaceSample(tuple(ComplexImage.from_complex(kc) for kc in k), mask, sens, truth)


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 64
    n_test: int = 16
    height: int = 32
    width: int = 32
    coils: int = 4
    noise_sigma: float = 0.005
    accel_row: int = 2
    accel_col: int = 2
    acs_size: int = 8
    phase_order: int = 2
    min_ellipses: int = 3
    max_ellipses: int = 8
    seed: int = 0

    def validate(self):
        from .errors import ConfigError

        for name in ("n_train", "height", "width", "coils", "accel_row", "accel_col"):
            if getattr(self, name) < 1:
                raise ConfigError(f"data.{name}", "must be >= 1")
        if self.n_test < 0:
            raise ConfigError("data.n_test", "must be >= 0")
        if self.height < 16 or self.width < 16:
            raise ConfigError("data.height", "phantoms need H, W >= 16")
        if not 0 <= self.acs_size <= min(self.height, self.width):
            raise ConfigError("data.acs_size", "must lie in [0, min(H, W)]")
        if self.noise_sigma < 0:
            raise ConfigError("data.noise_sigma", "must be >= 0")
        if not 0 <= self.phase_order <= 2:
            raise ConfigError("data.phase_order", "must be 0, 1 or 2")
        if not 1 <= self.min_ellipses <= self.max_ellipses:
            raise ConfigError("data.min_ellipses", "need 1 <= min_ellipses <= max_ellipses")

    def phantom_spec(self) -> PhantomSpec:
        return PhantomSpec(
            self.height,
            self.width,
            self.min_ellipses,
            self.max_ellipses,
            phase_order=self.phase_order,
            seed=self.seed,
        )

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(eq=False)
class Dataset:
    config: DataConfig
    train: list[KSpaceSample] = field(default_factory=list)
    test: list[KSpaceSample] = field(default_factory=list)

    def equals(self, other: "Dataset") -> bool:
        if self.config != other.config or len(self.train) != len(other.train) or len(self.test) != len(other.test):
            return False
        for a, b in zip(self.train + self.test, other.train + other.test):
            if not _sample_equal(a, b):
                return False
        return True


def _sample_equal(a: KSpaceSample, b: KSpaceSample) -> bool:
    return (
        np.array_equal(a.kspace(), b.kspace())
        and np.array_equal(a.mask.keep, b.mask.keep)
        and np.array_equal(a.sens.stack(), b.sens.stack())
        and (a.truth is None) == (b.truth is None)
        and (a.truth is None or a.truth.equals(b.truth))
    )


def generate_dataset(config: DataConfig) -> Dataset:
    config.validate()
    spec = config.phantom_spec()
    mask = make_mask(config.height, config.width, config.accel_row, config.accel_col, config.acs_size)
    sens = make_sensitivities(config.height, config.width, config.coils, config.seed)
    samples = []
    for i in range(config.n_train + config.n_test):
        truth = make_phantom(spec, i)
        noise_seed = [config.seed, i, _NOISE]
        samples.append(simulate_kspace(truth, sens, mask, config.noise_sigma, noise_seed))
    return Dataset(config, samples[: config.n_train], samples[config.n_train :])


_PARTS = ("truth", "sens", "kspace", "mask")


def _file_names(index: int) -> dict[str, str]:
    return {part: f"sample_{index:04d}.{part}.odet" for part in _PARTS}


def write_dataset(dataset: Dataset, directory) -> dict:
    """Write ``manifest.json`` plus four ODET files per sample; returns the manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cfg = dataset.config
    files = []
    for i, s in enumerate(dataset.train + dataset.test):
        names = _file_names(i)
        odet.write_tensor(directory / names["truth"], s.truth.to_complex())
        odet.write_tensor(directory / names["sens"], s.sens.stack())
        odet.write_tensor(directory / names["kspace"], s.kspace())
        odet.write_tensor(directory / names["mask"], s.mask.keep)
        files.append({"index": i, "split": "train" if i < len(dataset.train) else "test", **names})
    manifest = {
        "version": MANIFEST_VERSION,
        "counts": {"train": len(dataset.train), "test": len(dataset.test)},
        "image_size": [cfg.height, cfg.width],
        "coils": cfg.coils,
        "mask": {"accel_row": cfg.accel_row, "accel_col": cfg.accel_col, "acs_size": cfg.acs_size},
        "noise_sigma": cfg.noise_sigma,
        "seed": cfg.seed,
        "config": asdict(cfg),
        "config_digest": cfg.digest(),
        "files": files,
    }
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, directory / "manifest.json")
    return manifest


def read_manifest(directory) -> dict:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise MissingFileError(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFileError(path, f"invalid JSON ({exc})") from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise CorruptFileError(path, f"unsupported manifest version {manifest.get('version')!r}")
    return manifest


def load_sample(directory, names: dict, acs_size: int = 0) -> KSpaceSample:
    directory = Path(directory)
    paths = {part: directory / names[part] for part in _PARTS}
    for p in paths.values():
        if not p.is_file():
            raise MissingFileError(p)
    truth = odet.read_tensor(paths["truth"])
    sens = odet.read_tensor(paths["sens"])
    k = odet.read_tensor(paths["kspace"])
    keep = odet.read_tensor(paths["mask"])
    if keep.ndim != 2 or sens.ndim != 3 or k.shape != sens.shape or truth.shape != keep.shape:
        raise CorruptFileError(paths["kspace"], "inconsistent array shapes in sample")
    return KSpaceSample(
        tuple(ComplexImage.from_complex(kc) for kc in k),
        SamplingMask(keep, acs_size),
        CoilSensitivities.from_array(sens),
        ComplexImage.from_complex(truth),
    )


def read_dataset(directory) -> Dataset:
    directory = Path(directory)
    manifest = read_manifest(directory)
    try:
        cfg = DataConfig(**manifest["config"])
    except (KeyError, TypeError) as exc:
        raise CorruptFileError(directory / "manifest.json", f"bad config block ({exc})") from None
    train, test = [], []
    for entry in manifest["files"]:
        s = load_sample(directory, entry, cfg.acs_size)
        (train if entry["split"] == "train" else test).append(s)
    return Dataset(cfg, train, test)
