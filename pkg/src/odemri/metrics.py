"""Magnitude-image PSNR / SSIM, error maps and test-set aggregation."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgumentError, ShapeMismatchError
from .tensor_core import ComplexImage

__all__ = [
    "psnr",
    "ssim",
    "error_map",
    "write_pgm",
    "read_pgm",
    "MetricReport",
    "aggregate",
    "evaluate",
]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _magnitudes(recon, truth):
    a = recon.abs() if isinstance(recon, ComplexImage) else np.abs(np.asarray(recon, dtype=np.float64))
    b = truth.abs() if isinstance(truth, ComplexImage) else np.abs(np.asarray(truth, dtype=np.float64))
    if a.shape != b.shape:
        raise ShapeMismatchError(f"recon {a.shape} vs truth {b.shape}")
    return a, b


def psnr(recon, truth) -> float:
    """10 log10(max|truth|^2 / MSE) on magnitudes; ``inf`` when identical."""
    a, b = _magnitudes(recon, truth)
    peak = float(b.max())
    if peak == 0.0:
        raise InvalidArgumentError("truth image is identically zero")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window():
    r = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    g = np.exp(-(r**2) / (2 * SSIM_SIGMA**2))
    return g / g.sum()


def _filter_valid(img, g):
    rows = np.einsum("...k,k->...", sliding_window_view(img, len(g), axis=1), g)
    return np.einsum("...k,k->...", sliding_window_view(rows, len(g), axis=0), g)


def ssim(recon, truth, data_range: float | None = None) -> float:
    """Mean SSIM over all positions where the 11x11 Gaussian window fits.

    ``data_range`` defaults to max - min of the truth magnitude, falling back
    to its maximum for constant references.
    """
    a, b = _magnitudes(recon, truth)
    if min(a.shape) < SSIM_WINDOW:
        raise InvalidArgumentError(f"image {a.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    if data_range is None:
        data_range = float(b.max() - b.min()) or float(b.max())
    if data_range <= 0:
        raise InvalidArgumentError("data range must be positive")
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    g = _gaussian_window()
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    var_a = _filter_valid(a * a, g) - mu_a**2
    var_b = _filter_valid(b * b, g) - mu_b**2
    cov = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def error_map(recon, truth, path=None, vmax: float | None = None) -> np.ndarray:
    """Absolute magnitude difference; optionally saved as an 8-bit PGM scaled to ``vmax``."""
    a, b = _magnitudes(recon, truth)
    err = np.abs(a - b)
    if path is not None:
        write_pgm(path, err, vmax)
    return err


def write_pgm(path, image, vmax: float | None = None) -> None:
    """Binary (P5) 8-bit grayscale; values are clipped to [0, vmax]."""
    image = np.asarray(image, dtype=np.float64)
    if vmax is None:
        vmax = float(image.max())
    scaled = np.zeros(image.shape) if vmax <= 0 else np.clip(image / vmax, 0.0, 1.0) * 255.0
    pixels = np.round(scaled).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n# vmax={vmax!r}\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    pos += 1
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w)


@dataclass
class MetricReport:
    psnr_db: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    sample_ids: list[int] = field(default_factory=list)
    errors: dict[int, str] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.psnr_db)

    @staticmethod
    def _mean_std(values):
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            return math.nan, math.nan
        mean = float(np.mean(v))
        if v.size == 1 or not np.all(np.isfinite(v)):
            # n = 1 has no sample spread; reported as 0 with ``single_sample`` set
            return mean, 0.0 if v.size == 1 else math.nan
        return mean, float(np.std(v, ddof=1))

    def summary(self) -> dict:
        pm, ps = self._mean_std(self.psnr_db)
        sm, ss = self._mean_std(self.ssim)
        return {
            "n": self.n,
            "single_sample": self.n == 1,
            "psnr_mean": pm,
            "psnr_std": ps,
            "ssim_mean": sm,
            "ssim_std": ss,
            "failed": {str(k): v for k, v in sorted(self.errors.items())},
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sample", "psnr_db", "ssim"])
        for i, p, s in zip(self.sample_ids, self.psnr_db, self.ssim):
            w.writerow([i, repr(p), repr(s)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "MetricReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        return cls(
            [float(r["psnr_db"]) for r in rows],
            [float(r["ssim"]) for r in rows],
            [int(r["sample"]) for r in rows],
        )


def aggregate(pairs, sample_ids=None) -> MetricReport:
    """Score ``(recon, truth)`` pairs; a failing pair is recorded and skipped."""
    report = MetricReport()
    for j, (recon, truth) in enumerate(pairs):
        sid = j if sample_ids is None else sample_ids[j]
        try:
            p, s = psnr(recon, truth), ssim(recon, truth)
        except (ShapeMismatchError, InvalidArgumentError) as exc:
            report.errors[sid] = str(exc)
            continue
        report.psnr_db.append(p)
        report.ssim.append(s)
        report.sample_ids.append(sid)
    return report


def evaluate(params, config, samples, batch_size: int = 8, truth_as_recon: bool = False) -> MetricReport:
    """Reconstruct each sample with the network and score it against its truth."""
    from .trainer import reconstruct_batch

    pairs, ids, failed = [], [], {}
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        if truth_as_recon:
            recons = [s.truth for s in chunk]
        else:
            try:
                recons = reconstruct_batch(params, config, chunk)
            except (ShapeMismatchError, InvalidArgumentError):
                recons = None
        if recons is None:
            # retry one at a time so a bad sample does not sink its batch
            recons = []
            for j, s in enumerate(chunk):
                try:
                    recons.append(reconstruct_batch(params, config, [s])[0])
                except (ShapeMismatchError, InvalidArgumentError) as exc:
                    failed[start + j] = str(exc)
                    recons.append(None)
        for j, (r, s) in enumerate(zip(recons, chunk)):
            if r is not None:
                pairs.append((r, s.truth))
                ids.append(start + j)
    report = aggregate(pairs, ids)
    report.errors.update(failed)
    return report
