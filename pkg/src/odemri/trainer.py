"""Supervised training: complex MSE loss, L2 regularizer, SGD/Adam,
seeded shuffling and bitwise-reproducible checkpoints."""

from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import odet
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    CorruptFileError,
    DivergenceError,
    MissingFileError,
    ShapeMismatchError,
)
from .metrics import psnr
from .mri_model import zero_filled
from .ode_net import (
    NetworkConfig,
    expected_shapes,
    init_params,
    network_backward,
    param_names,
    network_forward,
    pack_images,
    regularized_mask,
    unpack_images,
)
from .tensor_core import ComplexImage

log = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "Checkpoint",
    "Adam",
    "SGD",
    "loss",
    "mse_loss",
    "regularizer",
    "objective_and_grad",
    "epoch_permutation",
    "reconstruct_batch",
    "train",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"ODEC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    weight_decay: float = 1e-6
    seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)

    def validate(self):
        if self.epochs < 1:
            raise ConfigError("train.epochs", "must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("train.batch_size", "must be >= 1")
        if not self.learning_rate >= 0 or not math.isfinite(self.learning_rate):
            raise ConfigError("train.learning_rate", "must be finite and >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError("train.optimizer", "must be 'sgd' or 'adam'")
        if not self.weight_decay >= 0:
            raise ConfigError("train.weight_decay", "must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["network"] = NetworkConfig(**d.get("network", {}))
        return cls(**d)


# ---------------------------------------------------------------- objective


def mse_loss(recon: np.ndarray, truth: np.ndarray):
    """Batch mean of per-sample MSE over both planes; returns ``(value, grad)``."""
    recon = np.asarray(recon, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if recon.shape != truth.shape:
        raise ShapeMismatchError(f"recon {recon.shape} vs truth {truth.shape}")
    diff = recon - truth
    n = diff.size
    return float(np.sum(diff * diff) / n), (2.0 / n) * diff


def loss(recon: ComplexImage, truth: ComplexImage) -> float:
    """(1 / 2HW) * sum |recon - truth|^2."""
    return mse_loss(pack_images([recon]), pack_images([truth]))[0]


def regularizer(params: dict, lam: float, masks: dict):
    """``lam * sum ||masked params||^2`` and its gradient dict."""
    value = 0.0
    grads = {}
    for k, v in params.items():
        m = masks[k]
        value += float(np.sum(m * v * v))
        grads[k] = (2.0 * lam) * m * v
    return lam * value, grads


def objective_and_grad(params, config: TrainConfig, inputs, targets, masks=None):
    """Training objective on one batch: mean loss + R, with gradients.

    Returns ``(total, data_loss, grads)``.
    """
    net = config.network
    recon, tape = network_forward(inputs, params, net)
    data_loss, g_recon = mse_loss(recon, targets)
    grads, _ = network_backward(tape, g_recon)
    if masks is None:
        masks = regularized_mask(net)
    r, g_r = regularizer(params, config.weight_decay, masks)
    for k in grads:
        grads[k] = grads[k] + g_r[k]
    return data_loss + r, data_loss, grads


# ---------------------------------------------------------------- optimizers


class SGD:
    kind = "sgd"

    def __init__(self, lr: float):
        self.lr = lr
        self.t = 0

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        return {k: v - self.lr * grads[k] for k, v in params.items()}

    def state_tensors(self) -> dict:
        return {}

    def load_state(self, t: int, tensors: dict):
        self.t = t


class Adam:
    kind = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        out = {}
        for k, p in params.items():
            g = grads[k]
            m = b1 * self.m.get(k, np.zeros_like(p)) + (1 - b1) * g
            v = b2 * self.v.get(k, np.zeros_like(p)) + (1 - b2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - b1**self.t)
            v_hat = v / (1 - b2**self.t)
            out[k] = p - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return out

    def state_tensors(self) -> dict:
        t = {f"adam_m/{k}": v for k, v in self.m.items()}
        t.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return t

    def load_state(self, t: int, tensors: dict):
        self.t = t
        self.m = {k[len("adam_m/") :]: v for k, v in tensors.items() if k.startswith("adam_m/")}
        self.v = {k[len("adam_v/") :]: v for k, v in tensors.items() if k.startswith("adam_v/")}


def make_optimizer(config: TrainConfig):
    if config.optimizer == "adam":
        return Adam(config.learning_rate)
    return SGD(config.learning_rate)


# ---------------------------------------------------------------- checkpoint


@dataclass(eq=False)
class Checkpoint:
    config: TrainConfig
    epoch: int
    params: dict
    optimizer_step: int = 0
    optimizer_state: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    data_digest: str = ""

    @property
    def rng_state(self) -> dict:
        # shuffles are drawn from (seed, epoch), so this pins the stream
        return {"seed": self.config.seed, "next_epoch": self.epoch}

    def header(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "epoch": self.epoch,
            "optimizer": {"kind": self.config.optimizer, "step": self.optimizer_step},
            "rng": self.rng_state,
            "history": self.history,
            "data_digest": self.data_digest,
        }

    def equals(self, other: "Checkpoint") -> bool:
        return to_bytes(self) == to_bytes(other)


def to_bytes(ckpt: Checkpoint) -> bytes:
    tensors = {f"param/{k}": v for k, v in ckpt.params.items()}
    tensors.update(ckpt.optimizer_state)
    blobs, index, offset = [], {}, 0
    for name in sorted(tensors):
        b = odet.encode(tensors[name])
        index[name] = [offset, len(b)]
        blobs.append(b)
        offset += len(b)
    header = ckpt.header()
    header["index"] = index
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)


def from_bytes(buf: bytes, source="<bytes>") -> Checkpoint:
    if len(buf) < 16 or buf[:4] != CHECKPOINT_MAGIC:
        raise CorruptFileError(source, "not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise CorruptFileError(source, f"unsupported checkpoint version {version}")
    if len(buf) < 16 + hlen:
        raise CorruptFileError(source, "truncated header")
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
        config = TrainConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFileError(source, f"bad header ({exc})") from None
    base = 16 + hlen
    tensors = {}
    for name, (off, length) in header["index"].items():
        if base + off + length > len(buf):
            raise CorruptFileError(source, f"tensor {name} truncated")
        tensors[name] = odet.decode(buf[base + off : base + off + length], f"{source}:{name}")
    params = {k[len("param/") :]: v for k, v in tensors.items() if k.startswith("param/")}
    order = [k for k in param_names(config.network) if k in params]
    params = {k: params[k] for k in order + sorted(set(params) - set(order))}
    opt_state = {k: v for k, v in tensors.items() if not k.startswith("param/")}
    return Checkpoint(
        config,
        header["epoch"],
        params,
        header["optimizer"]["step"],
        opt_state,
        header["history"],
        header.get("data_digest", ""),
    )


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)


def load_checkpoint(path, network: NetworkConfig | None = None) -> Checkpoint:
    """Read a checkpoint; with ``network`` given, verify every parameter shape."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path)
    ckpt = from_bytes(path.read_bytes(), path)
    check_compatible(ckpt, network or ckpt.config.network)
    return ckpt


def check_compatible(ckpt: Checkpoint, network: NetworkConfig) -> None:
    want = expected_shapes(network)
    if set(ckpt.params) != set(want):
        raise CheckpointMismatchError(
            f"checkpoint parameters {sorted(ckpt.params)} do not match network {sorted(want)}"
        )
    for k, shape in want.items():
        if ckpt.params[k].shape != shape:
            raise CheckpointMismatchError(f"{k}: checkpoint shape {ckpt.params[k].shape}, network expects {shape}")


# ---------------------------------------------------------------- training


def epoch_permutation(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([int(seed), int(epoch), 7]).permutation(n)


def sample_arrays(samples):
    """Packed network inputs (zero-filled) and targets (truth), each (M, 2, H, W)."""
    inputs = pack_images([zero_filled(s) for s in samples])
    targets = pack_images([s.truth for s in samples])
    return inputs, targets


def reconstruct_batch(params, config: NetworkConfig, samples) -> list[ComplexImage]:
    inputs = pack_images([zero_filled(s) for s in samples])
    recon, _ = network_forward(inputs, params, config)
    return unpack_images(recon)


def _mean_test_psnr(params, net, test_inputs, test_truth, batch_size):
    if not len(test_inputs):
        return math.nan
    values = []
    for start in range(0, len(test_inputs), batch_size):
        recon, _ = network_forward(test_inputs[start : start + batch_size], params, net)
        for r, t in zip(unpack_images(recon), test_truth[start : start + batch_size]):
            values.append(psnr(r, t))
    return float(np.mean(values))


def initial_checkpoint(config: TrainConfig, data_digest: str = "") -> Checkpoint:
    params = init_params(config.network, np.random.default_rng([int(config.seed), 1]))
    return Checkpoint(config, 0, params, data_digest=data_digest)


def train(
    config: TrainConfig,
    train_samples,
    test_samples=(),
    checkpoint_dir=None,
    log_path=None,
    resume: Checkpoint | None = None,
    data_digest: str = "",
) -> Checkpoint:
    """Run mini-batch training up to ``config.epochs``; returns the final checkpoint.

    With ``resume`` the run continues from that checkpoint's epoch and is
    bitwise identical to an uninterrupted run.
    """
    config.validate()
    net = config.network
    if not train_samples:
        raise ConfigError("data", "training set is empty")
    inputs, targets = sample_arrays(train_samples)
    test_inputs, _ = sample_arrays(test_samples) if len(test_samples) else (np.zeros((0,)), None)
    test_truth = [s.truth for s in test_samples]
    masks = regularized_mask(net)

    opt = make_optimizer(config)
    if resume is None:
        ckpt = initial_checkpoint(config, data_digest)
    else:
        check_compatible(resume, net)
        ckpt = Checkpoint(
            config,
            resume.epoch,
            {k: resume.params[k] for k in expected_shapes(net)},
            resume.optimizer_step,
            dict(resume.optimizer_state),
            list(resume.history),
            resume.data_digest or data_digest,
        )
        opt.load_state(resume.optimizer_step, resume.optimizer_state)
    params = ckpt.params
    if checkpoint_dir is not None:
        checkpoint_dir = Path(checkpoint_dir)
        checkpoint_dir.mkdir(parents=True, exist_ok=True)
    if log_path is not None and ckpt.epoch == 0:
        Path(log_path).write_text("epoch,train_loss,test_psnr_mean\n")

    m = len(inputs)
    for epoch in range(ckpt.epoch, config.epochs):
        order = epoch_permutation(config.seed, epoch, m)
        batch_losses, batch_sizes = [], []
        for start in range(0, m, config.batch_size):
            # sorted so gradients accumulate in ascending sample-index order
            idx = np.sort(order[start : start + config.batch_size])
            total, data_loss, grads = objective_and_grad(params, config, inputs[idx], targets[idx], masks)
            if not math.isfinite(total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceError(f"non-finite objective at epoch {epoch}, batch starting {start}: {total}")
            batch_losses.append(data_loss)
            batch_sizes.append(len(idx))
            params = opt.step(params, grads)
        train_loss = float(np.dot(batch_losses, batch_sizes) / m)
        test_psnr = _mean_test_psnr(params, net, test_inputs, test_truth, config.batch_size)
        ckpt.history.append({"epoch": epoch, "train_loss": train_loss, "test_psnr_mean": test_psnr})
        ckpt = replace(
            ckpt,
            epoch=epoch + 1,
            params=params,
            optimizer_step=opt.t,
            optimizer_state=opt.state_tensors(),
        )
        log.info("epoch %d train_loss %.6g test_psnr %.3f", epoch, train_loss, test_psnr)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(f"{epoch},{train_loss!r},{test_psnr!r}\n")
        if checkpoint_dir is not None:
            save_checkpoint(ckpt, checkpoint_dir / "checkpoint.odec")
    return ckpt
