"""Synthetic data, training, reconstruction and evaluation for ODE-based MRI reconstruction.

Subcommands: gen-data, train, reconstruct, eval, gradcheck.
Exit codes: 0 ok, 1 check failed, 2 config error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import odet
from .datagen import DataConfig, generate_dataset, load_sample, read_dataset, read_manifest, write_dataset
from .errors import (
    CheckpointMismatchError,
    ConfigError,
    CorruptFileError,
    InvalidArgumentError,
    MissingFileError,
    OdeMriError,
)
from .gradcheck import TINY_NETWORK, check_network_gradients
from .metrics import MetricReport, error_map, evaluate, psnr, ssim, write_pgm
from .mri_model import zero_filled
from .ode_net import NetworkConfig, network_forward
from .trainer import TrainConfig, check_compatible, load_checkpoint, train

log = logging.getLogger("odemri")

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3
GRADCHECK_TOL = 1e-6


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        t = asdict(self.train)
        t.pop("network")
        return {"data": asdict(self.data), "network": asdict(self.network), "train": t}

    def digest(self) -> str:
        return canonical_digest(self.to_dict())

    def train_config(self) -> TrainConfig:
        return replace(self.train, network=self.network)


def canonical_digest(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _section(cls, raw, name, skip=()):
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(name, "must be a JSON object")
    allowed = {f.name: f for f in fields(cls) if f.name not in skip}
    out = {}
    for key, value in raw.items():
        if key not in allowed:
            raise ConfigError(f"{name}.{key}", "unknown key")
        default = allowed[key].default
        if isinstance(default, bool) or not isinstance(default, (int, float, str)):
            pass
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{key}", f"expected a number, got {value!r}")
            value = float(value)
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(f"{name}.{key}", f"expected an integer, got {value!r}")
        elif not isinstance(value, str):
            raise ConfigError(f"{name}.{key}", f"expected a string, got {value!r}")
        out[key] = value
    return out


def parse_config(raw: dict | None) -> RunConfig:
    """Validate a JSON config object; every field is optional, unknown keys are rejected."""
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    for key in raw:
        if key not in ("data", "network", "train"):
            raise ConfigError(key, "unknown key")
    data = DataConfig(**_section(DataConfig, raw.get("data"), "data"))
    data.validate()
    try:
        network = NetworkConfig(**_section(NetworkConfig, raw.get("network"), "network"))
    except InvalidArgumentError as exc:
        raise ConfigError("network", str(exc)) from None
    train_cfg = TrainConfig(**_section(TrainConfig, raw.get("train"), "train", skip=("network",)))
    train_cfg = replace(train_cfg, network=network)
    train_cfg.validate()
    return RunConfig(data, network, train_cfg)


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(str(path), f"invalid JSON: {exc}") from None
    return parse_config(raw)


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------- commands


def cmd_gen_data(args) -> int:
    cfg = load_config(args.config)
    ds = generate_dataset(cfg.data)
    manifest = write_dataset(ds, args.out_dir)
    print(
        f"wrote {manifest['counts']['train']} train + {manifest['counts']['test']} test samples "
        f"({cfg.data.height}x{cfg.data.width}, {cfg.data.coils} coils, "
        f"accel {cfg.data.accel_row}x{cfg.data.accel_col}, acs {cfg.data.acs_size}) "
        f"to {args.out_dir} [digest {manifest['config_digest'][:12]}]"
    )
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.mode:
        net = replace(cfg.network, mode=args.mode)
        cfg = replace(cfg, network=net, train=replace(cfg.train, network=net))
    data_dir = Path(args.data)
    manifest = read_manifest(data_dir)
    ds = read_dataset(data_dir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume, cfg.network)
    tcfg = cfg.train_config()
    ckpt = train(
        tcfg,
        ds.train,
        ds.test,
        checkpoint_dir=out,
        log_path=out / "train_log.csv",
        resume=resume,
        data_digest=manifest["config_digest"],
    )
    _write_json(
        out / "run.json",
        {"config": cfg.to_dict(), "config_digest": cfg.digest(), "data_digest": manifest["config_digest"]},
    )
    first, last = ckpt.history[0], ckpt.history[-1]
    print(
        f"trained {tcfg.network.mode} for {ckpt.epoch} epochs: train loss "
        f"{first['train_loss']:.6g} -> {last['train_loss']:.6g}, test PSNR {last['test_psnr_mean']:.3f} dB"
    )
    return EXIT_OK


def _network_for(args, ckpt):
    if getattr(args, "config", None):
        net = load_config(args.config).network
        check_compatible(ckpt, net)
        return net
    return ckpt.config.network


def _sample_names(prefix: Path) -> dict:
    return {part: f"{prefix.name}.{part}.odet" for part in ("truth", "sens", "kspace", "mask")}


def cmd_reconstruct(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    net = _network_for(args, ckpt)
    prefix = Path(args.sample)
    names = _sample_names(prefix)
    truth_path = prefix.parent / names["truth"]
    if truth_path.is_file():
        sample = load_sample(prefix.parent, names)
    else:
        # no ground truth: load only the measurement files
        from .mri_model import CoilSensitivities, KSpaceSample, SamplingMask
        from .tensor_core import ComplexImage

        k = odet.read_tensor(prefix.parent / names["kspace"])
        sample = KSpaceSample(
            tuple(ComplexImage.from_complex(kc) for kc in k),
            SamplingMask(odet.read_tensor(prefix.parent / names["mask"])),
            CoilSensitivities.from_array(odet.read_tensor(prefix.parent / names["sens"])),
        )
    x0 = zero_filled(sample)
    recon, _ = network_forward(x0, ckpt.params, net)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    odet.write_tensor(out / "recon.odet", recon.to_complex())
    vmax = float(np.max(recon.abs()))
    summary = {"checkpoint": str(args.checkpoint), "sample": str(prefix)}
    if sample.truth is not None:
        vmax = float(np.max(sample.truth.abs()))
        error_map(recon, sample.truth, out / "error.pgm", vmax=0.1 * vmax)
        summary.update(
            psnr_db=psnr(recon, sample.truth),
            ssim=ssim(recon, sample.truth),
            zero_filled_psnr_db=psnr(x0, sample.truth),
        )
    write_pgm(out / "recon.pgm", recon.abs(), vmax)
    summary["config_digest"] = canonical_digest(ckpt.header()["config"])
    _write_json(out / "recon.json", summary)
    msg = f"wrote {out / 'recon.odet'}"
    if "psnr_db" in summary:
        msg += f" (PSNR {summary['psnr_db']:.2f} dB, SSIM {summary['ssim']:.4f})"
    print(msg)
    return EXIT_OK


def cmd_eval(args) -> int:
    data_dir = Path(args.data)
    manifest = read_manifest(data_dir)
    ds = read_dataset(data_dir)
    if args.truth_as_recon:
        params, net, ckpt_digest, data_digest = None, NetworkConfig(), "", manifest["config_digest"]
    else:
        ckpt = load_checkpoint(args.checkpoint)
        net = _network_for(args, ckpt)
        params = ckpt.params
        data_digest = ckpt.data_digest
        ckpt_digest = canonical_digest(ckpt.header()["config"])
        if data_digest != manifest["config_digest"] and not args.force:
            raise ConfigError(
                "data",
                f"checkpoint was trained on dataset {data_digest[:12]} but {data_dir} is "
                f"{manifest['config_digest'][:12]}; pass --force to evaluate anyway",
            )
    report = evaluate(params, net, ds.test, truth_as_recon=args.truth_as_recon)
    zf = [psnr(zero_filled(s), s.truth) for s in ds.test]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(report.to_csv())
    summary = report.summary()
    summary.update(
        zero_filled_psnr_mean=float(np.mean(zf)) if zf else math.nan,
        data_digest=manifest["config_digest"],
        checkpoint_config_digest=ckpt_digest,
        truth_as_recon=bool(args.truth_as_recon),
    )
    _write_json(out / "summary.json", summary)
    print(
        f"{summary['n']} test samples: PSNR {summary['psnr_mean']:.3f} +- {summary['psnr_std']:.3f} dB, "
        f"SSIM {summary['ssim_mean']:.4f} +- {summary['ssim_std']:.4f} "
        f"(zero-filled PSNR {summary['zero_filled_psnr_mean']:.3f} dB)"
    )
    for sid, err in report.errors.items():
        print(f"sample {sid}: {err}", file=sys.stderr)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    result = check_network_gradients(TINY_NETWORK, size=args.size, seed=args.seed, perturb=args.perturb)
    ok = result.passed(GRADCHECK_TOL)
    print(
        f"gradcheck: {result.num_coords} coordinates, max relative error {result.max_rel_error:.3e} "
        f"at {result.worst} -> {'PASS' if ok else 'FAIL'} (tol {GRADCHECK_TOL:g})"
    )
    return EXIT_OK if ok else EXIT_CHECK


# ---------------------------------------------------------------- plumbing


def thread_count(args) -> int | None:
    value = args.threads if args.threads is not None else os.environ.get("ODEMRI_THREADS")
    if value is None:
        return None
    try:
        n = int(value)
    except ValueError:
        raise ConfigError("threads", f"not an integer: {value!r}") from None
    if n < 1:
        raise ConfigError("threads", "must be >= 1")
    return n


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odemri", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=str, default=None, help="cap worker/BLAS threads (env ODEMRI_THREADS)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a reconstruction network")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("ode", "residual_baseline"))
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="reconstruct one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sample", required=True, help="sample path prefix, e.g. data/sample_0003")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="network config the checkpoint must match")
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="PSNR/SSIM over the test split")
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="network config the checkpoint must match")
    p.add_argument("--force", action="store_true", help="ignore dataset digest mismatch")
    p.add_argument("--truth-as-recon", action="store_true", help="sanity mode: score truth against itself")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check of the tiny network")
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "eval" and not args.checkpoint and not args.truth_as_recon:
        parser.error("eval needs --checkpoint unless --truth-as-recon is given")
    try:
        threads = thread_count(args)
        if threads is None:
            limiter = contextlib.nullcontext()
        else:
            from threadpoolctl import threadpool_limits

            limiter = threadpool_limits(limits=threads)
        with limiter:
            return args.func(args)
    except (ConfigError, CheckpointMismatchError, InvalidArgumentError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingFileError, CorruptFileError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OdeMriError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
