"""The ODE reconstruction network and its ResNet baseline.

Pipeline for one image: pack to 2 real channels, lift conv to F channels,
append A zero channels, run N blocks, project back to 2 channels, add the
input (global residual). Each block integrates the coupled system

    dL/dt = f(L, theta),   dtheta/dt = a * theta + b

over [0, 1] with K explicit Euler steps on a shared grid. Gradients are the
exact reverse-mode derivative of that discrete recursion: every
intermediate is taped and replayed backwards.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgumentError, ShapeMismatchError
from .nn_blocks import (
    ACTIVATIONS,
    BlockLayout,
    ConvParams,
    conv2d_backward,
    conv2d_forward,
    dynamics_f,
    dynamics_f_backward,
    init_conv,
)
from .tensor_core import ComplexImage

__all__ = [
    "IntegratorConfig",
    "NetworkConfig",
    "ConvDynamics",
    "weight_dynamics_w",
    "integrate_weights",
    "euler_step",
    "block_forward",
    "block_backward",
    "init_params",
    "param_names",
    "network_forward",
    "network_backward",
    "pack_images",
    "unpack_images",
    "regularized_mask",
    "count_params",
]

MODES = ("ode", "residual_baseline")


@dataclass(frozen=True)
class IntegratorConfig:
    steps: int = 4
    t0: float = 0.0
    t1: float = 1.0

    def __post_init__(self):
        if self.steps < 1:
            raise InvalidArgumentError("integrator needs at least one step")
        if not self.t1 > self.t0:
            raise InvalidArgumentError("t1 must exceed t0")

    @property
    def h(self) -> float:
        return (self.t1 - self.t0) / self.steps


@dataclass(frozen=True)
class NetworkConfig:
    num_blocks: int = 5
    feature_channels: int = 16
    augment_channels: int = 2
    steps: int = 4
    activation: str = "relu"
    mode: str = "ode"

    def __post_init__(self):
        if self.num_blocks < 1:
            raise InvalidArgumentError("num_blocks must be >= 1")
        if self.feature_channels < 1:
            raise InvalidArgumentError("feature_channels must be >= 1")
        if self.augment_channels < 0:
            raise InvalidArgumentError("augment_channels must be >= 0")
        if self.steps < 1:
            raise InvalidArgumentError("steps must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"activation must be one of {ACTIVATIONS}")
        if self.mode not in MODES:
            raise InvalidArgumentError(f"mode must be one of {MODES}")

    @property
    def is_ode(self) -> bool:
        return self.mode == "ode"

    @property
    def effective_augment(self) -> int:
        return self.augment_channels if self.is_ode else 0

    @property
    def integrator(self) -> IntegratorConfig:
        return IntegratorConfig(self.steps if self.is_ode else 1)

    @property
    def state_channels(self) -> int:
        return self.feature_channels + self.effective_augment

    def layout(self) -> BlockLayout:
        return BlockLayout(self.state_channels)

    def to_dict(self) -> dict:
        return asdict(self)


class ConvDynamics:
    """Default block dynamics: conv -> activation -> conv."""

    def __init__(self, layout: BlockLayout, kind: str):
        self.layout = layout
        self.kind = kind

    def forward(self, L, theta):
        return dynamics_f(L, theta, self.layout, self.kind)

    def backward(self, cache, grad_out):
        return dynamics_f_backward(cache, grad_out)


def weight_dynamics_w(theta, p):
    """Affine weight flow ``a * theta + b`` with ``p = (a, b)``."""
    a, b = float(p[0]), float(p[1])
    return a * np.asarray(theta) + b


def integrate_weights(theta0, p, integrator: IntegratorConfig) -> list[np.ndarray]:
    """Euler trajectory ``[theta_0, ..., theta_K]`` of the weight flow alone."""
    h = integrator.h
    traj = [np.asarray(theta0, dtype=np.float64)]
    for _ in range(integrator.steps):
        traj.append(traj[-1] + h * weight_dynamics_w(traj[-1], p))
    return traj


def euler_step(L, theta, h: float, dynamics):
    f, _ = dynamics.forward(L, theta)
    return L + h * f


@dataclass
class BlockTape:
    h: float
    p: np.ndarray | None
    thetas: list = field(default_factory=list)
    caches: list = field(default_factory=list)
    dynamics: object = None
    input_shape: tuple = ()


def block_forward(L_in, theta0, p, integrator: IntegratorConfig, dynamics):
    """Run K coupled Euler steps. ``p=None`` freezes the weights.

    Returns ``(L_out, tape)``.
    """
    h = integrator.h
    tape = BlockTape(h=h, p=None if p is None else np.asarray(p, dtype=np.float64), dynamics=dynamics)
    tape.input_shape = np.shape(L_in)
    L = L_in
    theta = np.asarray(theta0, dtype=np.float64)
    for _ in range(integrator.steps):
        f, cache = dynamics.forward(L, theta)
        tape.thetas.append(theta)
        tape.caches.append(cache)
        L = L + h * f
        if p is not None:
            theta = theta + h * weight_dynamics_w(theta, p)
    return L, tape


def block_backward(tape: BlockTape, grad_out):
    """Returns ``(grad_L_in, grad_theta0, grad_p)``; ``grad_p`` is None when frozen."""
    if np.shape(grad_out) != tape.input_shape:
        raise ShapeMismatchError(f"grad shape {np.shape(grad_out)} vs block output {tape.input_shape}")
    h = tape.h
    gL = np.asarray(grad_out, dtype=np.float64)
    g_theta = None
    ga = gb = 0.0
    a = 0.0 if tape.p is None else tape.p[0]
    for k in range(len(tape.caches) - 1, -1, -1):
        gL_f, gtheta_f = tape.dynamics.backward(tape.caches[k], h * gL)
        if g_theta is None:
            g_theta = gtheta_f
        else:
            # theta_{k+1} = theta_k + h * (a * theta_k + b)
            if tape.p is not None:
                ga += h * float(np.dot(g_theta, tape.thetas[k]))
                gb += h * float(np.sum(g_theta))
            g_theta = (1.0 + h * a) * g_theta + gtheta_f
        gL = gL + gL_f
    gp = None if tape.p is None else np.array([ga, gb])
    return gL, g_theta, gp


def param_names(config: NetworkConfig) -> list[str]:
    names = ["lift.weight", "lift.bias"]
    for i in range(config.num_blocks):
        names.append(f"blocks.{i}.theta0")
        if config.is_ode:
            names.append(f"blocks.{i}.p")
    names += ["project.weight", "project.bias"]
    return names


def init_params(config: NetworkConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    """Fan-in uniform conv weights, zero biases, weight dynamics p = (0, 0)."""
    lift = init_conv(rng, config.feature_channels, 2)
    params = {"lift.weight": lift.weight, "lift.bias": lift.bias}
    layout = config.layout()
    for i in range(config.num_blocks):
        params[f"blocks.{i}.theta0"] = layout.init(rng)
        if config.is_ode:
            params[f"blocks.{i}.p"] = np.zeros(2)
    proj = init_conv(rng, 2, config.state_channels)
    params["project.weight"] = proj.weight
    params["project.bias"] = proj.bias
    return {k: params[k] for k in param_names(config)}


def expected_shapes(config: NetworkConfig) -> dict[str, tuple]:
    c, f = config.state_channels, config.feature_channels
    shapes = {"lift.weight": (f, 2, 3, 3), "lift.bias": (f,)}
    for i in range(config.num_blocks):
        shapes[f"blocks.{i}.theta0"] = (config.layout().size,)
        if config.is_ode:
            shapes[f"blocks.{i}.p"] = (2,)
    shapes["project.weight"] = (2, c, 3, 3)
    shapes["project.bias"] = (2,)
    return shapes


def check_params(params: dict, config: NetworkConfig) -> None:
    want = expected_shapes(config)
    if list(params) != list(want):
        raise ShapeMismatchError(f"parameter names {list(params)} do not match network {list(want)}")
    for k, shape in want.items():
        if np.shape(params[k]) != shape:
            raise ShapeMismatchError(f"{k}: shape {np.shape(params[k])}, network expects {shape}")


def count_params(config: NetworkConfig) -> int:
    return int(sum(np.prod(s) for s in expected_shapes(config).values()))


def regularized_mask(config: NetworkConfig) -> dict[str, np.ndarray]:
    """Per-parameter 0/1 masks selecting the L2-penalized entries (biases excluded)."""
    layout = config.layout()
    masks = {}
    for k, shape in expected_shapes(config).items():
        if k.endswith(".bias"):
            masks[k] = np.zeros(shape)
        elif k.endswith(".theta0"):
            masks[k] = layout.weight_mask()
        else:
            masks[k] = np.ones(shape)
    return masks


def pack_images(images: Sequence[ComplexImage]) -> np.ndarray:
    """List of ComplexImages -> (B, 2, H, W) with channels (re, im)."""
    if len({im.shape for im in images}) > 1:
        raise ShapeMismatchError("images in a batch must share one shape")
    return np.stack([np.stack([im.re, im.im]) for im in images])


def unpack_images(x: np.ndarray) -> list[ComplexImage]:
    return [ComplexImage(xi[0], xi[1]) for xi in x]


@dataclass
class NetworkTape:
    config: NetworkConfig
    lift_cache: tuple
    block_tapes: list
    project_cache: tuple
    input_kind: str


def network_forward(x0, params: dict, config: NetworkConfig, dynamics_factory=None):
    """Reconstruct from the zero-filled input ``x0``.

    ``x0`` may be one ComplexImage, a list of them, or a real array
    (B, 2, H, W); the result has the same form. Returns ``(recon, tape)``.
    """
    if isinstance(x0, ComplexImage):
        kind, x = "image", pack_images([x0])
    elif isinstance(x0, (list, tuple)):
        kind, x = "images", pack_images(x0)
    else:
        kind, x = "array", np.asarray(x0, dtype=np.float64)
        if x.ndim != 4 or x.shape[1] != 2:
            raise ShapeMismatchError(f"network input must be (B, 2, H, W), got {x.shape}")
    check_params(params, config)
    integrator = config.integrator
    dynamics = (dynamics_factory or ConvDynamics)(config.layout(), config.activation)

    lifted, lift_cache = conv2d_forward(x, ConvParams(params["lift.weight"], params["lift.bias"]))
    A = config.effective_augment
    if A:
        b, _, h, w = lifted.shape
        L = np.concatenate([lifted, np.zeros((b, A, h, w))], axis=1)
    else:
        L = lifted
    block_tapes = []
    for i in range(config.num_blocks):
        p = params[f"blocks.{i}.p"] if config.is_ode else None
        L, tape = block_forward(L, params[f"blocks.{i}.theta0"], p, integrator, dynamics)
        block_tapes.append(tape)
    out, project_cache = conv2d_forward(L, ConvParams(params["project.weight"], params["project.bias"]))
    recon = x + out
    tape = NetworkTape(config, lift_cache, block_tapes, project_cache, kind)
    if kind == "image":
        return unpack_images(recon)[0], tape
    if kind == "images":
        return unpack_images(recon), tape
    return recon, tape


def network_backward(tape: NetworkTape, grad_recon):
    """Returns ``(grads, grad_x0)``: a dict keyed like the params and the
    gradient with respect to the (packed) network input."""
    if tape.input_kind == "image":
        g = pack_images([grad_recon])
    elif tape.input_kind == "images":
        g = pack_images(grad_recon)
    else:
        g = np.asarray(grad_recon, dtype=np.float64)
    config = tape.config
    grads = {}
    gL, gproj = conv2d_backward(tape.project_cache, g)
    for i in range(config.num_blocks - 1, -1, -1):
        gL, gtheta, gp = block_backward(tape.block_tapes[i], gL)
        grads[f"blocks.{i}.theta0"] = gtheta
        if gp is not None:
            grads[f"blocks.{i}.p"] = gp
    gL = gL[:, : config.feature_channels]
    gx, glift = conv2d_backward(tape.lift_cache, gL)
    gx = gx + g
    grads["lift.weight"] = glift.weight
    grads["lift.bias"] = glift.bias
    grads["project.weight"] = gproj.weight
    grads["project.bias"] = gproj.bias
    return {k: grads[k] for k in param_names(config)}, gx
