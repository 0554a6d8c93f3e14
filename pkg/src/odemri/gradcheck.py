"""Finite-difference verification of the network's analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ode_net import NetworkConfig, init_params, network_backward, network_forward

TINY_NETWORK = NetworkConfig(
    num_blocks=2, feature_channels=4, augment_channels=1, steps=2, activation="tanh", mode="ode"
)
FD_EPS = 1e-5
# Central differences at eps=1e-5 carry ~1e-9 absolute rounding noise, so
# gradients below this floor are compared on an absolute scale.
REL_FLOOR = 1e-2


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst: str
    num_coords: int

    def passed(self, tol: float = 1e-6) -> bool:
        return self.max_rel_error < tol


def relative_error(analytic, numeric, floor: float = REL_FLOOR):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def random_instance(config: NetworkConfig, size: int, seed: int):
    """Parameters with nonzero biases and weight dynamics, an input image and
    an upstream direction ``probe``; the checked scalar is sum(probe * recon)."""
    rng = np.random.default_rng([seed, 99])
    params = init_params(config, rng)
    for k, v in params.items():
        if k.endswith(".bias"):
            params[k] = 0.1 * rng.standard_normal(v.shape)
        elif k.endswith(".p"):
            params[k] = 0.5 * rng.standard_normal(2)
    x = rng.standard_normal((1, 2, size, size))
    probe = rng.standard_normal(x.shape)
    return params, x, probe


def check_network_gradients(
    config: NetworkConfig = TINY_NETWORK,
    size: int = 8,
    seed: int = 0,
    eps: float = FD_EPS,
    perturb: float = 0.0,
    coords: int | None = None,
) -> GradcheckResult:
    """Compare analytic gradients with central differences.

    All parameter and input coordinates are swept unless ``coords`` caps the
    count (then a seeded random subset is used). ``perturb`` adds a constant
    to every analytic gradient, for exercising the failure path.
    """
    params, x, probe = random_instance(config, size, seed)

    def output(p, xin):
        recon, _ = network_forward(xin, p, config)
        return recon

    recon, tape = network_forward(x, params, config)
    grads, gx = network_backward(tape, probe)
    grads = dict(grads, __input__=gx)
    targets = dict(params, __input__=x)

    pairs = [(k, j) for k, v in targets.items() for j in range(v.size)]
    if coords is not None and coords < len(pairs):
        pick = np.random.default_rng([seed, 5]).choice(len(pairs), size=coords, replace=False)
        pairs = [pairs[i] for i in np.sort(pick)]

    worst, worst_name = 0.0, ""
    for name, j in pairs:
        vals = []
        for sign in (1.0, -1.0):
            p = {k: v.copy() for k, v in params.items()}
            xin = x.copy()
            arr = xin if name == "__input__" else p[name]
            arr.reshape(-1)[j] += sign * eps
            vals.append(output(p, xin))
        # difference per output pixel before contracting with the probe
        numeric = float(np.sum(probe * (vals[0] - vals[1]))) / (2 * eps)
        analytic = grads[name].reshape(-1)[j] + perturb
        err = float(relative_error(analytic, numeric))
        if err > worst:
            worst, worst_name = err, f"{name}[{j}]"
    return GradcheckResult(worst, worst_name, len(pairs))
