"""Direct-optimization baseline: Adam on the input-space MAP objective of a
network whose hidden layers are noiseless."""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from .model import LinearLayer, Network, NonlinearLayer


@dataclasses.dataclass(frozen=True)
class OptimizerOptions:
    step_size: float = 0.01
    iters: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    restarts: int = 1

    def __post_init__(self):
        if self.step_size <= 0:
            raise ValueError("step_size must be positive")
        if self.iters < 0:
            raise ValueError("iters must be nonnegative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.restarts < 1:
            raise ValueError("restarts must be at least 1")


@dataclasses.dataclass
class OptimizeResult:
    z0: np.ndarray
    objective: float
    trace: list
    iterations: int


def _validate_deterministic(network: Network) -> None:
    for i, lay in enumerate(network.layers[:-2]):
        if isinstance(lay, LinearLayer) and math.isfinite(lay.noise_precision):
            raise ValueError(
                f"layer {i}: hidden-layer noise is not supported by the "
                f"direct optimizer")


def _propagate(network: Network, z0: np.ndarray) -> tuple[np.ndarray, list]:
    """Noise-free forward pass; caches what the backward pass needs."""
    z = z0
    cache = []
    for lay in network.layers:
        if isinstance(lay, LinearLayer):
            cache.append(("linear", lay.weights))
            z = lay.weights @ z + lay.bias
        else:
            if lay.activation == "relu":
                cache.append(("relu", z))
                z = np.maximum(z, 0.0)
            else:
                cache.append(("identity", None))
    return z, cache


def objective(network: Network, y: np.ndarray, z0: np.ndarray) -> float:
    """MAP objective over the input alone: prior quadratic plus the output
    misfit. An exact observation turns the misfit into an indicator."""
    _validate_deterministic(network)
    z0 = np.asarray(z0, dtype=float)
    if z0.shape != (network.input_dim,):
        raise ValueError(
            f"input has shape {z0.shape}, expected ({network.input_dim},)")
    y = np.asarray(y, dtype=float)
    out, _ = _propagate(network, z0)
    if y.shape != out.shape:
        raise ValueError(f"observation has shape {y.shape}, expected {out.shape}")
    val = 0.5 * network.prior.precision * float(z0 @ z0)
    last = network.layers[-1]
    nu = network.layers[-2].noise_precision
    exact = isinstance(last, NonlinearLayer) and last.activation == "relu"
    if exact or math.isinf(nu):
        resid = float(np.linalg.norm(y - out))
        if resid > 1e-9 * (1.0 + float(np.linalg.norm(y))):
            return math.inf
        return val
    resid = y - out
    return val + 0.5 * nu * float(resid @ resid)


def _check_smooth(network: Network) -> float:
    _validate_deterministic(network)
    last = network.layers[-1]
    nu = network.layers[-2].noise_precision
    if (isinstance(last, NonlinearLayer) and last.activation == "relu") \
            or math.isinf(nu):
        raise ValueError(
            "direct optimization needs a finite output noise precision")
    return nu


def gradient(network: Network, y: np.ndarray, z0: np.ndarray) -> np.ndarray:
    """Reverse-mode gradient of the objective; relu uses the subgradient that
    is zero at the kink."""
    nu = _check_smooth(network)
    z0 = np.asarray(z0, dtype=float)
    y = np.asarray(y, dtype=float)
    out, cache = _propagate(network, z0)
    v = -nu * (y - out)
    for kind, data in reversed(cache):
        if kind == "linear":
            v = data.T @ v
        elif kind == "relu":
            v = v * (data > 0)
    return network.prior.precision * z0 + v


def minimize(network: Network, y: np.ndarray,
             opts: OptimizerOptions = OptimizerOptions()) -> OptimizeResult:
    """Adam with bias correction; keeps the best iterate seen. Every start
    is a standard-normal draw: a deterministic zero start can be a dead
    point, since negative biases switch all units off around the origin."""
    _check_smooth(network)
    y = np.asarray(y, dtype=float)
    rng = np.random.default_rng(opts.seed)
    n = network.input_dim
    best_z, best_j, best_trace = None, math.inf, []

    for r in range(opts.restarts):
        z = rng.normal(0.0, 1.0, size=n)
        m = np.zeros(n)
        v = np.zeros(n)
        run_best_j = objective(network, y, z)
        run_best_z = z.copy()
        trace = [run_best_j]
        for t in range(1, opts.iters + 1):
            g = gradient(network, y, z)
            if not np.all(np.isfinite(g)):
                raise RuntimeError(f"non-finite gradient at step {t}")
            m = opts.beta1 * m + (1.0 - opts.beta1) * g
            v = opts.beta2 * v + (1.0 - opts.beta2) * g * g
            mhat = m / (1.0 - opts.beta1 ** t)
            vhat = v / (1.0 - opts.beta2 ** t)
            z = z - opts.step_size * mhat / (np.sqrt(vhat) + opts.epsilon)
            j = objective(network, y, z)
            if not math.isfinite(j):
                raise RuntimeError(f"objective became non-finite at step {t}")
            if j < run_best_j:
                run_best_j = j
                run_best_z = z.copy()
            trace.append(run_best_j)
        if run_best_j < best_j:
            best_j, best_z, best_trace = run_best_j, run_best_z, trace

    return OptimizeResult(z0=best_z, objective=best_j, trace=best_trace,
                          iterations=opts.iters)
