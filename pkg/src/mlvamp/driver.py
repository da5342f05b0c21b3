"""Message-passing driver: effective-chain compilation, the forward/reverse
recursion with adaptive or fixed precisions, damping, and diagnostics."""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from .model import LinearLayer, Network, NonlinearLayer, decompose_linear
from .denoise import (PrecisionPair, linear_denoise, prox_identity_pair,
                      prox_input, prox_output_linear, prox_output_relu,
                      prox_relu_pair)


class DivergenceError(RuntimeError):
    """Raised when a message becomes non-finite; carries the half-iteration
    and layer where it happened."""

    def __init__(self, half_iteration: int, layer: int, message: str):
        super().__init__(
            f"divergence at half-iteration {half_iteration}, layer {layer}: "
            f"{message}")
        self.half_iteration = half_iteration
        self.layer = layer


@dataclasses.dataclass(frozen=True)
class _Stage:
    kind: str
    layer: LinearLayer | None
    svd: object | None
    dim_in: int
    dim_out: int


@dataclasses.dataclass(frozen=True)
class _Output:
    kind: str
    layer: LinearLayer | None
    svd: object | None
    dim_in: int
    dim_obs: int


class EffectiveChain:
    """Inference view of a stored network.

    A trailing [linear, identity] pair collapses into a linear observation
    stage; a trailing [linear, relu] keeps the linear layer as an interior
    stage under an exact relu observation. Variables are the remaining signals
    z_0..z_{M-1}.
    """

    def __init__(self, network: Network):
        self.network = network
        last = network.layers[-1]
        if not isinstance(last, NonlinearLayer):
            raise ValueError("network must end with a nonlinear layer")
        if last.activation == "identity":
            interior = network.layers[:-2]
            out_layer = network.layers[-2]
            self.output = _Output(kind="linear", layer=out_layer,
                                  svd=decompose_linear(out_layer),
                                  dim_in=out_layer.in_dim,
                                  dim_obs=out_layer.out_dim)
        else:
            interior = network.layers[:-1]
            self.output = _Output(kind="relu", layer=None, svd=None,
                                  dim_in=last.dim, dim_obs=last.dim)
        stages = []
        for lay in interior:
            if isinstance(lay, LinearLayer):
                stages.append(_Stage(kind="linear", layer=lay,
                                     svd=decompose_linear(lay),
                                     dim_in=lay.in_dim, dim_out=lay.out_dim))
            else:
                stages.append(_Stage(kind=lay.activation, layer=None, svd=None,
                                     dim_in=lay.dim, dim_out=lay.dim))
        self.stages = tuple(stages)
        self.var_dims = [network.input_dim] + [s.dim_out for s in stages]
        self.num_vars = len(self.var_dims)


@dataclasses.dataclass(frozen=True)
class RunOptions:
    max_iters: int = 500
    damping: float = 0.8
    gamma_min: float = 1e-8
    gamma_max: float = 1e8
    alpha_min: float = 1e-4
    mode: str = "adaptive"
    fixed_gammas: tuple | None = None
    tol: float = 1e-8
    seed: int = 0
    gamma_init: float = 1.0
    keep_messages: bool = False

    def __post_init__(self):
        if not (0 < self.damping <= 1):
            raise ValueError("damping must lie in (0, 1]")
        if self.mode not in ("adaptive", "fixed"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.mode == "fixed" and self.fixed_gammas is None:
            raise ValueError("fixed mode requires fixed_gammas")
        if not (0 < self.gamma_min <= self.gamma_max):
            raise ValueError("need 0 < gamma_min <= gamma_max")


@dataclasses.dataclass
class BeliefState:
    r_plus: list
    r_minus: list
    gamma_plus: list
    gamma_minus: list
    zhat_plus: list
    zhat_minus: list
    alpha_plus: list
    alpha_minus: list
    eta_plus: list
    eta_minus: list
    iteration: int = 0


@dataclasses.dataclass
class RunResult:
    nmse_db: list | None
    gamma_plus_trace: list
    gamma_minus_trace: list
    alpha_plus_trace: list
    alpha_minus_trace: list
    state: BeliefState
    converged: bool
    iterations: int
    r_plus_trace: list | None = None
    r_minus_trace: list | None = None


def extrinsic(zhat: np.ndarray, alpha: float, r: np.ndarray) -> np.ndarray:
    """Extrinsic message: remove the fraction of the estimate explained by
    the incoming message."""
    return (zhat - alpha * r) / (1.0 - alpha)


def update_gamma(gamma: float, alpha: float,
                 bounds: tuple = (1e-8, 1e8)) -> tuple[float, float]:
    """Precision recursion: eta = gamma/alpha, new gamma = eta - gamma,
    clamped into bounds."""
    eta = gamma / alpha
    return eta, min(max(eta - gamma, bounds[0]), bounds[1])


def nmse_db(zhat: np.ndarray, z0: np.ndarray) -> float:
    """Normalized squared error in dB; exact recovery gives -inf."""
    z0 = np.asarray(z0, dtype=float)
    denom = float(z0 @ z0)
    if denom == 0.0:
        raise ValueError("reference signal is identically zero")
    diff = np.asarray(zhat, dtype=float) - z0
    num = float(diff @ diff)
    if num == 0.0:
        return -math.inf
    return 10.0 * math.log10(num / denom)


def _init_state(chain: EffectiveChain, opts: RunOptions) -> BeliefState:
    dims = chain.var_dims
    if opts.mode == "fixed":
        if len(opts.fixed_gammas) != chain.num_vars:
            raise ValueError("fixed_gammas must have one pair per variable")
        gplus = [float(g[0]) for g in opts.fixed_gammas]
        gminus = [float(g[1]) for g in opts.fixed_gammas]
    else:
        gplus = [None] * chain.num_vars
        gminus = [opts.gamma_init] * chain.num_vars
    return BeliefState(
        r_plus=[None] * chain.num_vars,
        r_minus=[np.zeros(d) for d in dims],
        gamma_plus=gplus,
        gamma_minus=gminus,
        zhat_plus=[None] * chain.num_vars,
        zhat_minus=[None] * chain.num_vars,
        alpha_plus=[math.nan] * chain.num_vars,
        alpha_minus=[math.nan] * chain.num_vars,
        eta_plus=[math.nan] * chain.num_vars,
        eta_minus=[math.nan] * chain.num_vars,
        iteration=0,
    )


def _fixed_alphas(gp: float, gm: float) -> tuple[float, float]:
    eta = gp + gm
    return gm / eta, gp / eta


def _check_finite(arr: np.ndarray, half: int, layer: int, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise DivergenceError(half, layer, f"non-finite {what}")


def _damp(new: np.ndarray, old: np.ndarray | None, rho: float) -> np.ndarray:
    if old is None or rho == 1.0:
        return new
    return rho * new + (1.0 - rho) * old


def _damp_gamma(new: float, old: float | None, rho: float) -> float:
    if old is None or rho == 1.0:
        return new
    return new ** rho * old ** (1.0 - rho)


def _clamp(a: float, lo: float) -> float:
    return min(max(a, lo), 1.0 - lo)


def _pair_denoise(stage: _Stage, r_prev, r_cur, theta: PrecisionPair):
    if stage.kind == "linear":
        return linear_denoise(stage.svd, r_prev, r_cur, theta)
    if stage.kind == "relu":
        return prox_relu_pair(r_prev, r_cur, theta)
    return prox_identity_pair(r_prev, r_cur, theta)


def _forward(chain: EffectiveChain, st: BeliefState, opts: RunOptions,
             k: int) -> None:
    half = 2 * k
    bounds = (opts.gamma_min, opts.gamma_max)
    fixed = opts.mode == "fixed"
    prior = chain.network.prior.precision

    zhat, a_raw = prox_input(st.r_minus[0], st.gamma_minus[0], prior)
    if fixed:
        ap, _ = _fixed_alphas(st.gamma_plus[0], st.gamma_minus[0])
        eta = st.gamma_plus[0] + st.gamma_minus[0]
        gp = st.gamma_plus[0]
    else:
        ap = _clamp(a_raw, opts.alpha_min)
        eta, gp_cand = update_gamma(st.gamma_minus[0], ap, bounds)
        gp = _damp_gamma(gp_cand, st.gamma_plus[0] if k > 0 else None,
                         opts.damping)
    r_cand = extrinsic(zhat, ap, st.r_minus[0])
    r_new = _damp(r_cand, st.r_plus[0] if k > 0 else None, opts.damping)
    _check_finite(r_new, half, 0, "forward message")
    st.zhat_plus[0] = zhat
    st.alpha_plus[0] = ap
    st.eta_plus[0] = eta
    st.gamma_plus[0] = gp
    st.r_plus[0] = r_new

    for ell in range(1, chain.num_vars):
        stage = chain.stages[ell - 1]
        theta = PrecisionPair(st.gamma_plus[ell - 1], st.gamma_minus[ell])
        res = _pair_denoise(stage, st.r_plus[ell - 1], st.r_minus[ell], theta)
        if fixed:
            ap, _ = _fixed_alphas(st.gamma_plus[ell], st.gamma_minus[ell])
            eta = st.gamma_plus[ell] + st.gamma_minus[ell]
            gp = st.gamma_plus[ell]
        else:
            ap = _clamp(res.alpha_plus, opts.alpha_min)
            eta, gp_cand = update_gamma(st.gamma_minus[ell], ap, bounds)
            gp = _damp_gamma(gp_cand, st.gamma_plus[ell] if k > 0 else None,
                             opts.damping)
        r_cand = extrinsic(res.zhat_cur, ap, st.r_minus[ell])
        r_new = _damp(r_cand, st.r_plus[ell] if k > 0 else None, opts.damping)
        _check_finite(r_new, half, ell, "forward message")
        st.zhat_plus[ell] = res.zhat_cur
        st.alpha_plus[ell] = ap
        st.eta_plus[ell] = eta
        st.gamma_plus[ell] = gp
        st.r_plus[ell] = r_new


def _reverse(chain: EffectiveChain, y: np.ndarray, st: BeliefState,
             opts: RunOptions, k: int) -> None:
    half = 2 * k + 1
    bounds = (opts.gamma_min, opts.gamma_max)
    fixed = opts.mode == "fixed"
    last = chain.num_vars - 1

    if chain.output.kind == "linear":
        zhat, a_raw = prox_output_linear(chain.output.svd, st.r_plus[last], y,
                                         st.gamma_plus[last])
    else:
        zhat, a_raw = prox_output_relu(st.r_plus[last], y)
    _apply_reverse(chain, st, opts, k, last, zhat, a_raw, half, bounds, fixed)

    for ell in range(last - 1, -1, -1):
        stage = chain.stages[ell]
        theta = PrecisionPair(st.gamma_plus[ell], st.gamma_minus[ell + 1])
        res = _pair_denoise(stage, st.r_plus[ell], st.r_minus[ell + 1], theta)
        _apply_reverse(chain, st, opts, k, ell, res.zhat_prev,
                       res.alpha_minus, half, bounds, fixed)


def _apply_reverse(chain, st, opts, k, ell, zhat, a_raw, half, bounds,
                   fixed) -> None:
    if fixed:
        _, am = _fixed_alphas(st.gamma_plus[ell], st.gamma_minus[ell])
        eta = st.gamma_plus[ell] + st.gamma_minus[ell]
        gm = st.gamma_minus[ell]
    else:
        am = _clamp(a_raw, opts.alpha_min)
        eta, gm_cand = update_gamma(st.gamma_plus[ell], am, bounds)
        gm = _damp_gamma(gm_cand, st.gamma_minus[ell] if k > 0 else None,
                         opts.damping)
    r_cand = extrinsic(zhat, am, st.r_plus[ell])
    r_new = _damp(r_cand, st.r_minus[ell] if k > 0 else None, opts.damping)
    _check_finite(r_new, half, ell, "reverse message")
    st.zhat_minus[ell] = zhat
    st.alpha_minus[ell] = am
    st.eta_minus[ell] = eta
    st.gamma_minus[ell] = gm
    st.r_minus[ell] = r_new


def _snapshot(result: RunResult, st: BeliefState, chain: EffectiveChain,
              truth, side: str) -> None:
    result.gamma_plus_trace.append(list(st.gamma_plus))
    result.gamma_minus_trace.append(list(st.gamma_minus))
    result.alpha_plus_trace.append(list(st.alpha_plus))
    result.alpha_minus_trace.append(list(st.alpha_minus))
    if truth is not None:
        zhats = st.zhat_plus if side == "plus" else st.zhat_minus
        result.nmse_db.append(
            [nmse_db(zhats[ell], truth.z0[ell])
             for ell in range(chain.num_vars)])


def run(network: Network, y: np.ndarray, truth=None,
        opts: RunOptions = RunOptions()) -> RunResult:
    """Iterate the forward/reverse recursion on a network and observation.

    truth, when given, is a Trajectory; per-half-iteration NMSE is recorded
    against its signals (forward halves use the forward estimates, reverse
    halves the reverse ones).
    """
    chain = EffectiveChain(network)
    y = np.asarray(y, dtype=float)
    if y.shape != (chain.output.dim_obs,):
        raise ValueError(
            f"observation has shape {y.shape}, expected "
            f"({chain.output.dim_obs},)")
    st = _init_state(chain, opts)
    result = RunResult(
        nmse_db=[] if truth is not None else None,
        gamma_plus_trace=[], gamma_minus_trace=[],
        alpha_plus_trace=[], alpha_minus_trace=[],
        state=st, converged=False, iterations=0,
        r_plus_trace=[] if opts.keep_messages else None,
        r_minus_trace=[] if opts.keep_messages else None)

    prev_zhat = None
    for k in range(opts.max_iters):
        if opts.keep_messages:
            result.r_minus_trace.append([r.copy() for r in st.r_minus])
        _forward(chain, st, opts, k)
        if opts.keep_messages:
            result.r_plus_trace.append([r.copy() for r in st.r_plus])
        _snapshot(result, st, chain, truth, "plus")
        _reverse(chain, y, st, opts, k)
        _snapshot(result, st, chain, truth, "minus")
        st.iteration = k + 1
        result.iterations = k + 1

        delta = 0.0
        if prev_zhat is not None:
            for ell in range(chain.num_vars):
                denom = max(float(np.linalg.norm(st.zhat_plus[ell])), 1e-300)
                delta = max(delta, float(np.linalg.norm(
                    st.zhat_plus[ell] - prev_zhat[ell])) / denom)
            if delta <= opts.tol:
                result.converged = True
                break
        prev_zhat = [z.copy() for z in st.zhat_plus]
    return result
