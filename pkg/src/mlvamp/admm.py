"""Fixed-precision runs, the splitting-method reference stepper they must
match step for step, the augmented Lagrangian, and the KKT checker."""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from . import driver as _driver
from .denoise import PrecisionPair
from .driver import (BeliefState, EffectiveChain, RunOptions, RunResult,
                     _pair_denoise)
from .denoise import prox_input, prox_output_linear, prox_output_relu
from .model import Network


@dataclasses.dataclass
class DualState:
    s_plus: list
    s_minus: list
    eta: list


@dataclasses.dataclass
class KktReport:
    primal_gap: list
    dual_gap: list
    stationarity_residual: list
    passed: bool


def _fixed_pairs(gammas) -> list[tuple[float, float]]:
    return [(float(g[0]), float(g[1])) for g in gammas]


def run_fixed_traced(network: Network, y: np.ndarray, gammas, iters: int
                     ) -> tuple[RunResult, DualState, list]:
    """Fixed-precision, undamped run that also captures every iterate.

    The trace holds, per iteration, copies of the estimates, messages, and
    the duals implied by them.
    """
    pairs = _fixed_pairs(gammas)
    opts = RunOptions(max_iters=iters, damping=1.0, mode="fixed",
                      fixed_gammas=tuple(pairs), tol=-1.0)
    chain = EffectiveChain(network)
    y = np.asarray(y, dtype=float)
    st = _driver._init_state(chain, opts)
    result = RunResult(nmse_db=None, gamma_plus_trace=[], gamma_minus_trace=[],
                       alpha_plus_trace=[], alpha_minus_trace=[],
                       state=st, converged=False, iterations=0)
    eta = [gp + gm for gp, gm in pairs]
    a_plus = [gm / e for (_, gm), e in zip(pairs, eta)]
    a_minus = [gp / e for (gp, _), e in zip(pairs, eta)]
    trace = []
    prev_zhat = None
    delta = math.inf
    for k in range(iters):
        _driver._forward(chain, st, opts, k)
        _driver._snapshot(result, st, chain, None, "plus")
        s_plus = [a_minus[ell] * (st.r_plus[ell] - st.zhat_plus[ell])
                  for ell in range(chain.num_vars)]
        _driver._reverse(chain, y, st, opts, k)
        _driver._snapshot(result, st, chain, None, "minus")
        s_minus = [a_plus[ell] * (st.zhat_minus[ell] - st.r_minus[ell])
                   for ell in range(chain.num_vars)]
        trace.append({
            "zhat_plus": [z.copy() for z in st.zhat_plus],
            "zhat_minus": [z.copy() for z in st.zhat_minus],
            "r_plus": [r.copy() for r in st.r_plus],
            "r_minus": [r.copy() for r in st.r_minus],
            "s_plus": [s.copy() for s in s_plus],
            "s_minus": [s.copy() for s in s_minus],
        })
        st.iteration = k + 1
        result.iterations = k + 1
        if prev_zhat is not None:
            delta = max(
                float(np.linalg.norm(st.zhat_plus[ell] - prev_zhat[ell]))
                / max(float(np.linalg.norm(st.zhat_plus[ell])), 1e-300)
                for ell in range(chain.num_vars))
        prev_zhat = [z.copy() for z in st.zhat_plus]
    result.converged = delta <= 1e-8
    duals = DualState(s_plus=trace[-1]["s_plus"],
                      s_minus=trace[-1]["s_minus"], eta=eta)
    return result, duals, trace


def run_fixed(network: Network, y: np.ndarray, gammas, iters: int
              ) -> tuple[RunResult, DualState]:
    """Run the recursion with precisions held fixed (undamped), returning the
    result and the dual variables implied by the final messages."""
    result, duals, _ = run_fixed_traced(network, y, gammas, iters)
    return result, duals


@dataclasses.dataclass
class AdmmState:
    """State of the reference splitting stepper: estimates and duals only;
    messages are reconstructed from them inside each step."""
    z_plus: list
    z_minus: list
    s_plus: list
    s_minus: list
    gamma_plus: list
    gamma_minus: list

    @property
    def eta(self) -> list:
        return [gp + gm for gp, gm in zip(self.gamma_plus, self.gamma_minus)]


def init_admm_state(network: Network, gammas) -> AdmmState:
    chain = EffectiveChain(network)
    pairs = _fixed_pairs(gammas)
    if len(pairs) != chain.num_vars:
        raise ValueError("need one gamma pair per variable")
    dims = chain.var_dims
    return AdmmState(
        z_plus=[np.zeros(d) for d in dims],
        z_minus=[np.zeros(d) for d in dims],
        s_plus=[np.zeros(d) for d in dims],
        s_minus=[np.zeros(d) for d in dims],
        gamma_plus=[gp for gp, _ in pairs],
        gamma_minus=[gm for _, gm in pairs])


def admm_step_reference(state: AdmmState, network: Network, y: np.ndarray
                        ) -> AdmmState:
    """One forward/reverse sweep of the splitting method.

    Stage subproblems are the same minimizations the denoisers solve, entered
    through the effective targets z -/+ s/alpha; the dual ascents and the
    (z, s) bookkeeping are maintained independently of the message recursion.
    """
    chain = EffectiveChain(network)
    y = np.asarray(y, dtype=float)
    m = chain.num_vars
    gp, gm = state.gamma_plus, state.gamma_minus
    eta = state.eta
    a_plus = [gm[ell] / eta[ell] for ell in range(m)]
    a_minus = [gp[ell] / eta[ell] for ell in range(m)]

    z_plus = [None] * m
    s_plus = [None] * m
    for ell in range(m):
        r_minus = state.z_minus[ell] - state.s_minus[ell] / a_plus[ell]
        if ell == 0:
            zp, _ = prox_input(r_minus, gm[0], network.prior.precision)
        else:
            r_plus = z_plus[ell - 1] + s_plus[ell - 1] / a_minus[ell - 1]
            res = _pair_denoise(chain.stages[ell - 1], r_plus, r_minus,
                                PrecisionPair(gp[ell - 1], gm[ell]))
            zp = res.zhat_cur
        s_plus[ell] = state.s_minus[ell] + a_plus[ell] * (zp - state.z_minus[ell])
        z_plus[ell] = zp

    z_minus = [None] * m
    s_minus = [None] * m
    for ell in range(m - 1, -1, -1):
        r_plus = z_plus[ell] + s_plus[ell] / a_minus[ell]
        if ell == m - 1:
            if chain.output.kind == "linear":
                zm, _ = prox_output_linear(chain.output.svd, r_plus, y, gp[ell])
            else:
                zm, _ = prox_output_relu(r_plus, y)
        else:
            r_minus = z_minus[ell + 1] - s_minus[ell + 1] / a_plus[ell + 1]
            res = _pair_denoise(chain.stages[ell], r_plus, r_minus,
                                PrecisionPair(gp[ell], gm[ell + 1]))
            zm = res.zhat_prev
        s_minus[ell] = s_plus[ell] + a_minus[ell] * (z_plus[ell] - zm)
        z_minus[ell] = zm

    return AdmmState(z_plus=z_plus, z_minus=z_minus, s_plus=s_plus,
                     s_minus=s_minus, gamma_plus=list(gp), gamma_minus=list(gm))


_FEAS_TOL = 1e-9


def _feasible(resid: np.ndarray, scale: float) -> bool:
    return float(np.max(np.abs(resid), initial=0.0)) <= _FEAS_TOL * (1.0 + scale)


def lagrangian(network: Network, y: np.ndarray, z_plus, z_minus,
               duals: DualState) -> float:
    """Augmented Lagrangian value at a split point.

    Deterministic stages (infinite precision, relu, identity) enter as
    feasibility indicators: +inf on violation beyond a small tolerance.
    Additive normalization constants are dropped throughout.
    """
    chain = EffectiveChain(network)
    y = np.asarray(y, dtype=float)
    s = duals.s_plus
    eta = duals.eta
    total = 0.5 * network.prior.precision * float(z_plus[0] @ z_plus[0])
    for ell in range(chain.num_vars):
        diff = z_plus[ell] - z_minus[ell]
        total += eta[ell] * float(s[ell] @ diff)
        total += 0.5 * eta[ell] * float(diff @ diff)

    def channel(stage_kind, layer, z_in, z_out) -> float:
        if stage_kind == "linear":
            resid = z_out - layer.weights @ z_in - layer.bias
            nu = layer.noise_precision
            if math.isinf(nu):
                return 0.0 if _feasible(
                    resid, float(np.max(np.abs(z_out), initial=0.0))) else math.inf
            return 0.5 * nu * float(resid @ resid)
        target = np.maximum(z_in, 0.0) if stage_kind == "relu" else z_in
        ok = _feasible(z_out - target,
                       float(np.max(np.abs(target), initial=0.0)))
        return 0.0 if ok else math.inf

    for idx, stage in enumerate(chain.stages, start=1):
        total += channel(stage.kind, stage.layer, z_minus[idx - 1], z_plus[idx])
        if math.isinf(total):
            return math.inf
    out = chain.output
    total += channel(out.kind, out.layer, z_minus[chain.num_vars - 1], y)
    return float(total)


def check_fixed_point(network: Network, y: np.ndarray, state: BeliefState,
                      duals: DualState, primal_tol: float = 1e-8,
                      dual_tol: float = 1e-8,
                      stationarity_tol: float = 1e-6) -> KktReport:
    """Verify a claimed fixed point: split consistency, dual consistency, and
    per-stage stationarity of the Lagrangian at the iterate."""
    chain = EffectiveChain(network)
    y = np.asarray(y, dtype=float)
    m = chain.num_vars
    zp, zm = state.zhat_plus, state.zhat_minus
    s, eta = duals.s_plus, duals.eta

    primal = [float(np.linalg.norm(zp[ell] - zm[ell]))
              / max(float(np.linalg.norm(zp[ell])), 1e-300)
              for ell in range(m)]
    dual = [float(np.linalg.norm(duals.s_plus[ell] - duals.s_minus[ell]))
            / max(1.0, float(np.linalg.norm(duals.s_plus[ell])))
            for ell in range(m)]

    def side_grads(ell: int) -> tuple[np.ndarray, np.ndarray]:
        # gradients of the coupling/dual terms wrt (z_minus[ell-1], z_plus[ell])
        a = -eta[ell - 1] * s[ell - 1] \
            + state.gamma_plus[ell - 1] * (zm[ell - 1] - zp[ell - 1])
        c = eta[ell] * s[ell] + state.gamma_minus[ell] * (zp[ell] - zm[ell])
        return a, c

    stat = []
    g0 = network.prior.precision * zp[0] + eta[0] * s[0] \
        + state.gamma_minus[0] * (zp[0] - zm[0])
    stat.append(float(np.linalg.norm(g0)))

    for ell in range(1, m):
        stage = chain.stages[ell - 1]
        a, c = side_grads(ell)
        z_in, z_out = zm[ell - 1], zp[ell]
        if stage.kind == "linear":
            lay = stage.layer
            resid = z_out - lay.weights @ z_in - lay.bias
            if math.isinf(lay.noise_precision):
                red = a + lay.weights.T @ c
                val = math.hypot(float(np.linalg.norm(red)),
                                 float(np.linalg.norm(resid)))
            else:
                g_in = -lay.noise_precision * (lay.weights.T @ resid) + a
                g_out = lay.noise_precision * resid + c
                val = math.hypot(float(np.linalg.norm(g_in)),
                                 float(np.linalg.norm(g_out)))
        elif stage.kind == "identity":
            val = math.hypot(float(np.linalg.norm(a + c)),
                             float(np.linalg.norm(z_out - z_in)))
        else:
            feas = z_out - np.maximum(z_in, 0.0)
            comp = np.where(
                z_in > 0, np.abs(a + c),
                np.where(z_in < 0, np.abs(a),
                         np.hypot(np.maximum(a, 0.0),
                                  np.maximum(-(a + c), 0.0))))
            val = math.hypot(float(np.linalg.norm(comp)),
                             float(np.linalg.norm(feas)))
        stat.append(val)

    base = -eta[m - 1] * s[m - 1] \
        + state.gamma_plus[m - 1] * (zm[m - 1] - zp[m - 1])
    out = chain.output
    z = zm[m - 1]
    if out.kind == "linear":
        lay = out.layer
        resid = y - lay.weights @ z - lay.bias
        if math.isinf(lay.noise_precision):
            vbase = out.svd.v_in @ base
            null = out.svd.sbar_ext()[:out.svd.in_dim] == 0.0
            val = math.hypot(float(np.linalg.norm(vbase[null])),
                             float(np.linalg.norm(resid)))
        else:
            g = -lay.noise_precision * (lay.weights.T @ resid) + base
            val = float(np.linalg.norm(g))
    else:
        feas = np.where(y > 0, z - y, np.maximum(z, 0.0))
        comp = np.where(y > 0, 0.0,
                        np.where(z < 0, np.abs(base), np.maximum(base, 0.0)))
        val = math.hypot(float(np.linalg.norm(comp)),
                         float(np.linalg.norm(feas)))
    stat.append(val)

    passed = (all(p <= primal_tol for p in primal)
              and all(d <= dual_tol for d in dual)
              and all(v <= stationarity_tol for v in stat))
    return KktReport(primal_gap=primal, dual_gap=dual,
                     stationarity_residual=stat, passed=passed)
