"""State evolution: scalar-population prediction of the per-iteration errors
of the message-passing recursion, plus the empirical-limit diagnostics."""
from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import special

from .denoise import _relu_pair_branches
from .driver import EffectiveChain, RunResult, update_gamma
from .model import Network, Trajectory, transform_signals


@dataclasses.dataclass(frozen=True)
class LinearStageLaw:
    in_dim: int
    out_dim: int
    sbar: np.ndarray
    bbar: np.ndarray
    bias: np.ndarray
    noise_precision: float
    output: bool = False

    @property
    def kind(self) -> str:
        return "linear"


@dataclasses.dataclass(frozen=True)
class NonlinearStageLaw:
    activation: str
    dim: int
    output: bool = False

    @property
    def kind(self) -> str:
        return self.activation


@dataclasses.dataclass(frozen=True)
class DisturbanceModel:
    """Per-stage disturbance laws of an effective chain: singular values,
    rotated and ambient biases, channel noise, and the input prior."""
    prior_precision: float
    stages: tuple


def disturbance_model(network: Network) -> DisturbanceModel:
    chain = EffectiveChain(network)
    laws = []
    for stage in chain.stages:
        if stage.kind == "linear":
            laws.append(LinearStageLaw(
                in_dim=stage.dim_in, out_dim=stage.dim_out,
                sbar=stage.svd.sbar_ext(), bbar=stage.svd.bbar_ext(),
                bias=stage.layer.bias.copy(),
                noise_precision=stage.layer.noise_precision))
        else:
            laws.append(NonlinearStageLaw(activation=stage.kind,
                                          dim=stage.dim_out))
    out = chain.output
    if out.kind == "linear":
        laws.append(LinearStageLaw(
            in_dim=out.svd.in_dim, out_dim=out.svd.out_dim,
            sbar=out.svd.sbar_ext(), bbar=out.svd.bbar_ext(),
            bias=out.layer.bias.copy(),
            noise_precision=out.layer.noise_precision, output=True))
    else:
        laws.append(NonlinearStageLaw(activation="relu", dim=out.dim_in,
                                      output=True))
    return DisturbanceModel(prior_precision=network.prior.precision,
                            stages=tuple(laws))


@dataclasses.dataclass
class SEState:
    tau0: list
    K_plus: list
    tau_minus: list
    alpha_bar_plus: list
    alpha_bar_minus: list
    gamma_plus: list
    gamma_minus: list
    lambda_bars: list
    predicted_mse: list
    predicted_mse_reverse: list
    tau0_trace: list
    tau0_p_trace: list
    warnings: list
    converged: bool
    iterations: int


def _psd_sqrt(k: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(k)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def _clamp(a: float, lo: float) -> float:
    return min(max(a, lo), 1.0 - lo)


def run_se(model: DisturbanceModel, layers=None, iters: int = 200,
           mc_samples: int = 100000, seed: int = 0, gamma_init: float = 1.0,
           gamma_bounds: tuple = (1e-8, 1e8), alpha_min: float = 1e-4,
           tol: float = 1e-6) -> SEState:
    """Iterate the scalar-population evolution of the recursion.

    One sample population per stage; linear stages carry a random coordinate
    index with zero-padded singular values so unequal dimensions are handled
    by activity masks. Rotation steps redraw jointly Gaussian samples from
    the tracked second moments (fixed normals, rescaled each iteration);
    ambient bias samples are re-attached after the rotation so the relu
    input law keeps its mean shift.
    """
    stages = tuple(layers) if layers is not None else model.stages
    m = len(stages)
    if m == 0:
        raise ValueError("empty stage list")
    if not stages[-1].output:
        raise ValueError("last stage must be the output stage")
    n = int(mc_samples)
    rng = np.random.default_rng(seed)

    q0_input = rng.standard_normal(n) / math.sqrt(model.prior_precision)

    idx, in_mask, out_mask, s_j, b_j, xi_j = {}, {}, {}, {}, {}, {}
    for s, rec in enumerate(stages, start=1):
        if rec.kind == "linear":
            ext = max(rec.in_dim, rec.out_dim)
            ix = rng.integers(0, ext, size=n)
            idx[s] = ix
            in_mask[s] = ix < rec.in_dim
            out_mask[s] = ix < rec.out_dim
            s_j[s] = rec.sbar[ix]
            b_j[s] = rec.bbar[ix]
            if math.isinf(rec.noise_precision):
                xi_j[s] = np.zeros(n)
            else:
                xi_j[s] = rng.standard_normal(n) / math.sqrt(rec.noise_precision)
    bias_amb = {}
    for ell in range(1, m):
        rec = stages[ell - 1]
        if rec.kind == "linear":
            bias_amb[ell] = rec.bias[rng.integers(0, rec.out_dim, size=n)]
    z1 = {ell: rng.standard_normal(n) for ell in range(m)}
    z2 = {ell: rng.standard_normal(n) for ell in range(m)}
    zq = {ell: rng.standard_normal(n) for ell in range(m)}

    def q_mask(ell):
        if ell == 0:
            return None
        return out_mask[ell] if stages[ell - 1].kind == "linear" else None

    def p_mask(ell):
        return in_mask[ell + 1] if stages[ell].kind == "linear" else None

    def masked_mean(x, mask):
        v = float(np.mean(x if mask is None else x[mask]))
        if not math.isfinite(v):
            raise RuntimeError("state evolution produced a non-finite moment")
        return v

    prior = model.prior_precision
    gamma_minus = [gamma_init] * m
    gamma_plus = [math.nan] * m
    q0 = [None] * m
    q0rot = [None] * m
    qm = [None] * m
    qp = [None] * m
    p0 = [None] * m
    pp = [None] * m
    q0[0] = q0_input

    st = SEState(tau0=[], K_plus=[], tau_minus=[], alpha_bar_plus=[],
                 alpha_bar_minus=[], gamma_plus=[], gamma_minus=[],
                 lambda_bars=[], predicted_mse=[], predicted_mse_reverse=[],
                 tau0_trace=[], tau0_p_trace=[], warnings=[],
                 converged=False, iterations=0)

    prev_row = None
    for k in range(iters):
        mse_f = [0.0] * m
        tau0_row = [0.0] * m
        k_row = [None] * m
        ab_plus = [0.0] * m

        for ell in range(m):
            if ell == 0:
                if k == 0:
                    qm[0] = -q0[0]
                gm = gamma_minus[0]
                a_raw = gm / (prior + gm)
                err_q = a_raw * (q0[0] + qm[0]) - q0[0]
                mask = None
            else:
                rec = stages[ell - 1]
                mask = q_mask(ell)
                gp, gm = gamma_plus[ell - 1], gamma_minus[ell]
                if rec.kind == "linear":
                    s_, b_, xi = s_j[ell], b_j[ell], xi_j[ell]
                    q0rot[ell] = s_ * np.where(in_mask[ell], p0[ell - 1], 0.0) \
                        + xi
                    q0[ell] = q0rot[ell] + b_
                    if k == 0:
                        qm[ell] = -q0[ell]
                    ppv = np.where(in_mask[ell], pp[ell - 1], 0.0)
                    nu = rec.noise_precision
                    if math.isinf(nu):
                        e_p = (gp * ppv + gm * s_ * qm[ell]) \
                            / (gp + gm * s_ ** 2)
                        err_q = s_ * e_p
                        d_cur = gm * s_ ** 2 / (gp + gm * s_ ** 2)
                    else:
                        det = gp * gm + nu * (gp + gm * s_ ** 2)
                        err_q = (nu * s_ * gp * ppv
                                 + (gp + nu * s_ ** 2) * gm * (xi + qm[ell])
                                 ) / det - xi
                        d_cur = gm * (gp + nu * s_ ** 2) / det
                    a_raw = masked_mean(d_cur, mask)
                else:
                    base = p0[ell - 1]
                    q0[ell] = np.maximum(base, 0.0) \
                        if rec.kind == "relu" else base
                    if k == 0:
                        qm[ell] = -q0[ell]
                    rp = p0[ell - 1] + pp[ell - 1]
                    rc = q0[ell] + qm[ell]
                    if rec.kind == "relu":
                        _, zc, _, d_cur = _relu_pair_branches(rp, rc, gp, gm)
                        err_q = zc - q0[ell]
                        a_raw = masked_mean(d_cur, None)
                    else:
                        zc = (gp * rp + gm * rc) / (gp + gm)
                        err_q = zc - q0[ell]
                        a_raw = gm / (gp + gm)
            if not (0.0 < a_raw < 1.0):
                st.warnings.append((k, ell, "plus", a_raw))
            ap = _clamp(a_raw, alpha_min)
            _, gamma_plus[ell] = update_gamma(gamma_minus[ell], ap,
                                              gamma_bounds)
            qp[ell] = (err_q - ap * qm[ell]) / (1.0 - ap)
            mse_f[ell] = masked_mean(err_q ** 2, mask)
            tau0_row[ell] = masked_mean(q0[ell] ** 2, mask)
            ab_plus[ell] = ap

            rot = q0rot[ell] if (ell > 0 and stages[ell - 1].kind == "linear") \
                else q0[ell]
            xs = rot if mask is None else rot[mask]
            ys = qp[ell] if mask is None else qp[ell][mask]
            kmat = np.array([[float(np.mean(xs * xs)), float(np.mean(xs * ys))],
                             [float(np.mean(xs * ys)), float(np.mean(ys * ys))]])
            if not np.all(np.isfinite(kmat)):
                raise RuntimeError(
                    f"state evolution produced non-finite moments at "
                    f"iteration {k}, variable {ell}")
            sq = _psd_sqrt(kmat)
            p0rot = sq[0, 0] * z1[ell] + sq[0, 1] * z2[ell]
            pp[ell] = sq[1, 0] * z1[ell] + sq[1, 1] * z2[ell]
            p0[ell] = p0rot + bias_amb[ell] if ell in bias_amb else p0rot
            k_row[ell] = kmat

        mse_r = [0.0] * m
        tau0p_row = [0.0] * m
        tau_minus_row = [0.0] * m
        ab_minus = [0.0] * m
        for ell in range(m - 1, -1, -1):
            rec = stages[ell]
            mask = p_mask(ell)
            gp = gamma_plus[ell]
            if rec.output:
                if rec.kind == "linear":
                    s_, xi = s_j[ell + 1], xi_j[ell + 1]
                    ppv = np.where(in_mask[ell + 1], pp[ell], 0.0)
                    nu = rec.noise_precision
                    if math.isinf(nu):
                        err_p = np.where(s_ > 0, 0.0, ppv)
                        d_prev = np.where(s_ > 0, 0.0, 1.0)
                    else:
                        err_p = (gp * ppv + nu * s_ * xi) / (gp + nu * s_ ** 2)
                        d_prev = gp / (gp + nu * s_ ** 2)
                    a_raw = masked_mean(d_prev, mask)
                else:
                    # exact relu observation of the ambient signal
                    rp = p0[ell] + pp[ell]
                    err_p = np.where(p0[ell] > 0, 0.0,
                                     np.minimum(rp, 0.0) - p0[ell])
                    d_prev = ((p0[ell] <= 0) & (rp < 0)).astype(float)
                    a_raw = masked_mean(d_prev, None)
            else:
                gm = gamma_minus[ell + 1]
                if rec.kind == "linear":
                    s_, xi = s_j[ell + 1], xi_j[ell + 1]
                    ppv = np.where(in_mask[ell + 1], pp[ell], 0.0)
                    nu = rec.noise_precision
                    if math.isinf(nu):
                        err_p = (gp * ppv + gm * s_ * qm[ell + 1]) \
                            / (gp + gm * s_ ** 2)
                        d_prev = gp / (gp + gm * s_ ** 2)
                    else:
                        det = gp * gm + nu * (gp + gm * s_ ** 2)
                        err_p = ((gm + nu) * gp * ppv
                                 + nu * s_ * gm * (xi + qm[ell + 1])) / det
                        d_prev = gp * (gm + nu) / det
                    a_raw = masked_mean(d_prev, mask)
                else:
                    rp = p0[ell] + pp[ell]
                    rc = q0[ell + 1] + qm[ell + 1]
                    if rec.kind == "relu":
                        zp, _, d_prev, _ = _relu_pair_branches(rp, rc, gp, gm)
                        err_p = zp - p0[ell]
                        a_raw = masked_mean(d_prev, None)
                    else:
                        zp = (gp * rp + gm * rc) / (gp + gm)
                        err_p = zp - p0[ell]
                        a_raw = gp / (gp + gm)
            if not (0.0 < a_raw < 1.0):
                st.warnings.append((k, ell, "minus", a_raw))
            am = _clamp(a_raw, alpha_min)
            _, gamma_minus[ell] = update_gamma(gamma_plus[ell], am,
                                               gamma_bounds)
            pm = (err_p - am * pp[ell]) / (1.0 - am)
            mse_r[ell] = masked_mean(err_p ** 2, mask)
            tau0p_row[ell] = masked_mean(p0[ell] ** 2, mask)
            tau_minus_row[ell] = masked_mean(pm ** 2, mask)
            qm[ell] = math.sqrt(tau_minus_row[ell]) * zq[ell]
            ab_minus[ell] = am

        st.K_plus.append(k_row)
        st.tau_minus.append(tau_minus_row)
        st.alpha_bar_plus.append(ab_plus)
        st.alpha_bar_minus.append(ab_minus)
        st.gamma_plus.append(list(gamma_plus))
        st.gamma_minus.append(list(gamma_minus))
        st.lambda_bars.append([(ab_plus[i], ab_minus[i], gamma_plus[i],
                                gamma_minus[i]) for i in range(m)])
        st.predicted_mse.append(mse_f)
        st.predicted_mse_reverse.append(mse_r)
        st.tau0_trace.append(tau0_row)
        st.tau0_p_trace.append(tau0p_row)
        st.iterations = k + 1

        row = mse_f + mse_r
        if prev_row is not None:
            delta = max(abs(a - b) / max(abs(b), 1e-30)
                        for a, b in zip(row, prev_row))
            if delta <= tol:
                st.converged = True
                break
        prev_row = row

    st.tau0 = st.tau0_trace[-1]
    return st


def _se_nmse_db(se: SEState, layer: int, iteration: int, side: str) -> float:
    if side == "forward":
        mse = se.predicted_mse[iteration][layer]
        tau = se.tau0_trace[iteration][layer]
    else:
        mse = se.predicted_mse_reverse[iteration][layer]
        tau = se.tau0_p_trace[iteration][layer]
    if tau == 0.0:
        raise ValueError("reference signal power is zero")
    if mse == 0.0:
        return -math.inf
    return 10.0 * math.log10(mse / tau)


def predicted_nmse_db(se: SEState, layer: int, iteration: int = -1,
                      side: str = "forward") -> float:
    """Predicted NMSE in dB at an ambient (even) variable."""
    n_vars = len(se.tau0)
    if not (0 <= layer < n_vars):
        raise ValueError(f"layer {layer} out of range")
    if layer % 2 != 0:
        raise ValueError("predicted NMSE is reported at ambient (even) layers")
    if iteration < 0:
        iteration += se.iterations
    return _se_nmse_db(se, layer, iteration, side)


_TEST_FNS = ("x", "x^2", "|x|", "(x-c)^2", "x*y")


def empirical_converge_check(samples: np.ndarray, test_fn: str,
                             law: tuple = ("normal", 0.0, 1.0), c: float = 0.0,
                             samples2: np.ndarray | None = None,
                             ref: float | None = None
                             ) -> tuple[float, float, float]:
    """Compare an empirical mean of a test function against its expectation
    under a declared Gaussian limit law. Returns (empirical, reference,
    absolute deviation)."""
    if test_fn not in _TEST_FNS:
        raise ValueError(f"unknown test function {test_fn!r}")
    x = np.asarray(samples, dtype=float)
    if test_fn == "x":
        emp = float(np.mean(x))
    elif test_fn == "x^2":
        emp = float(np.mean(x ** 2))
    elif test_fn == "|x|":
        emp = float(np.mean(np.abs(x)))
    elif test_fn == "(x-c)^2":
        emp = float(np.mean((x - c) ** 2))
    else:
        if samples2 is None:
            raise ValueError("x*y needs a second sample vector")
        emp = float(np.mean(x * np.asarray(samples2, dtype=float)))

    if ref is None:
        kind, mu, var = law
        if kind != "normal":
            raise ValueError(f"unknown law {kind!r}")
        sig = math.sqrt(var)
        if test_fn == "x":
            ref = mu
        elif test_fn == "x^2":
            ref = mu * mu + var
        elif test_fn == "(x-c)^2":
            ref = (mu - c) ** 2 + var
        elif test_fn == "|x|":
            if sig == 0.0:
                ref = abs(mu)
            else:
                t = mu / sig
                phi = math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
                ref = sig * 2 * phi + mu * (1.0 - 2.0 * special.ndtr(-t))
        else:
            raise ValueError("x*y needs an explicit reference mean")
    return emp, float(ref), abs(emp - float(ref))


def message_error_correlations(network: Network, result: RunResult,
                               truth: Trajectory) -> dict:
    """Per-iteration componentwise correlation between the incoming-message
    errors on the two sides of every interior stage, in that stage's natural
    coordinates. Needs a run made with keep_messages=True."""
    if result.r_minus_trace is None or result.r_plus_trace is None:
        raise ValueError("run must keep message traces")
    chain = EffectiveChain(network)
    tr = transform_signals(network, truth) if truth.q0 is None else truth
    out = {}
    for k in range(len(result.r_minus_trace)):
        for s in range(1, chain.num_vars):
            stage = chain.stages[s - 1]
            if stage.kind == "linear":
                q_err = stage.svd.v_out.T @ result.r_minus_trace[k][s] \
                    - tr.q0[s]
                p_err = stage.svd.v_in @ result.r_plus_trace[k][s - 1] \
                    - tr.p0[s - 1]
            else:
                q_err = result.r_minus_trace[k][s] - tr.q0[s]
                p_err = result.r_plus_trace[k][s - 1] - tr.p0[s - 1]
            nn = min(q_err.size, p_err.size)
            out[(k, s)] = float(np.corrcoef(q_err[:nn], p_err[:nn])[0, 1])
    return out
