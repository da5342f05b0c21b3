"""MAP denoisers for the message-passing recursion: input prox, componentwise
pair proxes, the SVD-diagonalized linear pair, and the output stages."""
from __future__ import annotations

import dataclasses
import math

import numpy as np

from .model import LinearLayerSVD

ALPHA_MIN = 1e-4


def clamp_alpha(alpha: float, alpha_min: float = ALPHA_MIN) -> float:
    return min(max(alpha, alpha_min), 1.0 - alpha_min)


@dataclasses.dataclass(frozen=True)
class PrecisionPair:
    gamma_prev_plus: float
    gamma_cur_minus: float

    def __post_init__(self):
        if not (self.gamma_prev_plus > 0 and self.gamma_cur_minus > 0):
            raise ValueError("precisions must be positive")


@dataclasses.dataclass(frozen=True)
class DenoiseResult:
    zhat_prev: np.ndarray
    zhat_cur: np.ndarray
    alpha_plus: float
    alpha_minus: float


def prox_input(r: np.ndarray, gamma: float, prior_precision: float
               ) -> tuple[np.ndarray, float]:
    """Gaussian-prior input prox and its sensitivity.

    Minimizes prior/2 |z|^2 + gamma/2 |z - r|^2 componentwise.
    """
    if not (gamma > 0):
        raise ValueError("gamma must be positive")
    scale = gamma / (prior_precision + gamma)
    return scale * np.asarray(r, dtype=float), scale


def _relu_pair_branches(r_prev: np.ndarray, r_cur: np.ndarray,
                        gamma_plus: float, gamma_minus: float):
    """Componentwise relu pair prox. Returns input/output minimizers and the
    per-component sensitivities of each side to its own r."""
    rp = np.asarray(r_prev, dtype=float)
    rc = np.asarray(r_cur, dtype=float)
    gp, gm = gamma_plus, gamma_minus

    # inactive branch: z_cur = 0, z_prev = min(r_prev, 0)
    zp_neg = np.minimum(rp, 0.0)
    e_neg = 0.5 * gp * (zp_neg - rp) ** 2 + 0.5 * gm * rc ** 2

    # active branch: z_prev = z_cur = max(0, weighted mean)
    t = (gp * rp + gm * rc) / (gp + gm)
    z_pos = np.maximum(t, 0.0)
    e_pos = 0.5 * gp * (z_pos - rp) ** 2 + 0.5 * gm * (z_pos - rc) ** 2

    active = e_pos < e_neg
    zp = np.where(active, z_pos, zp_neg)
    zc = np.where(active, z_pos, 0.0)
    slope = gm / (gp + gm)
    d_cur = np.where(active & (t > 0), slope, 0.0)
    d_prev = np.where(active, np.where(t > 0, gp / (gp + gm), 0.0),
                      np.where(rp < 0, 1.0, 0.0))
    return zp, zc, d_prev, d_cur


def prox_relu_pair(r_prev: np.ndarray, r_cur: np.ndarray,
                   theta: PrecisionPair) -> DenoiseResult:
    """Joint MAP of a relu stage pair: picks the lower-energy branch per
    component (ties go to the inactive branch)."""
    zp, zc, d_prev, d_cur = _relu_pair_branches(
        r_prev, r_cur, theta.gamma_prev_plus, theta.gamma_cur_minus)
    return DenoiseResult(zhat_prev=zp, zhat_cur=zc,
                         alpha_plus=clamp_alpha(float(np.mean(d_cur))),
                         alpha_minus=clamp_alpha(float(np.mean(d_prev))))


def prox_identity_pair(r_prev: np.ndarray, r_cur: np.ndarray,
                       theta: PrecisionPair) -> DenoiseResult:
    """Pair prox for an identity stage: precision-weighted mean of the two
    messages on the shared variable."""
    gp, gm = theta.gamma_prev_plus, theta.gamma_cur_minus
    z = (gp * np.asarray(r_prev, dtype=float)
         + gm * np.asarray(r_cur, dtype=float)) / (gp + gm)
    return DenoiseResult(zhat_prev=z, zhat_cur=z,
                         alpha_plus=clamp_alpha(gm / (gp + gm)),
                         alpha_minus=clamp_alpha(gp / (gp + gm)))


def linear_alpha(svd: LinearLayerSVD, theta: PrecisionPair
                 ) -> tuple[float, float]:
    """Unclamped sensitivities of the linear pair denoiser, averaged over the
    native coordinates of each side."""
    gp, gm = theta.gamma_prev_plus, theta.gamma_cur_minus
    nu = svd.noise_precision
    s = svd.sbar_ext()
    if math.isinf(nu):
        d_cur = gm * s ** 2 / (gp + gm * s ** 2)
        d_prev = gp / (gp + gm * s ** 2)
    else:
        det = gp * gm + nu * (gp + gm * s ** 2)
        d_cur = gm * (gp + nu * s ** 2) / det
        d_prev = gp * (gm + nu) / det
    return float(np.mean(d_cur[:svd.out_dim])), float(np.mean(d_prev[:svd.in_dim]))


def linear_denoise(svd: LinearLayerSVD, r_prev: np.ndarray, r_cur: np.ndarray,
                   theta: PrecisionPair) -> DenoiseResult:
    """Joint MAP of a linear-channel pair, solved componentwise in the SVD
    coordinates.

    The 2x2 system per coordinate is
        [gp + nu s^2, -nu s; -nu s, gm + nu] [u_prev; u_cur]
            = [gp ubar_prev - nu s bbar; gm ubar_cur + nu bbar],
    with the nu = inf limit enforcing u_cur = s u_prev + bbar exactly.
    """
    gp, gm = theta.gamma_prev_plus, theta.gamma_cur_minus
    nu = svd.noise_precision
    n_in, n_out = svd.in_dim, svd.out_dim
    m = max(n_in, n_out)

    up = np.zeros(m)
    up[:n_in] = svd.v_in @ np.asarray(r_prev, dtype=float)
    uc = np.zeros(m)
    uc[:n_out] = svd.v_out.T @ np.asarray(r_cur, dtype=float)
    s = svd.sbar_ext()
    b = svd.bbar_ext()

    if math.isinf(nu):
        g_prev = np.where(s > 0,
                          (gp * up + gm * s * (uc - b)) / (gp + gm * s ** 2),
                          up)
        g_cur = np.where(s > 0, s * g_prev + b, b)
    else:
        det = gp * gm + nu * (gp + gm * s ** 2)
        rhs_p = gp * up - nu * s * b
        rhs_c = gm * uc + nu * b
        g_prev = ((gm + nu) * rhs_p + nu * s * rhs_c) / det
        g_cur = (nu * s * rhs_p + (gp + nu * s ** 2) * rhs_c) / det

    a_plus, a_minus = linear_alpha(svd, theta)
    return DenoiseResult(zhat_prev=svd.v_in.T @ g_prev[:n_in],
                         zhat_cur=svd.v_out @ g_cur[:n_out],
                         alpha_plus=clamp_alpha(a_plus),
                         alpha_minus=clamp_alpha(a_minus))


def prox_output_linear(svd: LinearLayerSVD, r_prev: np.ndarray, y: np.ndarray,
                       theta_prev: float) -> tuple[np.ndarray, float]:
    """MAP of the last hidden signal under a linear-Gaussian observation,
    solved in the SVD coordinates. Returns the estimate and the unclamped
    input-side sensitivity."""
    if not (theta_prev > 0):
        raise ValueError("gamma must be positive")
    gp = theta_prev
    nu = svd.noise_precision
    n_in, n_out = svd.in_dim, svd.out_dim
    m = max(n_in, n_out)

    u = np.zeros(m)
    u[:n_in] = svd.v_in @ np.asarray(r_prev, dtype=float)
    yb = np.zeros(m)
    yb[:n_out] = svd.v_out.T @ np.asarray(y, dtype=float)
    s = svd.sbar_ext()
    b = svd.bbar_ext()

    if math.isinf(nu):
        with np.errstate(divide="ignore", invalid="ignore"):
            zhat = np.where(s > 0, (yb - b) / np.where(s > 0, s, 1.0), u)
        d_prev = np.where(s > 0, 0.0, 1.0)
    else:
        zhat = (gp * u + nu * s * (yb - b)) / (gp + nu * s ** 2)
        d_prev = gp / (gp + nu * s ** 2)
    alpha_minus = float(np.mean(d_prev[:n_in]))
    return svd.v_in.T @ zhat[:n_in], alpha_minus


def prox_output_relu(r_prev: np.ndarray, y: np.ndarray
                     ) -> tuple[np.ndarray, float]:
    """MAP of the relu preactivation given an exactly observed relu output:
    positive observations pin the signal, zeros constrain it to be
    nonpositive. Returns the estimate and the unclamped sensitivity."""
    rp = np.asarray(r_prev, dtype=float)
    yy = np.asarray(y, dtype=float)
    if np.any(yy < 0):
        raise ValueError("relu observation has negative entries")
    zhat = np.where(yy > 0, yy, np.minimum(rp, 0.0))
    d = np.where((yy == 0) & (rp < 0), 1.0, 0.0)
    return zhat, float(np.mean(d))
