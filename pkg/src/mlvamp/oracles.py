"""Independent reference solvers used by the test suite and the `oracle` CLI.

Everything here deliberately avoids the closed forms in the library modules:
scalar proxes are found by grid search, vector proxes by dense normal
equations or KKT solves, sensitivities by central finite differences. Slow and
simple on purpose.
"""
from __future__ import annotations

import math

import numpy as np


def grid_minimize(f, lo: float, hi: float, step: float = 1e-4, refine: int = 2) -> float:
    """Grid-search minimizer of a scalar function on [lo, hi].

    Scans the interval at the given step, then re-scans shrinking windows
    around the incumbent. Resolution after refinement ~ step * (step/2)^refine
    relative to the window.
    """
    lo, hi = float(lo), float(hi)
    for _ in range(refine + 1):
        n = max(int(math.ceil((hi - lo) / step)), 8)
        xs = np.linspace(lo, hi, n + 1)
        vals = np.array([f(x) for x in xs])
        i = int(np.argmin(vals))
        width = (hi - lo) / n
        lo, hi = xs[i] - width, xs[i] + width
    return float(xs[i])


def relu_pair_energy(z_prev: float, r_prev: float, r_cur: float,
                     gamma_plus: float, gamma_minus: float) -> float:
    """Objective of the relu pair prox parameterized by the input side."""
    z_cur = max(0.0, z_prev)
    return (0.5 * gamma_plus * (z_prev - r_prev) ** 2
            + 0.5 * gamma_minus * (z_cur - r_cur) ** 2)


def grid_relu_pair(r_prev: float, r_cur: float, gamma_plus: float,
                   gamma_minus: float, step: float = 1e-4) -> tuple[float, float]:
    """Relu pair prox by grid search over the input-side variable."""
    span = 1.0 + abs(r_prev) + abs(r_cur)
    z_prev = grid_minimize(
        lambda z: relu_pair_energy(z, r_prev, r_cur, gamma_plus, gamma_minus),
        -span, span, step=step)
    return z_prev, max(0.0, z_prev)


def grid_prox_input(r: float, gamma: float, prior_precision: float,
                    step: float = 1e-4) -> float:
    span = 1.0 + abs(r)
    return grid_minimize(
        lambda z: 0.5 * prior_precision * z * z + 0.5 * gamma * (z - r) ** 2,
        -span, span, step=step)


def linear_pair_normal_equations(weights: np.ndarray, bias: np.ndarray, nu: float,
                                 r_prev: np.ndarray, r_cur: np.ndarray,
                                 gamma_plus: float, gamma_minus: float
                                 ) -> tuple[np.ndarray, np.ndarray]:
    """Joint minimizer of the linear pair objective by dense normal equations.

    Minimizes gp/2 |zp - r_prev|^2 + nu/2 |zc - W zp - b|^2 + gm/2 |zc - r_cur|^2
    over (zp, zc); nu = inf enforces zc = W zp + b exactly.
    """
    w = np.asarray(weights, dtype=float)
    n_out, n_in = w.shape
    if math.isinf(nu):
        a = gamma_plus * np.eye(n_in) + gamma_minus * (w.T @ w)
        rhs = gamma_plus * r_prev + gamma_minus * (w.T @ (r_cur - bias))
        zp = np.linalg.solve(a, rhs)
        return zp, w @ zp + bias
    top = np.hstack([gamma_plus * np.eye(n_in) + nu * (w.T @ w), -nu * w.T])
    bot = np.hstack([-nu * w, (gamma_minus + nu) * np.eye(n_out)])
    a = np.vstack([top, bot])
    rhs = np.concatenate([gamma_plus * r_prev - nu * (w.T @ bias),
                          gamma_minus * r_cur + nu * bias])
    sol = np.linalg.solve(a, rhs)
    return sol[:n_in], sol[n_in:]


def output_normal_equations(weights: np.ndarray, bias: np.ndarray, nu: float,
                            r_prev: np.ndarray, y: np.ndarray,
                            gamma_plus: float) -> np.ndarray:
    """Minimizer of gp/2 |z - r_prev|^2 + nu/2 |y - W z - b|^2.

    nu = inf projects r_prev onto the affine set of least-squares solutions
    of W z = y - b (exact constraint on the row space).
    """
    w = np.asarray(weights, dtype=float)
    if math.isinf(nu):
        corr = np.linalg.lstsq(w, y - bias - w @ r_prev, rcond=None)[0]
        return r_prev + corr
    n_in = w.shape[1]
    a = gamma_plus * np.eye(n_in) + nu * (w.T @ w)
    rhs = gamma_plus * r_prev + nu * (w.T @ (y - bias))
    return np.linalg.solve(a, rhs)


def gaussian_map_network(network, y: np.ndarray) -> list[np.ndarray]:
    """Closed-form joint MAP for all-linear networks by one dense KKT solve.

    Variables are the effective-chain iterates z_0..z_{M-1} (identity
    nonlinearities collapsed). Finite-precision stages contribute quadratics,
    nu = inf stages contribute equality constraints; the stacked system
    [H A^T; A 0] [x; lam] = [g; c] is solved densely.
    """
    from .driver import EffectiveChain

    chain = EffectiveChain(network)
    dims = chain.var_dims
    offs = np.concatenate([[0], np.cumsum(dims)])
    n = int(offs[-1])

    h = np.zeros((n, n))
    g = np.zeros(n)
    rows_a: list[np.ndarray] = []
    rows_c: list[np.ndarray] = []

    def sl(i):
        return slice(offs[i], offs[i + 1])

    h[sl(0), sl(0)] += network.prior.precision * np.eye(dims[0])

    def add_affine(i_in, w, b, nu, target=None):
        # residual = target - w z_in - b when target is fixed (output stage),
        # else z_out - w z_in - b with z_out the next variable.
        if target is None:
            i_out = i_in + 1
            if math.isinf(nu):
                row = np.zeros((w.shape[0], n))
                row[:, sl(i_in)] = -w
                row[:, sl(i_out)] = np.eye(w.shape[0])
                rows_a.append(row)
                rows_c.append(b.copy())
                return
            h[sl(i_in), sl(i_in)] += nu * (w.T @ w)
            h[sl(i_out), sl(i_out)] += nu * np.eye(w.shape[0])
            h[sl(i_in), sl(i_out)] += -nu * w.T
            h[sl(i_out), sl(i_in)] += -nu * w
            g[sl(i_in)] += -nu * (w.T @ b)
            g[sl(i_out)] += nu * b
            return
        if math.isinf(nu):
            row = np.zeros((w.shape[0], n))
            row[:, sl(i_in)] = w
            rows_a.append(row)
            rows_c.append(target - b)
            return
        h[sl(i_in), sl(i_in)] += nu * (w.T @ w)
        g[sl(i_in)] += nu * (w.T @ (target - b))

    for s, stage in enumerate(chain.stages, start=1):
        if stage.kind == "identity":
            row = np.zeros((dims[s], n))
            row[:, sl(s - 1)] = -np.eye(dims[s])
            row[:, sl(s)] = np.eye(dims[s])
            rows_a.append(row)
            rows_c.append(np.zeros(dims[s]))
            continue
        if stage.kind != "linear":
            raise ValueError("gaussian_map_network requires all-linear stages")
        lay = stage.layer
        add_affine(s - 1, lay.weights, lay.bias, lay.noise_precision)
    out = chain.output
    if out.kind != "linear":
        raise ValueError("gaussian_map_network requires a linear output stage")
    add_affine(len(dims) - 1, out.layer.weights, out.layer.bias,
               out.layer.noise_precision, target=np.asarray(y, dtype=float))

    if rows_a:
        a = np.vstack(rows_a)
        c = np.concatenate(rows_c)
        m = a.shape[0]
        kkt = np.block([[h, a.T], [a, np.zeros((m, m))]])
        sol = np.linalg.solve(kkt, np.concatenate([g, c]))[:n]
    else:
        sol = np.linalg.solve(h, g)
    return [sol[sl(i)].copy() for i in range(len(dims))]


def quadratic_min(network, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Closed-form minimizer and value of the input-space objective for
    all-linear networks: compose the affine map, solve the normal equations."""
    from .driver import EffectiveChain

    chain = EffectiveChain(network)
    mat, vec = np.eye(network.input_dim), np.zeros(network.input_dim)
    for stage in chain.stages:
        if stage.kind != "linear":
            raise ValueError("quadratic_min requires all-linear stages")
        lay = stage.layer
        mat, vec = lay.weights @ mat, lay.weights @ vec + lay.bias
    out = chain.output.layer
    mat, vec = out.weights @ mat, out.weights @ vec + out.bias
    nu = out.noise_precision
    prior = network.prior.precision
    a = prior * np.eye(network.input_dim) + nu * (mat.T @ mat)
    z = np.linalg.solve(a, nu * (mat.T @ (y - vec)))
    resid = y - mat @ z - vec
    val = 0.5 * prior * float(z @ z) + 0.5 * nu * float(resid @ resid)
    return z, val


def fd_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a vector."""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def fd_mean_diag(f, x: np.ndarray, h: float = 1e-6) -> float:
    """Mean diagonal Jacobian entry of a vector map by per-coordinate
    central differences."""
    x = np.asarray(x, dtype=float)
    total = 0.0
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        total += (f(x + e)[i] - f(x - e)[i]) / (2 * h)
    return total / x.size


def fd_diag_componentwise(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Per-component slopes of a componentwise map (single simultaneous
    perturbation; valid only when the Jacobian is diagonal)."""
    x = np.asarray(x, dtype=float)
    return (f(x + h) - f(x - h)) / (2 * h)
