"""Network model: layer types, sampling, SVD transforms, random construction,
and JSON persistence."""
from __future__ import annotations

import dataclasses
import json
import math

import numpy as np
from scipy import special


class ModelFormatError(ValueError):
    """Raised when a model document cannot be parsed or validated."""


@dataclasses.dataclass(frozen=True)
class GaussianPrior:
    precision: float = 1.0

    def __post_init__(self):
        if not (self.precision > 0):
            raise ValueError("prior precision must be positive")


@dataclasses.dataclass(frozen=True)
class LinearLayer:
    weights: np.ndarray
    bias: np.ndarray
    noise_precision: float = math.inf

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        b = np.asarray(self.bias, dtype=float)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)
        if w.ndim != 2:
            raise ValueError("weights must be a matrix")
        if b.shape != (w.shape[0],):
            raise ValueError("bias length must match the output dimension")
        if not (self.noise_precision > 0):
            raise ValueError("noise_precision must be positive (inf allowed)")

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]


_ACTIVATIONS = ("relu", "identity")


@dataclasses.dataclass(frozen=True)
class NonlinearLayer:
    activation: str
    dim: int

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.dim <= 0:
            raise ValueError("dim must be positive")

    def apply(self, z: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        return z


@dataclasses.dataclass(frozen=True)
class Network:
    """Alternating Linear/Nonlinear stack; layer count must be even and the
    dimensions must chain."""
    input_dim: int
    prior: GaussianPrior
    layers: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.input_dim <= 0:
            raise ValueError("input_dim must be positive")
        n = len(self.layers)
        if n == 0 or n % 2 != 0:
            raise ValueError(f"layer count must be even and nonzero, got {n}")
        dim = self.input_dim
        for i, lay in enumerate(self.layers):
            if i % 2 == 0:
                if not isinstance(lay, LinearLayer):
                    raise ValueError(f"layer {i}: expected a linear layer")
                if lay.in_dim != dim:
                    raise ValueError(
                        f"layer {i}: input dimension {lay.in_dim} does not "
                        f"chain with {dim}")
                dim = lay.out_dim
            else:
                if not isinstance(lay, NonlinearLayer):
                    raise ValueError(f"layer {i}: expected a nonlinear layer")
                if lay.dim != dim:
                    raise ValueError(
                        f"layer {i}: dimension {lay.dim} does not chain "
                        f"with {dim}")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def output_dim(self) -> int:
        return self.layers[-1].dim

    def signal_dims(self) -> list[int]:
        """Dimensions of z_0..z_L (one per layer boundary, L+1 entries)."""
        dims = [self.input_dim]
        for lay in self.layers:
            dims.append(lay.out_dim if isinstance(lay, LinearLayer) else lay.dim)
        return dims


@dataclasses.dataclass(frozen=True)
class Trajectory:
    """Signals z_0..z_L of one forward pass (z_L is the observation) and,
    when filled by transform_signals, the rotated views p0/q0."""
    z0: tuple
    p0: tuple | None = None
    q0: tuple | None = None


def forward_sample(network: Network, z0: np.ndarray, seed: int) -> Trajectory:
    """Propagate an input through the network, adding channel noise where the
    precision is finite. Returns all intermediate signals."""
    z = np.asarray(z0, dtype=float)
    if z.shape != (network.input_dim,):
        raise ValueError(
            f"input has shape {z.shape}, expected ({network.input_dim},)")
    rng = np.random.default_rng(seed)
    signals = [z]
    for i, lay in enumerate(network.layers):
        if isinstance(lay, LinearLayer):
            if z.shape != (lay.in_dim,):
                raise ValueError(
                    f"layer {i}: signal shape {z.shape} does not match "
                    f"({lay.in_dim},)")
            z = lay.weights @ z + lay.bias
            if math.isfinite(lay.noise_precision):
                z = z + rng.normal(0.0, 1.0 / math.sqrt(lay.noise_precision),
                                   size=lay.out_dim)
        else:
            z = lay.apply(z)
        signals.append(z)
    return Trajectory(z0=tuple(signals))


@dataclasses.dataclass(frozen=True)
class LinearLayerSVD:
    """Full SVD W = v_out diag(sbar) v_in with square orthogonal factors.

    sbar has length out_dim, is nonnegative, sorted descending, and exactly
    zero beyond the rank. bbar is the bias rotated into output coordinates.
    """
    v_out: np.ndarray
    v_in: np.ndarray
    sbar: np.ndarray
    rank: int
    bbar: np.ndarray
    noise_precision: float

    @property
    def out_dim(self) -> int:
        return self.v_out.shape[0]

    @property
    def in_dim(self) -> int:
        return self.v_in.shape[0]

    def sbar_ext(self) -> np.ndarray:
        """sbar zero-padded to max(in_dim, out_dim)."""
        m = max(self.in_dim, self.out_dim)
        out = np.zeros(m)
        out[:self.sbar.size] = self.sbar
        return out

    def bbar_ext(self) -> np.ndarray:
        m = max(self.in_dim, self.out_dim)
        out = np.zeros(m)
        out[:self.bbar.size] = self.bbar
        return out


def decompose_linear(layer: LinearLayer) -> LinearLayerSVD:
    u, s, vt = np.linalg.svd(layer.weights, full_matrices=True)
    n_out, n_in = layer.weights.shape
    sbar = np.zeros(n_out)
    k = min(n_out, n_in)
    sbar[:k] = s
    tol = (s[0] * max(n_out, n_in) * np.finfo(float).eps) if k and s[0] > 0 else 0.0
    rank = int(np.sum(s > tol))
    sbar[rank:] = 0.0
    return LinearLayerSVD(v_out=u, v_in=vt, sbar=sbar, rank=rank,
                          bbar=u.T @ layer.bias,
                          noise_precision=layer.noise_precision)


def transform_signals(network: Network, trajectory: Trajectory,
                      svds: list | None = None) -> Trajectory:
    """Fill the rotated views of a trajectory.

    At linear-layer outputs q0 is the output-rotated signal and p0 the ambient
    one; at nonlinear outputs (and the input) q0 is ambient and p0 is the next
    linear layer's input rotation, or the signal itself at the terminal
    boundary.
    """
    if svds is None:
        svds = [decompose_linear(lay) if isinstance(lay, LinearLayer) else None
                for lay in network.layers]
    z = trajectory.z0
    if len(z) != network.num_layers + 1:
        raise ValueError("trajectory length does not match the network")
    p0, q0 = [], []
    for i, zi in enumerate(z):
        if i % 2 == 1:
            svd = svds[i - 1]
            if svd is None:
                raise ValueError(f"missing SVD for linear layer {i - 1}")
            q0.append(svd.v_out.T @ zi)
            p0.append(zi)
        else:
            q0.append(zi)
            if i < network.num_layers:
                svd = svds[i]
                if svd is None:
                    raise ValueError(f"missing SVD for linear layer {i}")
                p0.append(svd.v_in @ zi)
            else:
                p0.append(zi)
    return Trajectory(z0=z, p0=tuple(p0), q0=tuple(q0))


def _haar_orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    g = rng.standard_normal((n, n))
    q, r = np.linalg.qr(g)
    return q * np.sign(np.diag(r))


def build_conditioned_matrix(rows: int, cols: int, kappa: float,
                             seed) -> np.ndarray:
    """Random matrix with Haar singular-vector factors and log-spaced singular
    values of condition ratio kappa, scaled to unit mean square."""
    if kappa < 1:
        raise ValueError("kappa must be >= 1")
    rng = np.random.default_rng(seed)
    u = _haar_orthogonal(rows, rng)
    v = _haar_orthogonal(cols, rng)
    k = min(rows, cols)
    if k == 1:
        s = np.ones(1)
    else:
        s = kappa ** (-np.arange(k) / (k - 1))
    s = s * math.sqrt(k / float(np.sum(s ** 2)))
    return (u[:, :k] * s) @ v[:, :k].T


@dataclasses.dataclass(frozen=True)
class SyntheticConfig:
    """Recipe for the random relu network used in the experiments."""
    input_dim: int = 20
    hidden_dims: tuple = (100, 500)
    output_dim: int = 300
    positive_fraction: float = 0.4
    condition_number: float = 10.0
    snr_db: float = 20.0
    prior_precision: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(self.hidden_dims))
        if not (0 < self.positive_fraction < 1):
            raise ValueError("positive_fraction must lie in (0, 1)")


def _bias_parameters(m2: float, rho: float, spread: float = 0.1
                     ) -> tuple[float, float]:
    """Mean and std of the hidden-layer bias so that a preactivation with
    incoming second moment m2 is positive with probability rho."""
    sigma = spread * math.sqrt(m2)
    mu = math.sqrt(m2 + sigma ** 2) * special.ndtri(rho)
    return mu, sigma


def _relu_second_moment(mu: float, var: float) -> float:
    """E max(0, X)^2 for X ~ N(mu, var)."""
    sig = math.sqrt(var)
    t = mu / sig
    phi = math.exp(-0.5 * t * t) / math.sqrt(2 * math.pi)
    return (mu * mu + var) * special.ndtr(t) + mu * sig * phi


def build_random_network(cfg: SyntheticConfig, seed) -> Network:
    """Random relu network: iid N(0, 1/N_in) hidden weights, bias tuned for
    the target positive fraction, conditioned final matrix, output noise set
    from the target SNR."""
    ss = np.random.SeedSequence(seed) if not isinstance(
        seed, np.random.SeedSequence) else seed
    kids = ss.spawn(len(cfg.hidden_dims) + 2)
    layers = []
    m2 = 1.0 / cfg.prior_precision
    dim = cfg.input_dim
    for i, width in enumerate(cfg.hidden_dims):
        rng = np.random.default_rng(kids[i])
        w = rng.normal(0.0, 1.0 / math.sqrt(dim), size=(width, dim))
        mu, sigma = _bias_parameters(m2, cfg.positive_fraction)
        b = rng.normal(mu, sigma, size=width)
        layers.append(LinearLayer(weights=w, bias=b))
        layers.append(NonlinearLayer(activation="relu", dim=width))
        m2 = _relu_second_moment(mu, m2 + sigma ** 2)
        dim = width
    a = build_conditioned_matrix(cfg.output_dim, dim, cfg.condition_number,
                                 kids[-2])
    rng = np.random.default_rng(kids[-1])
    n_probe = 2000
    z = rng.normal(0.0, math.sqrt(1.0 / cfg.prior_precision),
                   size=(n_probe, cfg.input_dim))
    for lay in layers:
        z = z @ lay.weights.T + lay.bias if isinstance(lay, LinearLayer) \
            else lay.apply(z)
    out = z @ a.T
    power = float(np.mean(np.sum(out * out, axis=1)))
    nu = cfg.output_dim * 10.0 ** (cfg.snr_db / 10.0) / power
    layers.append(LinearLayer(weights=a, bias=np.zeros(cfg.output_dim),
                              noise_precision=nu))
    layers.append(NonlinearLayer(activation="identity", dim=cfg.output_dim))
    return Network(input_dim=cfg.input_dim,
                   prior=GaussianPrior(precision=cfg.prior_precision),
                   layers=tuple(layers))


def _precision_to_json(nu: float):
    return "inf" if math.isinf(nu) else nu


def _precision_from_json(value, where: str) -> float:
    if value == "inf":
        return math.inf
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    raise ModelFormatError(f"{where}: noise_precision must be a number or 'inf'")


def save_model(network: Network, path: str) -> None:
    doc = {
        "version": 1,
        "input_dim": network.input_dim,
        "prior": {"kind": "gaussian", "precision": network.prior.precision},
        "layers": [],
    }
    for lay in network.layers:
        if isinstance(lay, LinearLayer):
            doc["layers"].append({
                "kind": "linear",
                "rows": lay.out_dim,
                "cols": lay.in_dim,
                "weights": lay.weights.ravel().tolist(),
                "bias": lay.bias.tolist(),
                "noise_precision": _precision_to_json(lay.noise_precision),
            })
        else:
            doc["layers"].append({
                "kind": "nonlinear",
                "activation": lay.activation,
                "dim": lay.dim,
            })
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_model(path: str) -> Network:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(
                f"{path}: invalid JSON at line {exc.lineno}, column "
                f"{exc.colno}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise ModelFormatError(f"{path}: top level must be an object")
    if doc.get("version") != 1:
        raise ModelFormatError(f"{path}: unsupported version {doc.get('version')!r}")
    try:
        prior_doc = doc["prior"]
        if prior_doc.get("kind") != "gaussian":
            raise ModelFormatError(
                f"{path}: prior.kind must be 'gaussian', got {prior_doc.get('kind')!r}")
        prior = GaussianPrior(precision=float(prior_doc["precision"]))
        input_dim = int(doc["input_dim"])
        layers = []
        for i, ld in enumerate(doc["layers"]):
            where = f"{path}: layers[{i}]"
            kind = ld.get("kind")
            if kind == "linear":
                rows, cols = int(ld["rows"]), int(ld["cols"])
                w = np.array(ld["weights"], dtype=float)
                if w.size != rows * cols:
                    raise ModelFormatError(
                        f"{where}: weights has {w.size} entries, expected "
                        f"{rows * cols}")
                layers.append(LinearLayer(
                    weights=w.reshape(rows, cols),
                    bias=np.array(ld["bias"], dtype=float),
                    noise_precision=_precision_from_json(
                        ld["noise_precision"], where)))
            elif kind == "nonlinear":
                layers.append(NonlinearLayer(activation=ld["activation"],
                                             dim=int(ld["dim"])))
            else:
                raise ModelFormatError(f"{where}: unknown layer kind {kind!r}")
    except KeyError as exc:
        raise ModelFormatError(f"{path}: missing field {exc}") from exc
    try:
        return Network(input_dim=input_dim, prior=prior, layers=tuple(layers))
    except ValueError as exc:
        raise ModelFormatError(f"{path}: {exc}") from exc
