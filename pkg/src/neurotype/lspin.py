"""Locally sparse network: sample-specific stochastic gates on the input features.

A gating network maps each sample to gate means ``mu``; gates
``z = clip(0.5 + mu + eps, 0, 1)`` with ``eps ~ N(0, sigma^2)`` (``sigma = 0``
at inference) mask the input before the prediction network. The sparsity
penalty is the expected number of open gates, ``sum_d Phi((mu_d + 0.5) / sigma)``.
"""
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from . import ndcore as nd
from .errors import ConfigError, ShapeError


@dataclass
class LspinConfig:
    lambda1: float = 0.01047
    lambda2: float = 0.0
    sigma: float = 0.5
    prediction_widths: tuple = (40, 20)
    gating_widths: tuple = (50, 50, 50)
    n_classes: int = 5
    kernel: str = "zero"  # "zero" or "rbf"
    kernel_bandwidth: float = 1.0

    def __post_init__(self):
        self.prediction_widths = tuple(int(w) for w in self.prediction_widths)
        self.gating_widths = tuple(int(w) for w in self.gating_widths)
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be >= 0")
        if self.sigma < 0:
            raise ConfigError("sigma must be >= 0")
        if self.kernel not in ("zero", "rbf"):
            raise ConfigError(f"unknown kernel {self.kernel!r}")
        if self.kernel == "rbf" and self.kernel_bandwidth <= 0:
            raise ConfigError("kernel_bandwidth must be > 0")


@dataclass
class LspinParams:
    theta: list
    omega: list
    meta: dict = field(default_factory=dict)

    def blocks(self):
        return {"theta": self.theta, "omega": self.omega}

    def parameters(self):
        return nd.flatten(self.theta) + nd.flatten(self.omega)

    @property
    def n_features(self):
        return self.omega[0][0].shape[0]


@dataclass
class GateState:
    mu: np.ndarray
    sigma: float
    z: np.ndarray


def init_lspin(rng, n_features, config=None):
    config = config or LspinConfig()
    omega = nd.init_mlp(rng, (n_features,) + config.gating_widths + (n_features,), name="omega")
    theta = nd.init_mlp(rng, (n_features,) + config.prediction_widths + (config.n_classes,),
                        name="theta")
    return LspinParams(theta, omega)


def _check_width(omega, features):
    x = nd.as_tensor(features)
    d = omega[0][0].shape[0]
    if x.data.ndim != 2 or x.shape[1] != d:
        raise ShapeError(f"lspin: expected features of shape (N, {d}), got {x.shape}")
    return x


def gate_mu(omega, features):
    """Gate means from the gating network (tanh hidden layers, linear output)."""
    return nd.mlp(omega, _check_width(omega, features))


def gate_function(mu, eps=0.0):
    return np.clip(0.5 + np.asarray(mu, dtype=np.float64) + eps, 0.0, 1.0)


def draw_noise(rng, shape, sigma):
    return sigma * rng.standard_normal(shape)


def sample_gates(mu, sigma, mode="infer", seed=None, rng=None, noise=None):
    """Realized gates for gate means ``mu`` (array or graph node).

    ``train`` adds ``N(0, sigma^2)`` noise drawn from ``rng`` (or a generator
    seeded with ``seed``) unless explicit ``noise`` is given; ``infer`` uses no
    noise. Returns a node when ``mu`` is a node, else an array.
    """
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    if mode not in ("train", "infer"):
        raise ConfigError(f"unknown gate mode {mode!r}")
    is_node = isinstance(mu, nd.Tensor)
    mu_data = mu.data if is_node else np.asarray(mu, dtype=np.float64)
    if mode == "train" and noise is None:
        rng = rng if rng is not None else np.random.default_rng(seed)
        noise = draw_noise(rng, mu_data.shape, sigma)
    eps = noise if mode == "train" else 0.0
    if is_node:
        return nd.hard_clip01(mu + (0.5 + eps))
    return gate_function(mu_data, eps)


def expected_open_gates(mu, sigma):
    """Expected count of nonzero gates, ``sum_d Phi((mu_d + 0.5) / sigma)``.

    For a 2-D ``mu`` (one row per sample) the per-sample counts are averaged.
    With ``sigma == 0`` the exact count of ``mu_d > -0.5`` is returned as a
    constant (no gradient) and a warning is raised.
    """
    mu = nd.as_tensor(mu)
    rows = mu.shape[0] if mu.data.ndim == 2 else 1
    if sigma == 0:
        warnings.warn("expected_open_gates: sigma=0 gives the exact count; gradient undefined",
                      RuntimeWarning, stacklevel=2)
        return nd.Tensor(np.sum(mu.data > -0.5) / rows)
    if sigma < 0:
        raise ConfigError("sigma must be >= 0")
    probs = nd.normal_cdf(nd.mul(nd.add(mu, 0.5), 1.0 / sigma))
    return nd.mul(nd.sum_(probs), 1.0 / rows)


def open_gate_probability(mu, sigma):
    return ndtr((np.asarray(mu, dtype=np.float64) + 0.5) / sigma)


def _check_kernel(K, n):
    K = np.asarray(K, dtype=np.float64)
    if K.shape != (n, n):
        raise ShapeError(f"kernel shape {K.shape} does not match batch of {n}")
    if not np.allclose(K, K.T, rtol=0, atol=1e-12):
        raise ConfigError("kernel must be symmetric")
    if np.any(K < 0):
        raise ConfigError("kernel must be nonnegative")
    return K


def similarity_penalty(z, K):
    """``sum_{i,j} K_ij ||z_i - z_j||^2`` over ordered pairs (each pair counted twice).

    Evaluated as ``2 sum_i k_i ||z_i||^2 - 2 sum_ij K_ij <z_i, z_j>`` with
    ``k_i = sum_j K_ij``, after shifting all rows by the first.
    """
    z = nd.as_tensor(z)
    n = z.shape[0]
    K = _check_kernel(K, n)
    # The penalty only sees differences, so shift every row by the first one;
    # identical rows then cancel exactly and the Gram terms stay small.
    first = np.zeros((n, n))
    first[:, 0] = 1.0
    z = nd.sub(z, nd.matmul(nd.Tensor(first), z))
    sq_norms = nd.sum_(nd.square(z), axis=1)
    degree_term = nd.sum_(nd.mul(sq_norms, K.sum(axis=1)))
    gram = nd.matmul(z, nd.transpose(z))
    cross_term = nd.sum_(nd.mul(gram, K))
    return nd.mul(nd.sub(degree_term, cross_term), 2.0)


def rbf_kernel(X, bandwidth=1.0):
    X = np.asarray(X, dtype=np.float64)
    sq = (X * X).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * X @ X.T, 0.0)
    K = np.exp(-d2 / (2.0 * bandwidth ** 2))
    return 0.5 * (K + K.T)


def batch_kernel(config, X):
    if config.kernel == "rbf":
        return rbf_kernel(X, config.kernel_bandwidth)
    return np.zeros((len(X), len(X)))


def lspin_logits(params, features, z):
    x = _check_width(params.omega, features)
    return nd.mlp(params.theta, nd.mul(x, z))


def lspin_forward(params, features, mode="infer", sigma=0.5, rng=None, noise=None):
    """Class probabilities ``softmax(f_theta(x * z))``, shape (N, n_classes)."""
    mu = gate_mu(params.omega, features)
    z = sample_gates(mu, sigma if mode == "train" else 0.0, mode=mode, rng=rng, noise=noise)
    return nd.softmax(lspin_logits(params, features, z).data)


def lspin_loss(params, features, labels, config, noise=None, rng=None, K=None):
    """Mean over samples of cross-entropy plus the gate regularizer.

    ``CE + lambda1 * expected_open_gates(mu) + lambda2 * similarity_penalty(z, K) / N``.
    One noise draw per call; pass ``noise`` to freeze it. Returns
    ``(loss_node, GateState)``.
    """
    x = _check_width(params.omega, features)
    n = x.shape[0]
    mu = gate_mu(params.omega, x)
    if noise is None:
        rng = rng if rng is not None else np.random.default_rng()
        noise = draw_noise(rng, mu.shape, config.sigma)
    z = sample_gates(mu, config.sigma, mode="train", noise=noise)
    loss = nd.softmax_cross_entropy(lspin_logits(params, x, z), labels)
    if config.lambda1 > 0:
        loss = loss + config.lambda1 * expected_open_gates(mu, config.sigma)
    if config.lambda2 > 0:
        K = batch_kernel(config, x.data) if K is None else K
        loss = loss + (config.lambda2 / n) * similarity_penalty(z, K)
    return loss, GateState(mu.data, config.sigma, z.data)


def predict_subclass(params, features):
    return np.argmax(lspin_forward(params, features, mode="infer"), axis=1)


def export_gate_matrix(params, features):
    """Inference-mode gates, one row per sample, values in [0, 1]."""
    return gate_function(gate_mu(params.omega, features).data)


def open_gate_fraction(params, features):
    return float(np.mean(export_gate_matrix(params, features) > 0.0))
