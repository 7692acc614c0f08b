"""Multilayer perceptrons: smooth Leaky ReLU, initialisation schemes, forward
passes in numpy and on an autodiff tape, and a lossless text format."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError

DEFAULT_ALPHA = 0.2
ACTIVATIONS = ("smooth_leaky_relu", "relu", "sigmoid", "identity")
INIT_MODES = ("orthogonal", "upper_triangular", "gaussian_fan_in")
TRIANGULAR_DIAG_FLOOR = 0.1


def _softplus(x):
    return ad._softplus(np.asarray(x, dtype=float))


def smooth_leaky_relu(x, alpha: float = DEFAULT_ALPHA):
    """alpha * x + (1 - alpha) * softplus(x); slope runs from alpha to 1."""
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    return alpha * x + (1.0 - alpha) * _softplus(x)


def smooth_leaky_relu_grad(x, alpha: float = DEFAULT_ALPHA):
    return alpha + (1.0 - alpha) * ad._sigmoid(np.asarray(x, dtype=float))


def _activate(name, a, alpha):
    if name == "smooth_leaky_relu":
        return smooth_leaky_relu(a, alpha)
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "sigmoid":
        return ad._sigmoid(a)
    return a


def _activate_tape(name, a, alpha):
    if name == "smooth_leaky_relu":
        return ad.smooth_leaky_relu(a, alpha)
    if name == "relu":
        return ad.relu(a)
    if name == "sigmoid":
        return ad.sigmoid(a)
    return a


@dataclass
class MlpParams:
    """Weights ``W[i]`` have shape ``(sizes[i+1], sizes[i])``. The activation is
    applied after every hidden layer; the last layer is affine."""

    sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "smooth_leaky_relu"
    alpha: float = DEFAULT_ALPHA
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise ConfigurationError("layer count does not match sizes")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (self.sizes[i + 1], self.sizes[i]) or b.shape != (self.sizes[i + 1],):
                raise ConfigurationError(f"layer {i} has wrong shape {w.shape}/{b.shape}")

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def copy(self) -> "MlpParams":
        return MlpParams(list(self.sizes), [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.activation, self.alpha)

    def flat(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_flat(self, arrays) -> "MlpParams":
        return MlpParams(list(self.sizes), list(arrays[0::2]), list(arrays[1::2]),
                         self.activation, self.alpha)

    def equals(self, other: "MlpParams") -> bool:
        return (self.sizes == other.sizes and self.activation == other.activation
                and self.alpha == other.alpha
                and all(np.array_equal(a, b) for a, b in zip(self.flat(), other.flat())))


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def _upper_triangular(rng, n):
    w = np.triu(rng.standard_normal((n, n)))
    d = np.diag(w).copy()
    small = np.abs(d) < TRIANGULAR_DIAG_FLOOR
    d[small] = np.where(d[small] < 0, -TRIANGULAR_DIAG_FLOOR, TRIANGULAR_DIAG_FLOOR)
    w[np.diag_indices(n)] = d
    return w


def init_mlp(sizes, mode: str = "gaussian_fan_in", activation: str = "smooth_leaky_relu",
             seed=0, alpha: float = DEFAULT_ALPHA) -> MlpParams:
    """Random MLP. ``seed`` may be an int, a SeedSequence or a Generator."""
    sizes = [int(s) for s in sizes]
    if mode not in INIT_MODES:
        raise ConfigurationError(f"unknown init mode {mode!r}")
    if mode != "gaussian_fan_in" and len(set(sizes)) != 1:
        raise ConfigurationError(f"{mode} initialisation needs square layers, got {sizes}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        if mode == "orthogonal":
            w = _orthogonal(rng, n_in)
        elif mode == "upper_triangular":
            w = _upper_triangular(rng, n_in)
        else:
            w = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in))
        weights.append(w)
        biases.append(np.zeros(n_out))
    return MlpParams(sizes, weights, biases, activation, alpha)


def mlp_forward(params: MlpParams, z) -> np.ndarray:
    """Forward pass for one vector ``(d,)`` or a row batch ``(B, d)``."""
    h = np.asarray(z, dtype=float)
    if h.shape[-1] != params.sizes[0]:
        raise ValueError(f"input has dimension {h.shape[-1]}, network expects {params.sizes[0]}")
    last = params.n_layers - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        h = h @ w.T + b
        if i < last:
            h = _activate(params.activation, h, params.alpha)
    return h


def mlp_tape(params: MlpParams, x: ad.Var, weights=None) -> ad.Var:
    """Record the forward pass on ``x``'s tape.

    ``weights`` is the flat ``[W0, b0, W1, b1, ...]`` list of Vars; when omitted
    the parameters enter the tape as constants.
    """
    tape = x.tape
    if weights is None:
        weights = [tape.const(a) for a in params.flat()]
    h = x
    last = params.n_layers - 1
    for i in range(params.n_layers):
        h = ad.linear(h, weights[2 * i], weights[2 * i + 1])
        if i < last:
            h = _activate_tape(params.activation, h, params.alpha)
    return h


def mlp_jacobian(params: MlpParams, z) -> np.ndarray:
    """Input Jacobians ``(B, d_out, d_in)`` via reverse mode (``(d_out, d_in)``
    for a single point)."""
    z = np.asarray(z, dtype=float)
    jac = ad.batch_jacobian(lambda v: mlp_tape(params, v), np.atleast_2d(z))
    return jac[0] if z.ndim == 1 else jac


# --- serialisation ----------------------------------------------------------

def _hex_row(a) -> str:
    return " ".join(float(v).hex() for v in np.ravel(a))


def to_text(params: MlpParams) -> str:
    lines = [
        "mlp 1",
        f"activation {params.activation} {float(params.alpha).hex()}",
        "sizes " + " ".join(str(s) for s in params.sizes),
    ]
    lines += [f"W{i} {_hex_row(w)}" for i, w in enumerate(params.weights)]
    lines += [f"b{i} {_hex_row(b)}" for i, b in enumerate(params.biases)]
    return "\n".join(lines) + "\n"


def from_text(text: str) -> MlpParams:
    rows = {}
    for line in text.strip().splitlines():
        key, _, rest = line.partition(" ")
        rows[key] = rest.split()
    if rows.get("mlp") != ["1"]:
        raise ValueError("not an mlp record")
    activation, alpha_hex = rows["activation"]
    sizes = [int(s) for s in rows["sizes"]]
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        weights.append(np.array([float.fromhex(v) for v in rows[f"W{i}"]]).reshape(n_out, n_in))
        biases.append(np.array([float.fromhex(v) for v in rows[f"b{i}"]]))
    return MlpParams(sizes, weights, biases, activation, float.fromhex(alpha_hex))
