"""Ground-truth mixings z -> x, source distributions, datasets and the exact
change-of-variables log-density."""
from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConfigurationError, DomainError, InconsistencyError, SingularityError
from .nets import MlpParams, init_mlp, mlp_forward, mlp_jacobian

LOG_2PI = float(np.log(2.0 * np.pi))
PREIMAGE_TOL = 1e-8
MOEBIUS_POLE_MARGIN = 0.5


# --- mixings ----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Moebius:
    """x = t + alpha * A (z - b) / ||z - b||^epsilon with orthogonal A."""

    t: np.ndarray
    b: np.ndarray
    A: np.ndarray
    alpha: float = 1.0
    epsilon: float = 2.0
    kind = "moebius"

    def __post_init__(self):
        d = len(self.t)
        if self.A.shape != (d, d) or len(self.b) != d:
            raise ConfigurationError("moebius parameters have inconsistent dimensions")
        if not np.allclose(self.A.T @ self.A, np.eye(d), atol=1e-10):
            raise ConfigurationError("moebius A must be orthogonal")
        if self.epsilon != 2.0:
            raise ConfigurationError("only epsilon = 2 gives a conformal map")

    @property
    def dim(self):
        return len(self.t)

    def _offsets(self, z):
        u = z - self.b
        r2 = np.sum(u * u, axis=-1, keepdims=True)
        if np.any(r2 == 0.0):
            raise DomainError("moebius mixing is undefined at z = b")
        return u, r2

    def forward(self, z):
        u, r2 = self._offsets(z)
        return self.t + self.alpha * (u / r2 ** (self.epsilon / 2.0)) @ self.A.T

    def jacobian(self, z):
        u, r2 = self._offsets(z)
        d = self.dim
        eye = np.eye(d)
        # alpha / r^2 * A (I - 2 u u^T / r^2)
        inner = eye - self.epsilon * u[:, :, None] * u[:, None, :] / r2[:, :, None]
        return self.alpha / r2[:, :, None] ** (self.epsilon / 2.0) * np.einsum("ij,bjk->bik", self.A, inner)

    def inverse(self, x):
        # the inversion map is an involution up to A, t, alpha
        w = (x - self.t) @ self.A
        s2 = np.sum(w * w, axis=-1, keepdims=True)
        return self.b + self.alpha * w / s2


@dataclass(frozen=True, eq=False)
class MlpMixing:
    params: MlpParams
    kind = "mlp"

    @property
    def dim(self):
        return self.params.sizes[0]

    def forward(self, z):
        return mlp_forward(self.params, z)

    def jacobian(self, z):
        return mlp_jacobian(self.params, z)


@dataclass(frozen=True, eq=False)
class LinearMixing:
    W: np.ndarray
    kind = "linear"

    def __post_init__(self):
        if abs(np.linalg.det(self.W)) <= 1e-12:
            raise ConfigurationError("linear mixing matrix is singular")

    @property
    def dim(self):
        return self.W.shape[0]

    def forward(self, z):
        return z @ self.W.T

    def jacobian(self, z):
        return np.broadcast_to(self.W, (len(z),) + self.W.shape).copy()

    def inverse(self, x):
        return np.linalg.solve(self.W, x.T).T


@dataclass(frozen=True, eq=False)
class ComposedMixing:
    """``outer @ inner(z)``: a linear map applied after another mixing."""

    inner: object
    outer: np.ndarray
    kind = "composed"

    def __post_init__(self):
        if abs(np.linalg.det(self.outer)) <= 1e-12:
            raise ConfigurationError("outer linear map is singular")

    @property
    def dim(self):
        return self.inner.dim

    def forward(self, z):
        return self.inner.forward(z) @ self.outer.T

    def jacobian(self, z):
        return np.einsum("ij,bjk->bik", self.outer, self.inner.jacobian(z))

    def inverse(self, x):
        if not hasattr(self.inner, "inverse"):
            raise AttributeError("inner mixing has no closed-form inverse")
        return self.inner.inverse(np.linalg.solve(self.outer, x.T).T)


def mix_forward(spec, z, want_jacobian: bool = False):
    """Apply a mixing to one source vector or a batch. Returns ``(x, J)`` where
    ``J`` is ``None`` unless requested."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    zb = np.atleast_2d(z)
    x = spec.forward(zb)
    jac = spec.jacobian(zb) if want_jacobian else None
    if single:
        return x[0], (None if jac is None else jac[0])
    return x, jac


def make_mlp_mixing(dim: int, n_layers: int, mode: str = "orthogonal",
                    activation: str = "smooth_leaky_relu", seed=0, gain: float = 1.0) -> MlpMixing:
    """Square MLP mixing with ``n_layers`` affine layers of width ``dim``.

    ``gain`` scales the output layer; it changes the scale of the observations
    but not the IMA contrast, which is invariant to a global rescaling.
    """
    params = init_mlp([dim] * (n_layers + 1), mode=mode, activation=activation, seed=seed)
    params.weights[-1] = params.weights[-1] * float(gain)
    return MlpMixing(params)


def random_orthogonal(dim, rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    return q * np.sign(np.diag(r))


def _box_distance(p, low, high):
    return float(np.linalg.norm(np.maximum(np.maximum(low - p, p - high), 0.0)))


def make_moebius(dim: int, seed=0, support=(0.0, 1.0), margin: float = MOEBIUS_POLE_MARGIN) -> Moebius:
    """Random Moebius mixing whose pole sits at least ``margin`` away from the
    box ``support**dim``."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    low, high = support
    t = rng.standard_normal(dim)
    A = random_orthogonal(dim, rng)
    b = rng.standard_normal(dim) + 0.5 * (low + high)
    center = np.full(dim, 0.5 * (low + high))
    u = b - center
    if np.linalg.norm(u) == 0.0:
        u = rng.standard_normal(dim)
    if _box_distance(b, low, high) < margin:
        lo, hi = 0.0, 1.0
        while _box_distance(center + hi * u / np.linalg.norm(u), low, high) < margin:
            hi *= 2.0
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            if _box_distance(center + mid * u / np.linalg.norm(u), low, high) < margin:
                lo = mid
            else:
                hi = mid
        b = center + hi * u / np.linalg.norm(u)
    return Moebius(t=t, b=b, A=A, alpha=1.0, epsilon=2.0)


def make_volume_preserving_linear(dim: int, severity: float, seed=0) -> np.ndarray:
    """Unit-determinant matrix ``Q expm(severity * S) / |det|^(1/d)``; severity 0
    gives the orthogonal ``Q`` and larger severities skew the columns."""
    if dim < 2 or severity < 0:
        raise ConfigurationError("need dim >= 2 and severity >= 0")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    Q = random_orthogonal(dim, rng)
    S = rng.standard_normal((dim, dim))
    S /= np.max(np.abs(np.linalg.eigvals(S)))
    M = Q @ scipy.linalg.expm(severity * S)
    return M / abs(np.linalg.det(M)) ** (1.0 / dim)


# --- sources ----------------------------------------------------------------

@dataclass(frozen=True)
class SourceDistribution:
    kind: str  # "standard_gaussian" | "uniform"
    dim: int
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind not in ("standard_gaussian", "uniform"):
            raise ConfigurationError(f"unknown source distribution {self.kind!r}")
        if self.kind == "uniform" and not self.low < self.high:
            raise ConfigurationError("uniform source needs low < high")

    def log_density(self, z) -> np.ndarray:
        z = np.atleast_2d(z)
        if self.kind == "standard_gaussian":
            return -0.5 * np.sum(z * z, axis=1) - 0.5 * self.dim * LOG_2PI
        inside = np.all((z >= self.low) & (z <= self.high), axis=1)
        return np.where(inside, -self.dim * np.log(self.high - self.low), -np.inf)


def sample_sources(dist: SourceDistribution, n: int, seed=0) -> np.ndarray:
    if n <= 0:
        raise ValueError("n must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if dist.kind == "standard_gaussian":
        return rng.standard_normal((n, dist.dim))
    return rng.uniform(dist.low, dist.high, size=(n, dist.dim))


# --- datasets ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Dataset:
    sources: np.ndarray
    observations: np.ndarray
    split: tuple[int, int, int]
    mixing_kind: str = ""
    seed: int = 0

    def __post_init__(self):
        if sum(self.split) != len(self.sources) or len(self.sources) != len(self.observations):
            raise ConfigurationError("split counts must sum to the sample count")

    @property
    def dim(self):
        return self.sources.shape[1]

    def _part(self, k):
        start = sum(self.split[:k])
        stop = start + self.split[k]
        return self.sources[start:stop], self.observations[start:stop]

    @property
    def train(self):
        return self._part(0)

    @property
    def val(self):
        return self._part(1)

    @property
    def test(self):
        return self._part(2)


def make_dataset(spec, dist: SourceDistribution, split, seed=0) -> Dataset:
    split = tuple(int(s) for s in split)
    z = sample_sources(dist, sum(split), seed)
    x = spec.forward(z)
    plain_seed = seed if isinstance(seed, (int, np.integer)) else 0
    return Dataset(z, x, split, spec.kind, int(plain_seed))


def dataset_to_text(data: Dataset) -> str:
    buf = io.StringIO()
    buf.write(f"# dim {data.dim}\n")
    buf.write("# counts " + " ".join(str(c) for c in data.split) + "\n")
    buf.write(f"# mixing {data.mixing_kind or 'unknown'}\n")
    buf.write(f"# seed {data.seed}\n")
    cols = [f"z{k}" for k in range(data.dim)] + [f"x{k}" for k in range(data.dim)]
    buf.write(" ".join(cols) + "\n")
    np.savetxt(buf, np.hstack([data.sources, data.observations]), fmt="%.17g")
    return buf.getvalue()


def dataset_from_text(text: str) -> Dataset:
    header = {}
    lines = text.splitlines()
    body_start = 0
    for i, line in enumerate(lines):
        if line.startswith("#"):
            key, *vals = line[1:].split()
            header[key] = vals
        else:
            body_start = i + 1  # skip column names
            break
    dim = int(header["dim"][0])
    split = tuple(int(c) for c in header["counts"])
    table = np.loadtxt(io.StringIO("\n".join(lines[body_start:])), ndmin=2)
    if table.size == 0:
        table = np.zeros((0, 2 * dim))
    return Dataset(table[:, :dim].copy(), table[:, dim:].copy(), split,
                   header["mixing"][0], int(header["seed"][0]))


# --- inversion and densities -------------------------------------------------

def newton_invert(forward, jacobian, x, z0, tol: float = 1e-10, max_iter: int = 100):
    """Damped Newton solve of ``forward(z) = x`` row by row.

    ``forward`` and ``jacobian`` act on ``(B, d)`` batches. Returns
    ``(z, converged)`` where ``converged`` flags rows whose max-abs residual
    fell below ``tol``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    z = np.atleast_2d(np.array(z0, dtype=float))
    with np.errstate(all="ignore"):
        res = np.max(np.abs(forward(z) - x), axis=1)
    res = np.where(np.isfinite(res), res, np.inf)
    for _ in range(max_iter):
        idx = np.flatnonzero(res >= tol)
        if len(idx) == 0:
            break
        za, xa = z[idx], x[idx]
        ja = jacobian(za)
        with np.errstate(all="ignore"):
            fa = forward(za)
        try:
            step = np.linalg.solve(ja, (xa - fa)[:, :, None])[:, :, 0]
        except np.linalg.LinAlgError:
            step = np.einsum("bij,bj->bi", np.linalg.pinv(ja), xa - fa)
        lam = np.ones(len(idx))
        pending = np.ones(len(idx), dtype=bool)
        improved = False
        for _ in range(40):
            rows = np.flatnonzero(pending)
            trial = za[rows] + lam[rows, None] * step[rows]
            with np.errstate(all="ignore"):
                r = np.max(np.abs(forward(trial) - xa[rows]), axis=1)
            ok = np.isfinite(r) & (r < res[idx[rows]])
            z[idx[rows[ok]]] = trial[ok]
            res[idx[rows[ok]]] = r[ok]
            improved |= bool(np.any(ok))
            pending[rows[ok]] = False
            if not np.any(pending):
                break
            lam[pending] *= 0.5
        if not improved:
            break
    return z, res < tol


def invert_mixing(spec, x, z0=None, tol: float = 1e-10, max_iter: int = 100):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if z0 is None:
        z0 = np.zeros_like(x)
    return newton_invert(spec.forward, spec.jacobian, x, z0, tol, max_iter)


def _logabsdet_lu(jac):
    lu, _ = scipy.linalg.lu_factor(jac, check_finite=False)
    return float(np.sum(np.log(np.abs(np.diag(lu)))))


def pushforward_log_density(spec, dist: SourceDistribution, x, z_preimage) -> float:
    """log p0(z) - log|det J_f(z)| at the supplied preimage ``z`` of ``x``."""
    x = np.asarray(x, dtype=float)
    z = np.asarray(z_preimage, dtype=float)
    fz, jac = mix_forward(spec, z, want_jacobian=True)
    if np.max(np.abs(fz - x)) > PREIMAGE_TOL:
        raise InconsistencyError(f"preimage maps {np.max(np.abs(fz - x)):.3g} away from x")
    sign, logdet = np.linalg.slogdet(jac)
    if sign == 0 or logdet < np.log(1e-300):
        raise SingularityError("|det J| below 1e-300")
    return float(dist.log_density(z)[0] - _logabsdet_lu(jac))


def pushforward_log_density_batch(spec, dist: SourceDistribution, X, Z) -> np.ndarray:
    """Row-wise version for datasets, whose stored sources are exact preimages."""
    X = np.atleast_2d(X)
    Z = np.atleast_2d(Z)
    fz, jac = mix_forward(spec, Z, want_jacobian=True)
    if np.max(np.abs(fz - X)) > PREIMAGE_TOL:
        raise InconsistencyError("stored sources are not preimages of the observations")
    sign, logdet = np.linalg.slogdet(jac)
    if np.any(sign == 0) or np.any(logdet < np.log(1e-300)):
        raise SingularityError("|det J| below 1e-300")
    return dist.log_density(Z) - logdet
