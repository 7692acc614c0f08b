"""Gaussian VAE with a factorized Gaussian encoder, an isotropic Gaussian
decoder of precision gamma^2 and a factorized prior; ELBO evaluation and
training with Adam and early stopping."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .errors import ConfigurationError, DomainError, EvaluationError, TrainingError
from .nets import MlpParams, from_text, init_mlp, mlp_forward, mlp_tape, to_text

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
SIGMA_SQ_MIN = 1e-12
SIGMA_SQ_MAX = 1e6
LOGVAR_MIN = float(np.log(SIGMA_SQ_MIN))
LOGVAR_MAX = float(np.log(SIGMA_SQ_MAX))
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
WARMUP_GAMMA_SQ = 1e4


# --- prior ------------------------------------------------------------------

@dataclass(frozen=True)
class Prior:
    kind: str  # "standard_gaussian" | "uniform"
    dim: int
    low: float = 0.0
    high: float = 1.0

    def __post_init__(self):
        if self.kind not in ("standard_gaussian", "uniform"):
            raise ConfigurationError(f"unknown prior {self.kind!r}")
        if self.kind == "uniform" and not self.low < self.high:
            raise ConfigurationError("uniform prior needs low < high")

    def log_density(self, z) -> np.ndarray:
        """Row-wise log density; ``-inf`` outside a uniform prior's support."""
        z = np.atleast_2d(z)
        if self.kind == "standard_gaussian":
            return -0.5 * np.sum(z * z, axis=1) - 0.5 * self.dim * LOG_2PI
        inside = np.all((z >= self.low) & (z <= self.high), axis=1)
        return np.where(inside, -self.dim * np.log(self.high - self.low), -np.inf)


def prior_log_derivs(prior: Prior, z):
    """``(log p0(z), d log p0 / dz_k, d^2 log p0 / dz_k^2)`` for one point."""
    z = np.asarray(z, dtype=float)
    if prior.kind == "standard_gaussian":
        logp = float(-0.5 * z @ z - 0.5 * prior.dim * LOG_2PI)
        return logp, -z, -np.ones_like(z)
    if np.any(z <= prior.low) or np.any(z >= prior.high):
        raise DomainError("point is not in the interior of the uniform prior's support")
    return float(-prior.dim * np.log(prior.high - prior.low)), np.zeros_like(z), np.zeros_like(z)


# --- model ------------------------------------------------------------------

@dataclass
class VaeModel:
    enc_mean: MlpParams
    enc_logvar: MlpParams
    decoder: MlpParams
    gamma_sq: float
    prior: Prior
    decoder_frozen: bool = False

    def __post_init__(self):
        d = self.prior.dim
        for name, net in (("enc_mean", self.enc_mean), ("enc_logvar", self.enc_logvar),
                          ("decoder", self.decoder)):
            if net.sizes[0] != d or net.sizes[-1] != d:
                raise ConfigurationError(f"{name} must map R^{d} to R^{d}, has sizes {net.sizes}")
        if not (np.isfinite(self.gamma_sq) and self.gamma_sq > 0):
            raise ConfigurationError("gamma_sq must be positive and finite")

    @property
    def dim(self) -> int:
        return self.prior.dim

    def copy(self) -> "VaeModel":
        return replace(self, enc_mean=self.enc_mean.copy(), enc_logvar=self.enc_logvar.copy(),
                       decoder=self.decoder.copy())

    def trainable(self) -> list[np.ndarray]:
        arrays = self.enc_mean.flat() + self.enc_logvar.flat()
        if not self.decoder_frozen:
            arrays += self.decoder.flat()
        return arrays

    def with_trainable(self, arrays) -> "VaeModel":
        nm = len(self.enc_mean.flat())
        nv = len(self.enc_logvar.flat())
        out = replace(self, enc_mean=self.enc_mean.with_flat(arrays[:nm]),
                      enc_logvar=self.enc_logvar.with_flat(arrays[nm:nm + nv]))
        if not self.decoder_frozen:
            out.decoder = self.decoder.with_flat(arrays[nm + nv:])
        return out

    def equals(self, other: "VaeModel") -> bool:
        return (self.enc_mean.equals(other.enc_mean) and self.enc_logvar.equals(other.enc_logvar)
                and self.decoder.equals(other.decoder) and self.gamma_sq == other.gamma_sq
                and self.prior == other.prior and self.decoder_frozen == other.decoder_frozen)


def init_vae(dim: int, gamma_sq: float, prior: Prior, seed=0, hidden: int = 50,
             n_layers: int = 3, activation: str = "smooth_leaky_relu",
             decoder: MlpParams | None = None) -> VaeModel:
    """Fresh model with Gaussian fan-in initialisation. Passing ``decoder``
    freezes it (the fixed ground-truth decoder regime)."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    s_mean, s_var, s_dec = ss.spawn(3)
    sizes = [dim] + [hidden] * (n_layers - 1) + [dim]
    enc_mean = init_mlp(sizes, "gaussian_fan_in", activation, s_mean)
    enc_logvar = init_mlp(sizes, "gaussian_fan_in", activation, s_var)
    frozen = decoder is not None
    if decoder is None:
        decoder = init_mlp(sizes, "gaussian_fan_in", activation, s_dec)
    return VaeModel(enc_mean, enc_logvar, decoder, float(gamma_sq), prior, frozen)


def encode(model: VaeModel, x):
    """Encoder mean and clamped variance for one point or a row batch."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.dim:
        raise ValueError(f"input has dimension {x.shape[-1]}, model expects {model.dim}")
    mu = mlp_forward(model.enc_mean, x)
    logvar = np.clip(mlp_forward(model.enc_logvar, x), LOGVAR_MIN, LOGVAR_MAX)
    return mu, np.exp(logvar)


def decode(model: VaeModel, z):
    return mlp_forward(model.decoder, z)


# --- ELBO -------------------------------------------------------------------

@dataclass
class ElboBreakdown:
    """Per-sample ELBO terms (scalars for a single point, arrays for a batch).
    ``stderr`` is the Monte-Carlo standard error of the ELBO estimate."""

    reconstruction: np.ndarray
    neg_kl_to_prior: np.ndarray
    elbo: np.ndarray
    per_dim_sigma_sq: np.ndarray
    stderr: np.ndarray = field(default=None)


def _log_norm_const(gamma_sq: float, d: int) -> float:
    # d log(gamma) - (d/2) log(2 pi)
    return 0.5 * d * (np.log(gamma_sq) - LOG_2PI)


def gaussian_entropy(sigma_sq) -> np.ndarray:
    d = np.shape(sigma_sq)[-1]
    return 0.5 * np.sum(np.log(sigma_sq), axis=-1) + 0.5 * d * (LOG_2PI + 1.0)


def elbo_from_params(model: VaeModel, x, mu, sigma_sq, eps) -> ElboBreakdown:
    """ELBO of a batch for given variational parameters and standard-normal
    draws ``eps`` of shape ``(n_mc, B, d)``."""
    x = np.atleast_2d(x)
    mu = np.atleast_2d(mu)
    sigma_sq = np.atleast_2d(sigma_sq)
    n_mc, b, d = eps.shape
    z = mu[None] + np.sqrt(sigma_sq)[None] * eps
    fz = mlp_forward(model.decoder, z.reshape(-1, d)).reshape(n_mc, b, d)
    sq = np.sum((x[None] - fz) ** 2, axis=2)  # (n_mc, B)
    rec_draws = -0.5 * model.gamma_sq * sq + _log_norm_const(model.gamma_sq, d)
    if model.prior.kind == "standard_gaussian":
        negkl = 0.5 * np.sum(1.0 + np.log(sigma_sq) - mu * mu - sigma_sq, axis=1)
        draws = rec_draws + negkl[None]
    else:
        logp = model.prior.log_density(z.reshape(-1, d)).reshape(n_mc, b)
        all_off = np.all(np.isneginf(logp), axis=0)
        if np.any(all_off):
            raise EvaluationError(
                f"all {n_mc} draws fell outside the prior support for {int(all_off.sum())} samples")
        ent = gaussian_entropy(sigma_sq)
        with np.errstate(invalid="ignore"):
            negkl = np.mean(logp, axis=0) + ent
        draws = rec_draws + logp + ent[None]
    rec = np.mean(rec_draws, axis=0)
    elbo = rec + negkl
    if n_mc > 1:
        with np.errstate(invalid="ignore"):
            se = np.std(draws, axis=0, ddof=1) / np.sqrt(n_mc)
    else:
        se = np.full(b, np.nan)
    return ElboBreakdown(rec, negkl, elbo, sigma_sq, se)


def _squeeze(br: ElboBreakdown) -> ElboBreakdown:
    return ElboBreakdown(float(br.reconstruction[0]), float(br.neg_kl_to_prior[0]),
                         float(br.elbo[0]), br.per_dim_sigma_sq[0], float(br.stderr[0]))


def elbo_terms(model: VaeModel, x, n_mc: int = 1, seed=0, chunk: int = 4096) -> ElboBreakdown:
    """Monte-Carlo ELBO with reparameterised draws; KL in closed form for the
    Gaussian prior, cross-entropy by Monte Carlo plus exact entropy for the
    uniform prior."""
    if n_mc < 1:
        raise ConfigurationError("n_mc must be at least 1")
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = np.atleast_2d(x)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    eps = rng.standard_normal((n_mc, len(xb), model.dim))
    parts = []
    for i in range(0, len(xb), chunk):
        mu, s2 = encode(model, xb[i:i + chunk])
        parts.append(elbo_from_params(model, xb[i:i + chunk], mu, s2, eps[:, i:i + chunk]))
    br = ElboBreakdown(*(np.concatenate([getattr(p, f) for p in parts])
                         for f in ("reconstruction", "neg_kl_to_prior", "elbo",
                                   "per_dim_sigma_sq", "stderr")))
    return _squeeze(br) if single else br


def _uniform_surrogate_logp(prior: Prior, z: ad.Var, penalty: float) -> ad.Var:
    """Flat log density inside the box minus ``penalty/2 * dist^2`` outside;
    per-row values."""
    over = ad.relu(z - prior.high)
    under = ad.relu(prior.low - z)
    dist2 = ad.sum(ad.square(over) + ad.square(under), axis=1)
    return dist2 * (-0.5 * penalty) - prior.dim * float(np.log(prior.high - prior.low))


def elbo_tape(model: VaeModel, x, eps, tape: ad.Tape, weights=None, mu_fixed=None,
              penalty: float = 1e6):
    """Record the per-sample ELBO of a batch on ``tape`` with single draws
    ``eps`` of shape ``(B, d)``.

    ``weights`` holds Vars for ``enc_mean, enc_logvar, decoder`` flat lists
    (constants when ``None``). ``mu_fixed`` replaces the encoder mean by given
    values. A uniform prior uses the smooth penalty surrogate so that
    off-support draws still give gradients. Returns ``(elbo, rec_core, negkl)``
    where ``rec_core`` is ``-0.5 * ||x - f(z)||^2`` per row.
    """
    d = model.dim
    if weights is None:
        weights = [[tape.const(a) for a in net.flat()]
                   for net in (model.enc_mean, model.enc_logvar, model.decoder)]
    w_mean, w_var, w_dec = weights
    xv = tape.const(x)
    mu = tape.const(mu_fixed) if mu_fixed is not None else mlp_tape(model.enc_mean, xv, w_mean)
    logvar = ad.clip(mlp_tape(model.enc_logvar, xv, w_var), LOGVAR_MIN, LOGVAR_MAX)
    sigma = ad.exp(logvar * 0.5)
    z = mu + sigma * tape.const(eps)
    fz = mlp_tape(model.decoder, z, w_dec)
    rec_core = ad.sum(ad.square(xv - fz), axis=1) * -0.5
    if model.prior.kind == "standard_gaussian":
        negkl = ad.sum(logvar - ad.square(mu) - ad.exp(logvar) + 1.0, axis=1) * 0.5
    else:
        ent = ad.sum(logvar, axis=1) * 0.5 + 0.5 * d * (LOG_2PI + 1.0)
        negkl = _uniform_surrogate_logp(model.prior, z, penalty) + ent
    elbo = rec_core * model.gamma_sq + negkl + _log_norm_const(model.gamma_sq, d)
    return elbo, rec_core, negkl


# --- training ---------------------------------------------------------------

@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 20
    n_mc_eval: int = 1
    gamma_sq: float = 1.0
    prior: str = "standard_gaussian"
    seed: int = 0
    decoder_frozen: bool = False
    warmup_epochs: int = 30
    penalty: float = 1e6

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 0 or self.patience < 1 or self.n_mc_eval < 1:
            raise ConfigurationError("batch_size, patience and n_mc_eval must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


class Adam:
    def __init__(self, params: list[np.ndarray], lr: float, betas=ADAM_BETAS, eps=ADAM_EPS):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        """Ascent-agnostic: returns ``params - lr * update(grads)``."""
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        out = []
        for i, (p, g) in enumerate(zip(params, grads)):
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            out.append(p - self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps))
        return out


def _split_sizes(model: VaeModel):
    return len(model.enc_mean.flat()), len(model.enc_logvar.flat())


def surrogate_elbo(model: VaeModel, x, eps, penalty: float = 1e6) -> np.ndarray:
    """Per-sample training objective (the exact ELBO for a Gaussian prior)
    averaged over draws ``eps`` of shape ``(n_mc, B, d)``."""
    if model.prior.kind == "standard_gaussian":
        mu, s2 = encode(model, x)
        return elbo_from_params(model, x, mu, s2, eps).elbo
    vals = []
    for e in eps:
        tape = ad.Tape(check_finite=False)
        vals.append(elbo_tape(model, x, e, tape, penalty=penalty)[0].value)
    return np.mean(vals, axis=0)


def train_vae(model: VaeModel, data, config: TrainConfig):
    """Adam on the negative ELBO with early stopping on the validation ELBO.

    ``data`` is a :class:`~imavae.mixing.Dataset`. Returns the best model and
    a history of ``(epoch, train_elbo, val_elbo)``; epoch 0 is the initial
    model. In the frozen-decoder regime with ``gamma_sq >= 1e4`` the first
    ``warmup_epochs`` epochs hold the ELBO's encoder mean at the true sources
    (training only variances) while the mean encoder is fitted to the sources
    by least squares.
    """
    if config.gamma_sq != model.gamma_sq:
        raise ConfigurationError("config.gamma_sq differs from the model's gamma_sq")
    z_train, x_train = data.train
    _, x_val = data.val
    d = model.dim
    ss = np.random.SeedSequence(config.seed)
    val_eps = np.random.default_rng(ss.spawn(1)[0]).standard_normal((config.n_mc_eval, len(x_val), d))
    train_probe = x_train[: len(x_val)]
    probe_eps = np.random.default_rng(np.random.SeedSequence([config.seed, 1])).standard_normal(
        (1, len(train_probe), d))

    best = model.copy()
    best_val = float(np.mean(surrogate_elbo(model, x_val, val_eps, config.penalty)))
    train0 = float(np.mean(surrogate_elbo(model, train_probe, probe_eps, config.penalty)))
    history = [(0, train0, best_val)]
    if config.max_epochs == 0:
        return best, history

    warmup = (config.warmup_epochs if model.decoder_frozen and model.gamma_sq >= WARMUP_GAMMA_SQ
              else 0)
    params = model.trainable()
    opt = Adam(params, config.learning_rate)
    nm, nv = _split_sizes(model)
    n = len(x_train)
    bs = config.batch_size
    current = model
    stale = 0
    step = 0
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2, epoch]))
        order = rng.permutation(n)
        eps_all = rng.standard_normal((n, d))
        in_warmup = epoch <= warmup
        total = 0.0
        for bi, start in enumerate(range(0, n, bs)):
            idx = order[start:start + bs]
            tape = ad.Tape(check_finite=False)
            pv = [tape.input(p) for p in params]
            weights = [pv[:nm], pv[nm:nm + nv]]
            weights.append(pv[nm + nv:] if not current.decoder_frozen
                           else [tape.const(a) for a in current.decoder.flat()])
            xb = x_train[idx]
            mu_fixed = z_train[idx] if in_warmup else None
            elbo, _, _ = elbo_tape(current, xb, eps_all[idx], tape, weights, mu_fixed, config.penalty)
            loss = ad.sum(elbo) * (-1.0 / len(idx))
            if in_warmup:
                resid = mlp_tape(current.enc_mean, tape.const(xb), weights[0]) - tape.const(z_train[idx])
                loss = loss + ad.sum(ad.square(resid)) * (1.0 / len(idx))
            if not np.isfinite(loss.value):
                raise TrainingError(f"non-finite loss at step {step}, epoch {epoch}, batch {bi}, "
                                    f"gamma_sq={current.gamma_sq:g}")
            grads = tape.gradients(loss, pv)
            params = opt.step(params, grads)
            current = current.with_trainable(params)
            total -= float(loss.value) * len(idx)
            step += 1
        val = float(np.mean(surrogate_elbo(current, x_val, val_eps, config.penalty)))
        if not np.isfinite(val):
            raise TrainingError(f"non-finite validation ELBO at epoch {epoch}, "
                                f"gamma_sq={current.gamma_sq:g}")
        history.append((epoch, total / n, val))
        if in_warmup:
            continue
        if val > best_val:
            best_val, best, stale = val, current.copy(), 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    log.debug("trained %d epochs, best val ELBO %.4f", history[-1][0], best_val)
    return best, history


# --- checkpoints ------------------------------------------------------------

def model_to_text(model: VaeModel) -> str:
    p = model.prior
    head = (f"vae 1\ngamma_sq {float(model.gamma_sq).hex()}\n"
            f"prior {p.kind} {p.dim} {float(p.low).hex()} {float(p.high).hex()}\n"
            f"decoder_frozen {int(model.decoder_frozen)}\n")
    blocks = [f"[{name}]\n{to_text(net)}" for name, net in
              (("enc_mean", model.enc_mean), ("enc_logvar", model.enc_logvar), ("decoder", model.decoder))]
    return head + "".join(blocks)


def model_from_text(text: str) -> VaeModel:
    head, *rest = text.split("\n[")
    fields = {}
    for line in head.strip().splitlines():
        key, _, val = line.partition(" ")
        fields[key] = val.split()
    if fields.get("vae") != ["1"]:
        raise ValueError("not a vae checkpoint")
    kind, dim, low, high = fields["prior"]
    prior = Prior(kind, int(dim), float.fromhex(low), float.fromhex(high))
    nets = {}
    for block in rest:
        name, _, body = block.partition("]\n")
        nets[name] = from_text(body)
    return VaeModel(nets["enc_mean"], nets["enc_logvar"], nets["decoder"],
                    float.fromhex(fields["gamma_sq"][0]), prior, fields["decoder_frozen"][0] == "1")
