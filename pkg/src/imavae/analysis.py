"""Executable checks of the near-deterministic VAE theory: optimal encoder
variances, self-consistency diagnostics, the self-consistent ELBO and its gap
to the log-likelihood, and the closed forms of the linear Gaussian VAE."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractError, SingularityError
from .ima import cima_global_mc, cima_local, ima_regularized_loglik
from .mixing import MlpMixing, newton_invert, pushforward_log_density_batch
from .nets import mlp_forward, mlp_jacobian, mlp_tape
from .vae import (LOG_2PI, LOGVAR_MAX, LOGVAR_MIN, Adam, VaeModel, _uniform_surrogate_logp,
                  elbo_from_params, encode, prior_log_derivs)

log = logging.getLogger(__name__)

PREIMAGE_TOL = 1e-8


# --- optimal variances and self-consistency ---------------------------------

def decoder_preimage(model: VaeModel, x, z0=None, tol: float = PREIMAGE_TOL, max_iter: int = 100):
    """Newton solve of ``f(z) = x`` for the decoder, started from the encoder
    mean unless ``z0`` is given. Returns ``(z, converged)``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if z0 is None:
        z0 = encode(model, x)[0]
    return newton_invert(lambda z: mlp_forward(model.decoder, z),
                         lambda z: mlp_jacobian(model.decoder, z), x, z0, tol, max_iter)


def _neg_prior_curvature(model: VaeModel, z) -> tuple[np.ndarray, np.ndarray]:
    """``-d^2 log p0 / dz_k^2`` row-wise and a flag for points where it is
    defined (the interior of a uniform prior's support)."""
    z = np.atleast_2d(z)
    if model.prior.kind == "standard_gaussian":
        return np.ones_like(z), np.ones(len(z), dtype=bool)
    inside = np.all((z > model.prior.low) & (z < model.prior.high), axis=1)
    return np.zeros_like(z), inside


def predict_optimal_sigma(model: VaeModel, x, return_flags: bool = False):
    """Predicted optimal encoder variances

        sigma_k^2 = 1 / (-d^2 log p0/dz_k^2 (g(x)_k) + gamma^2 ||J_f[:, k](g(x))||^2)

    with ``g(x)`` the decoder preimage found by Newton from the encoder mean.
    Where Newton fails the encoder mean is used and the row is flagged as
    degraded. With ``return_flags`` returns ``(prediction, degraded)``.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    z_hat, ok = decoder_preimage(model, np.atleast_2d(x))
    mu = encode(model, np.atleast_2d(x))[0]
    z_hat = np.where(ok[:, None], z_hat, mu)
    if single:
        # exact analytic derivatives; raises outside a uniform support
        curv = -prior_log_derivs(model.prior, z_hat[0])[2][None]
        interior = np.ones(1, dtype=bool)
    else:
        curv, interior = _neg_prior_curvature(model, z_hat)
    J = mlp_jacobian(model.decoder, z_hat)
    col_sq = np.sum(J * J, axis=1)
    pred = 1.0 / (curv + model.gamma_sq * col_sq)
    degraded = ~ok | ~interior
    if single:
        pred, degraded = pred[0], bool(degraded[0])
    return (pred, degraded) if return_flags else pred


@dataclass(frozen=True)
class SelfConsistencyReport:
    gamma_sq: float
    mean_sigma_sq: float
    median_recon_gap: float
    optl_sigma_rel_err: float
    n_test: int
    n_degraded: int = 0


def self_consistency_report(model: VaeModel, data) -> SelfConsistencyReport:
    """Test-split summary: mean encoder variance, median ``||f(mu(x)) - x||``
    and median relative error of the variances against
    :func:`predict_optimal_sigma`."""
    _, x = data.test
    mu, s2 = encode(model, x)
    gap = np.linalg.norm(mlp_forward(model.decoder, mu) - x, axis=1)
    pred, degraded = predict_optimal_sigma(model, x, return_flags=True)
    rel = np.abs(s2 - pred) / pred
    return SelfConsistencyReport(model.gamma_sq, float(np.mean(s2)), float(np.median(gap)),
                                 float(np.median(rel)), len(x), int(np.sum(degraded)))


# --- self-consistent ELBO ---------------------------------------------------

@dataclass(frozen=True)
class ElboStar:
    value: float
    stderr: float
    refined: bool
    fell_back: bool = False
    amortized_value: float | None = None


def _mean_and_se(per_sample: np.ndarray):
    # -inf samples (off a uniform support) give a -inf mean and a NaN stderr
    with np.errstate(invalid="ignore"):
        return (float(np.mean(per_sample)),
                float(np.std(per_sample, ddof=1) / np.sqrt(len(per_sample))))


def _seed_sequence(seed) -> np.random.SeedSequence:
    return seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)


def _whitening(model: VaeModel, mu):
    """Per-sample ``P`` with ``P^T H P = I`` for the Gauss-Newton Hessian
    ``H = gamma^2 J^T J + diag(-d^2 log p0)`` at ``mu``."""
    J = mlp_jacobian(model.decoder, mu)
    curv, _ = _neg_prior_curvature(model, mu)
    H = model.gamma_sq * np.einsum("bki,bkj->bij", J, J)
    H += np.einsum("bi,ij->bij", curv + 1e-12, np.eye(model.dim))
    L = np.linalg.cholesky(H)
    return np.linalg.inv(np.swapaxes(L, 1, 2))  # L^{-T}


def _antithetic(rng, n_draws, b, d):
    half = rng.standard_normal(((n_draws + 1) // 2, b, d))
    return np.concatenate([half, -half])[:n_draws]


def refine_encoder(model: VaeModel, x, mu0, s2_0, steps: int = 300, n_draws: int = 16,
                   lr_start: float = 0.05, lr_end: float = 1e-3, seed=0, polish: bool = True,
                   penalty: float = 1e6):
    """Per-sample (unamortized) ascent of the ELBO over ``(mu, log sigma^2)``.

    Starts from the amortized outputs. The mean is first moved to the decoder
    preimage by Newton when that raises a Monte-Carlo ELBO estimate, then both
    parameters follow Adam with a geometrically decaying step, drawing fresh
    antithetic noise every step. The mean is updated in coordinates whitened
    by the Gauss-Newton Hessian at the start point so that one step size suits
    all directions. Returns ``(mu, sigma_sq)``.
    """
    x = np.atleast_2d(x)
    b, d = x.shape
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mu = np.array(mu0, dtype=float)
    s = np.log(s2_0)
    if polish:
        eps = _antithetic(rng, 64, b, d)
        z, ok = decoder_preimage(model, x, mu)
        cand = np.where(ok[:, None], z, mu)
        better = (elbo_from_params(model, x, cand, np.exp(s), eps).elbo
                  > elbo_from_params(model, x, mu, np.exp(s), eps).elbo)
        mu = np.where(better[:, None], cand, mu)
    P = _whitening(model, mu)
    base = mu.copy()
    u = np.zeros((b, d))
    rows = np.tile(np.arange(b), n_draws)
    xr = np.tile(x, (n_draws, 1))
    opt = Adam([u, s], lr_start)
    decay = (lr_end / lr_start) ** (1.0 / max(steps - 1, 1))
    for _ in range(steps):
        flat_eps = _antithetic(rng, n_draws, b, d).reshape(-1, d)
        tape = ad.Tape(check_finite=False)
        mu_v = tape.input(base + np.einsum("bij,bj->bi", P, u))
        s_v = tape.input(s)
        sv = ad.clip(s_v, LOGVAR_MIN, LOGVAR_MAX)
        z = mu_v[rows] + ad.exp(sv * 0.5)[rows] * tape.const(flat_eps)
        fz = mlp_tape(model.decoder, z)
        rec = ad.sum(ad.square(tape.const(xr) - fz)) * (-0.5 * model.gamma_sq / n_draws)
        ent = ad.sum(sv) * 0.5
        if model.prior.kind == "standard_gaussian":
            cross = (ad.sum(ad.square(mu_v)) + ad.sum(ad.exp(sv))) * -0.5
        else:
            cross = ad.sum(_uniform_surrogate_logp(model.prior, z, penalty)) * (1.0 / n_draws)
        obj = rec + ent + cross
        g_mu, g_s = tape.gradients(obj, [mu_v, s_v])
        g_u = np.einsum("bij,bi->bj", P, g_mu)
        u, s = opt.step([u, s], [-g_u, -g_s])
        opt.lr *= decay
    mu = base + np.einsum("bij,bj->bi", P, u)
    return mu, np.exp(np.clip(s, LOGVAR_MIN, LOGVAR_MAX))


def elbo_star_estimate(model: VaeModel, data, refine: bool = False, n_mc: int = 64, seed=0,
                       steps: int = 300) -> ElboStar:
    """Mean test-split ELBO at the trained encoder, optionally after per-sample
    refinement. Refinement that lowers the estimate is discarded."""
    _, x = data.test
    mu, s2 = encode(model, x)
    ss = _seed_sequence(seed)
    eval_rng, refine_rng = [np.random.default_rng(c) for c in ss.spawn(2)]
    eps = eval_rng.standard_normal((n_mc, len(x), model.dim))
    amortized = elbo_from_params(model, x, mu, s2, eps).elbo
    a_val, a_se = _mean_and_se(amortized)
    if not refine:
        return ElboStar(a_val, a_se, False, False, a_val)
    mu_r, s2_r = refine_encoder(model, x, mu, s2, steps=steps, seed=refine_rng)
    refined = elbo_from_params(model, x, mu_r, s2_r, eps).elbo
    r_val, r_se = _mean_and_se(refined)
    if not np.isfinite(r_val) or r_val < a_val:
        log.warning("refinement lowered the ELBO (%.4f < %.4f); keeping the amortized value",
                    r_val, a_val)
        return ElboStar(a_val, a_se, True, True, a_val)
    return ElboStar(r_val, r_se, True, False, a_val)


def elbo_star(model: VaeModel, data, refine: bool = False, n_mc: int = 64, seed=0) -> float:
    return elbo_star_estimate(model, data, refine, n_mc, seed).value


# --- gap to the log-likelihood ----------------------------------------------

@dataclass(frozen=True)
class GapReport:
    elbo_star: float
    log_px: float
    l_ima: float
    cima_global: float
    gamma_sq: float
    cima_global_stderr: float = 0.0
    elbo_star_stderr: float = 0.0


def gap_report(model: VaeModel, data, spec, dist, n_mc_cima: int = 100000, refine: bool = True,
               n_mc: int = 64, seed=0) -> GapReport:
    """ELBO*, exact log-likelihood, global IMA contrast and the regularised
    log-likelihood for a model whose decoder is the ground-truth mixing."""
    if not model.decoder_frozen:
        raise ContractError("gap_report needs a frozen ground-truth decoder")
    if not (isinstance(spec, MlpMixing) and spec.params.equals(model.decoder)):
        raise ContractError("model decoder differs from the supplied mixing")
    z, x = data.test
    log_px = float(np.mean(pushforward_log_density_batch(spec, dist, x, z)))
    s_cima, s_elbo = _seed_sequence(seed).spawn(2)
    cima, cima_se = cima_global_mc(spec, dist, n_mc_cima, np.random.default_rng(s_cima))
    est = elbo_star_estimate(model, data, refine, n_mc, s_elbo)
    return GapReport(est.value, log_px, float(ima_regularized_loglik(log_px, cima, 1.0)), cima,
                     model.gamma_sq, cima_se, est.stderr)


# --- linear Gaussian VAE ----------------------------------------------------

def linear_vae_stationary(W, gamma_sq: float):
    """Stationary posterior variances ``D*``, the exact ELBO gap
    ``0.5 * (log det diag(M) - log det M)`` with ``M = W^T W + I / gamma^2``,
    and the local IMA contrast of ``W``."""
    W = np.asarray(W, dtype=float)
    if gamma_sq <= 0:
        raise ValueError("gamma_sq must be positive")
    sign, logdet_w = np.linalg.slogdet(W)
    if sign == 0 or logdet_w < np.log(1e-300):
        raise SingularityError("W is singular")
    d = W.shape[1]
    M = W.T @ W + np.eye(d) / gamma_sq
    D = 1.0 / (gamma_sq * np.diag(M))
    _, logdet_m = np.linalg.slogdet(M)
    gap = 0.5 * (np.sum(np.log(np.diag(M))) - logdet_m)
    return D, float(max(gap, 0.0) if gap > -1e-14 else gap), cima_local(W)


def linear_gaussian_posterior(W, b, gamma_sq: float, x):
    """Exact posterior ``N(m, S)`` of ``z ~ N(0, I)``, ``x | z ~ N(Wz + b, I/gamma^2)``."""
    W = np.asarray(W, dtype=float)
    prec = np.eye(W.shape[1]) + gamma_sq * W.T @ W
    S = np.linalg.inv(prec)
    m = gamma_sq * S @ W.T @ (np.asarray(x, dtype=float) - b)
    return m, S


def linear_gaussian_log_marginal(W, b, gamma_sq: float, x) -> float:
    W = np.asarray(W, dtype=float)
    C = W @ W.T + np.eye(W.shape[0]) / gamma_sq
    r = np.asarray(x, dtype=float) - b
    _, logdet = np.linalg.slogdet(C)
    return float(-0.5 * (r @ np.linalg.solve(C, r) + logdet + len(r) * LOG_2PI))


def linear_gaussian_elbo(W, b, gamma_sq: float, x, m, s2) -> float:
    """Closed-form ELBO of a factorized Gaussian ``q = N(m, diag(s2))`` under
    the linear Gaussian model with a standard normal prior."""
    W = np.asarray(W, dtype=float)
    m = np.asarray(m, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    r = np.asarray(x, dtype=float) - W @ m - b
    d_x = W.shape[0]
    rec = (-0.5 * gamma_sq * (r @ r + np.sum(s2 * np.sum(W * W, axis=0)))
           + 0.5 * d_x * (np.log(gamma_sq) - LOG_2PI))
    negkl = 0.5 * np.sum(1.0 + np.log(s2) - m * m - s2)
    return float(rec + negkl)


def gaussian_kl(m0, S0, m1, S1) -> float:
    """KL[N(m0, S0) || N(m1, S1)] in closed form."""
    m0, m1 = np.asarray(m0, dtype=float), np.asarray(m1, dtype=float)
    S0, S1 = np.asarray(S0, dtype=float), np.asarray(S1, dtype=float)
    d = len(m0)
    S1inv = np.linalg.inv(S1)
    diff = m1 - m0
    _, ld0 = np.linalg.slogdet(S0)
    _, ld1 = np.linalg.slogdet(S1)
    return float(0.5 * (np.trace(S1inv @ S0) + diff @ S1inv @ diff - d + ld1 - ld0))


def gaussian_kl_mc(m0, S0, m1, S1, n_mc: int, seed=0, chunk: int = 200000):
    """Monte-Carlo KL[N(m0, S0) || N(m1, S1)] from samples of the first
    Gaussian; returns ``(estimate, stderr)``."""
    m0, m1 = np.asarray(m0, dtype=float), np.asarray(m1, dtype=float)
    L0 = np.linalg.cholesky(S0)
    L1 = np.linalg.cholesky(S1)
    ld0 = 2.0 * np.sum(np.log(np.diag(L0)))
    ld1 = 2.0 * np.sum(np.log(np.diag(L1)))
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    total, total_sq, count = 0.0, 0.0, 0
    while count < n_mc:
        n = min(chunk, n_mc - count)
        e = rng.standard_normal((n, len(m0)))
        z = m0 + e @ L0.T
        w = np.linalg.solve(L1, (z - m1).T).T
        # log q0 - log q1; the 2 pi terms cancel
        vals = -0.5 * np.sum(e * e, axis=1) - 0.5 * ld0 + 0.5 * np.sum(w * w, axis=1) + 0.5 * ld1
        total += vals.sum()
        total_sq += (vals * vals).sum()
        count += n
    mean = total / count
    var = max(total_sq / count - mean * mean, 0.0)
    return float(mean), float(np.sqrt(var / count))
