"""Experiment sweeps over (seed, gamma^2, severity) cells with deterministic
per-cell seeding, and CSV export of the resulting records."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import multiprocessing
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .analysis import (elbo_star_estimate, gap_report, linear_vae_stationary,
                       self_consistency_report)
from .errors import ConfigurationError, ImaVaeError
from .ima import cima_global_mc, cima_local_batch
from .metrics import mcc
from .mixing import (ComposedMixing, SourceDistribution, make_dataset, make_mlp_mixing,
                     make_moebius, make_volume_preserving_linear, pushforward_log_density_batch,
                     random_orthogonal)
from .nets import mlp_jacobian
from .vae import Prior, TrainConfig, encode, init_vae, train_vae

log = logging.getLogger(__name__)

EXPERIMENTS = ("self-consistency", "gap-comparison", "moebius-mcc", "linear-closed-form")

# stream labels mixed into every seed derivation so that different uses of the
# same (master, seed) pair never share random numbers
_DATA, _MIXING, _TRAIN, _EVAL, _SEVERITY, _LINEAR = range(6)

PAPER_SCALE = {
    "self-consistency": {"samples": [42000, 12000, 6000], "n_seeds": 20},
    "gap-comparison": {"samples": [100000, 30000, 15000], "n_seeds": 5, "learning_rate": 1e-4},
    "moebius-mcc": {"samples": [42000, 12000, 6000], "n_seeds": 100},
    "linear-closed-form": {},
}


@dataclass
class ExperimentConfig:
    experiment: str
    dim: int = 3
    gamma_sq_grid: list = field(default_factory=lambda: [1e1, 1e2, 1e3, 1e4, 1e5])
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    samples: list = field(default_factory=lambda: [7000, 2000, 1000])
    prior: str = "standard_gaussian"
    mixing: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    cima_severity_grid: list = field(default_factory=list)
    master_seed: int = 0
    n_mc_eval: int = 64
    n_mc_cima: int = 10000
    refine: bool = False

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigurationError(f"unknown experiment {self.experiment!r}")
        if not self.gamma_sq_grid or not self.seeds:
            raise ConfigurationError("gamma_sq_grid and seeds must be nonempty")
        if len(self.samples) != 3 or any(int(s) <= 0 for s in self.samples):
            raise ConfigurationError("samples must be three positive counts (train, val, test)")
        if any(float(g) <= 0 for g in self.gamma_sq_grid):
            raise ConfigurationError("gamma_sq values must be positive")
        if any(float(s) < 0 for s in self.cima_severity_grid):
            raise ConfigurationError("severities must be nonnegative")
        self.gamma_sq_grid = [float(g) for g in self.gamma_sq_grid]
        self.seeds = [int(s) for s in self.seeds]
        self.samples = [int(s) for s in self.samples]
        self.cima_severity_grid = [float(s) for s in self.cima_severity_grid]
        bad = {"gamma_sq", "seed", "prior", "decoder_frozen"} & set(self.train)
        if bad:
            raise ConfigurationError(f"train section must not set {sorted(bad)}; they are per cell")
        TrainConfig.from_dict(dict(self.train))  # validate early

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def cells(self):
        """Cell coordinates ``(seed, gamma index, severity index)`` in output order."""
        severities = self.cima_severity_grid or [None]
        return [(s, gi, si) for s in self.seeds for gi in range(len(self.gamma_sq_grid))
                for si in range(len(severities))]

    def severity(self, si):
        return self.cima_severity_grid[si] if self.cima_severity_grid else None


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: expected a mapping at top level")
    return ExperimentConfig.from_dict(data)


def paper_scale(config: ExperimentConfig) -> ExperimentConfig:
    """Sample and seed counts of the full-size runs."""
    over = PAPER_SCALE[config.experiment]
    out = replace(config, train=dict(config.train))
    if "samples" in over:
        out.samples = list(over["samples"])
    if "n_seeds" in over:
        out.seeds = list(range(over["n_seeds"]))
    if "learning_rate" in over:
        out.train["learning_rate"] = over["learning_rate"]
    return out


# --- records ----------------------------------------------------------------

@dataclass
class RunRecord:
    experiment: str
    seed: int
    gamma_sq: float
    severity: float | None = None
    elbo_star: float | None = None
    log_px: float | None = None
    cima_local_mean: float | None = None
    cima_global: float | None = None
    mcc: float | None = None
    mean_sigma_sq: float | None = None
    median_recon_gap: float | None = None
    optl_sigma_rel_err: float | None = None
    l_ima: float | None = None
    gap: float | None = None
    elbo_star_stderr: float | None = None
    cima_global_stderr: float | None = None
    epochs: int | None = None
    best_val_elbo: float | None = None
    initial_val_elbo: float | None = None
    error: str | None = None

    def __post_init__(self):
        # non-finite values are reported as missing rather than as numbers
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, float) and not math.isfinite(v):
                setattr(self, f.name, None)


CSV_FIELDS = [f.name for f in fields(RunRecord)]
_INT_FIELDS = {"seed", "epochs"}
_STR_FIELDS = {"experiment", "error"}


def _seed_seq(config: ExperimentConfig, *key) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=config.master_seed, spawn_key=tuple(int(k) for k in key))


def _rng(config, *key):
    return np.random.default_rng(_seed_seq(config, *key))


def _source_dist(config: ExperimentConfig) -> SourceDistribution:
    return SourceDistribution(config.prior, config.dim)


def build_mixing(config: ExperimentConfig, seed: int, severity=None):
    """Ground-truth mixing of one cell. The mixing is drawn per seed unless the
    config pins ``mixing.seed``."""
    m = dict(config.mixing)
    kind = m.pop("kind", "mlp" if config.experiment != "moebius-mcc" else "moebius")
    mix_seed = m.pop("seed", None)
    rng = (np.random.default_rng(mix_seed) if mix_seed is not None
           else _rng(config, _MIXING, seed))
    if kind == "mlp":
        spec = make_mlp_mixing(config.dim, int(m.pop("n_layers", 3)), m.pop("mode", "orthogonal"),
                               m.pop("activation", "smooth_leaky_relu"), rng,
                               float(m.pop("gain", 1.0)))
    elif kind == "moebius":
        spec = make_moebius(config.dim, rng, margin=float(m.pop("margin", 0.5)))
    else:
        raise ConfigurationError(f"unknown mixing kind {kind!r}")
    if m:
        raise ConfigurationError(f"unused mixing keys: {sorted(m)}")
    if severity is not None:
        M = make_volume_preserving_linear(config.dim, severity, _rng(config, _SEVERITY, seed))
        spec = ComposedMixing(spec, M)
    return spec


def _train_config(config: ExperimentConfig, gamma_sq: float, seed_seq, frozen: bool) -> TrainConfig:
    t = dict(config.train)
    t.update(gamma_sq=gamma_sq, prior=config.prior, decoder_frozen=frozen,
             seed=int(seed_seq.generate_state(1)[0]))
    return TrainConfig.from_dict(t)


def _linear_cell(config, seed, gi):
    rng = _rng(config, _LINEAR, seed)
    while True:
        W = rng.standard_normal((config.dim, config.dim))
        if abs(np.linalg.det(W)) > 1e-3:
            break
    g = config.gamma_sq_grid[gi]
    D, gap, cima_w = linear_vae_stationary(W, g)
    return RunRecord(config.experiment, seed, g, cima_local_mean=cima_w, cima_global=cima_w,
                     gap=gap, mean_sigma_sq=float(np.mean(D)))


def _training_cell(config, seed, gi, si):
    g = config.gamma_sq_grid[gi]
    severity = config.severity(si)
    spec = build_mixing(config, seed, severity)
    dist = _source_dist(config)
    data = make_dataset(spec, dist, config.samples, _seed_seq(config, _DATA, seed))
    frozen = config.experiment == "gap-comparison"
    prior = Prior(config.prior, config.dim)
    enc = dict(config.encoder)
    model = init_vae(config.dim, g, prior, _seed_seq(config, _TRAIN, seed, gi, si, 0),
                     hidden=int(enc.get("hidden", 50)), n_layers=int(enc.get("n_layers", 3)),
                     activation=enc.get("activation", "smooth_leaky_relu"),
                     decoder=spec.params if frozen else None)
    tc = _train_config(config, g, _seed_seq(config, _TRAIN, seed, gi, si, 1), frozen)
    best, history = train_vae(model, data, tc)
    rec = RunRecord(config.experiment, seed, g, severity, epochs=history[-1][0],
                    best_val_elbo=max(h[2] for h in history), initial_val_elbo=history[0][2])

    z_test, x_test = data.test
    mu, _ = encode(best, x_test)
    rec.mcc = mcc(z_test, mu).mcc
    rec.cima_local_mean = float(np.nanmean(cima_local_batch(mlp_jacobian(best.decoder, mu))))
    sc = self_consistency_report(best, data)
    rec.mean_sigma_sq = sc.mean_sigma_sq
    rec.median_recon_gap = sc.median_recon_gap
    rec.optl_sigma_rel_err = sc.optl_sigma_rel_err
    eval_seed = _seed_seq(config, _EVAL, seed, gi, si)
    if frozen:
        gr = gap_report(best, data, spec, dist, config.n_mc_cima, config.refine,
                        config.n_mc_eval, eval_seed)
        rec.elbo_star, rec.elbo_star_stderr = gr.elbo_star, gr.elbo_star_stderr
        rec.log_px, rec.l_ima = gr.log_px, gr.l_ima
        rec.cima_global, rec.cima_global_stderr = gr.cima_global, gr.cima_global_stderr
        rec.gap = gr.log_px - gr.elbo_star
    else:
        try:
            est = elbo_star_estimate(best, data, config.refine, config.n_mc_eval, eval_seed)
            rec.elbo_star, rec.elbo_star_stderr = est.value, est.stderr
        except ImaVaeError as exc:  # e.g. every draw off a uniform prior's support
            log.info("ELBO* unavailable for cell %s: %s", (seed, gi, si), exc)
        cima, cima_se = cima_global_mc(spec, dist, config.n_mc_cima, eval_seed)
        rec.cima_global, rec.cima_global_stderr = cima, cima_se
        rec.log_px = float(np.mean(pushforward_log_density_batch(spec, dist, x_test, z_test)))
    return rec


def run_cell(config: ExperimentConfig, seed: int, gi: int, si: int = 0):
    """One cell; failures are recorded in the ``error`` field. Returns
    ``(record, wall_clock_seconds)``."""
    start = time.perf_counter()
    try:
        if config.experiment == "linear-closed-form":
            rec = _linear_cell(config, seed, gi)
        else:
            rec = _training_cell(config, seed, gi, si)
    except Exception as exc:  # one failing cell must not abort the sweep
        log.warning("cell (seed=%s, gamma index=%s, severity index=%s) failed: %s", seed, gi, si, exc)
        rec = RunRecord(config.experiment, seed, config.gamma_sq_grid[gi], config.severity(si),
                        error=f"{type(exc).__name__}: {exc}")
    return rec, time.perf_counter() - start


def _run_cell_args(args):
    return run_cell(*args)


def run_experiment(config: ExperimentConfig, workers: int = 1, with_timing: bool = False):
    """All cells of a config in a fixed order. Cells are independent, so the
    result does not depend on ``workers``."""
    jobs = [(config, s, gi, si) for s, gi, si in config.cells()]
    if workers > 1 and len(jobs) > 1:
        ctx = multiprocessing.get_context("spawn")
        with ctx.Pool(workers) as pool:
            results = pool.map(_run_cell_args, jobs, chunksize=1)
    else:
        results = [_run_cell_args(j) for j in jobs]
    records = [r for r, _ in results]
    if with_timing:
        return records, [t for _, t in results]
    return records


# --- export -----------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return "null"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in records:
        w.writerow([_fmt(getattr(r, f)) for f in CSV_FIELDS])
    return buf.getvalue()


def records_from_csv(text: str) -> list[RunRecord]:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != CSV_FIELDS:
        raise ValueError("unexpected CSV header")
    out = []
    for row in rows[1:]:
        kw = {}
        for name, val in zip(CSV_FIELDS, row):
            if val == "null":
                kw[name] = None
            elif name in _INT_FIELDS:
                kw[name] = int(val)
            elif name in _STR_FIELDS:
                kw[name] = val
            else:
                kw[name] = float(val)
        out.append(RunRecord(**kw))
    return out


def export_results(records, path, config: ExperimentConfig | None = None, timings=None) -> Path:
    """Write the CSV and a JSON sidecar ``<path>.meta.json`` with the resolved
    config, the package version and per-cell wall-clock times. Timings live
    only in the sidecar so that the CSV is reproducible byte for byte."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(records_to_csv(records))
    meta = {"version": __version__, "config": config.to_dict() if config else None,
            "n_records": len(records)}
    if timings is not None:
        meta["wall_clock_seconds"] = [round(t, 3) for t in timings]
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    return path
