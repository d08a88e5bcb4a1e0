"""End-to-end protocols: build a dataset from a config, fit, forecast and score."""

from __future__ import annotations

import dataclasses
import logging

import numpy as np

from .config import DataConfig, EvalConfig, ExperimentConfig, ModelConfig, TrainSection
from .data import ObservationSet, fhn_quadrant, make_grid, mask_region, pca_fit, simulate
from .dynamics import TimeGrid
from .errors import ContractViolation
from .inference import GPODE, TrainConfig, init_model, predict, train
from .metrics import MetricsReport, evaluate_ensemble

log = logging.getLogger(__name__)

# Integration spacing for the noise-free reference trajectories.
TRUTH_MAX_INTERVAL = 0.07


@dataclasses.dataclass
class Dataset:
    train: ObservationSet
    test: ObservationSet  # noise-free truth on the scoring grid; mask = scored entries
    embedding: np.ndarray | None = None  # (2, embed_dim) when the state is linearly embedded


def embedding_matrix(dim: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((2, dim))


def true_states(system: str, x0, t_start: float, times) -> np.ndarray:
    """Noise-free states at ``times`` for a trajectory started at ``t_start``."""
    times = np.asarray(times, dtype=np.float64)
    if times[0] < t_start:
        raise ContractViolation("reference times precede the trajectory start")
    n = max(2, int(np.ceil((times[-1] - t_start) / TRUTH_MAX_INTERVAL)) + 1)
    full = np.union1d(np.linspace(t_start, times[-1], n), times)
    if full[0] > t_start:
        full = np.concatenate([[t_start], full])
    truth, _ = simulate(system, x0, TimeGrid(full), 0, 0.0)
    return truth.states[np.searchsorted(full, times)]


def _scoring_grid(e: EvalConfig) -> TimeGrid:
    if e.forecast_points == 1:
        return TimeGrid(np.array([e.forecast_start]))
    return TimeGrid(np.linspace(e.forecast_start, e.forecast_end, e.forecast_points))


def build_dataset(d: DataConfig, e: EvalConfig, substeps: int = 5) -> Dataset:
    """Training observations plus the matching noise-free scoring set."""
    if d.source == "csv":
        raise ContractViolation("CSV data carries no ground truth; pass a test CSV to evaluate instead")
    grid = make_grid(d.grid, d.n_points, d.t_start, d.t_end, rng=d.seed, substeps=substeps)
    A = embedding_matrix(d.embed_dim, d.embed_seed) if d.embed_dim else None
    truth, obs = simulate(d.system, d.x0, grid, d.seed, 0.0 if A is not None else d.noise_var)
    meta = dict(obs.metadata, seed=d.seed, noise_var=d.noise_var)
    if A is not None:
        clean = truth.states @ A
        noisy = clean + np.random.default_rng(d.seed).standard_normal(clean.shape) * np.sqrt(d.noise_var)
        obs = ObservationSet(grid, noisy, np.ones_like(noisy, dtype=bool), dict(meta, embed_dim=d.embed_dim,
                                                                             embed_seed=d.embed_seed))
    else:
        obs = ObservationSet(grid, obs.observations, obs.mask, meta)
    if d.mask == "fhn-quadrant":
        obs = mask_region(obs, fhn_quadrant, truth.states)

    emit = (lambda s: s @ A) if A is not None else (lambda s: s)
    if e.target == "masked":
        hidden = ~obs.mask.any(axis=1)
        if not hidden.any():
            raise ContractViolation("target 'masked' needs masked training rows")
        clean = emit(truth.states)
        test = ObservationSet(grid, clean, np.repeat(hidden[:, None], clean.shape[1], axis=1),
                              {"target": "masked"})
    else:
        sgrid = _scoring_grid(e)
        clean = emit(true_states(d.system, d.x0, d.t_start, sgrid.times))
        test = ObservationSet(sgrid, clean, np.ones_like(clean, dtype=bool), {"target": "forecast"})
    return Dataset(obs, test, A)


def fit(train_obs: ObservationSet, m: ModelConfig, t: TrainSection):
    """Returns (model, history)."""
    pca = None
    if m.pca_k:
        full_rows = train_obs.mask.all(axis=1)
        pca = pca_fit(train_obs.observations[full_rows], m.pca_k)
    model = init_model(
        train_obs, m.seed, num_inducing=m.num_inducing, prior_depth=m.prior_depth,
        posterior_depth=m.posterior_depth, n_basis=m.n_basis, substeps=m.substeps, pca=pca,
        shooting_segments=m.shooting_segments if m.shooting_segments > 1 else None,
    )
    cfg = TrainConfig(steps=t.steps, step_size=t.step_size, n_mc=t.n_mc, seed=t.seed)
    return train(model, train_obs, cfg)


def score(model: GPODE, test: ObservationSet, e: EvalConfig) -> MetricsReport:
    pred = predict(model, test.grid, e.n_mc_eval, e.seed)
    if pred.samples.shape[0] == 0:
        raise ContractViolation("every prediction sample diverged")
    return evaluate_ensemble(pred.samples, test.observations, np.asarray(model.params.noise_R), test.mask,
                             level=e.coverage_level, mode=e.coverage_mode, rng=e.seed,
                             n_divergent=pred.n_divergent)


def run_config(cfg: ExperimentConfig):
    """Returns (model, history, report) for one fully specified experiment."""
    ds = build_dataset(cfg.data, cfg.eval, cfg.model.substeps)
    model, history = fit(ds.train, cfg.model, cfg.train)
    return model, history, score(model, ds.test, cfg.eval)


# ---------------------------------------------------------------------------
# named desk-scale protocols


def protocol(name: str, seed: int = 0, prior_depth: int = 1, posterior_depth: int = 0,
             steps: int | None = None) -> ExperimentConfig:
    """Config for a named experiment with every seed set to ``seed``."""
    if name == "vdp":
        data = DataConfig(system="vdp", x0=(-1.5, 2.5), n_points=50, t_start=0.0, t_end=7.0,
                          noise_var=0.05, seed=seed)
        ev = EvalConfig(target="forecast", forecast_start=7.0, forecast_end=14.0, forecast_points=50, seed=seed)
        model = ModelConfig(num_inducing=16, prior_depth=prior_depth, posterior_depth=posterior_depth, seed=seed)
        default_steps = 1000
    elif name == "fhn":
        data = DataConfig(system="fhn", x0=(-1.0, 1.0), n_points=25, t_start=0.0, t_end=5.0,
                          noise_var=0.025, seed=seed, mask="fhn-quadrant")
        ev = EvalConfig(target="masked", seed=seed)
        model = ModelConfig(num_inducing=16, prior_depth=prior_depth, posterior_depth=posterior_depth, seed=seed)
        default_steps = 1000
    elif name == "latent-demo":
        data = DataConfig(system="vdp", x0=(-1.5, 2.5), n_points=50, t_start=0.0, t_end=7.0,
                          noise_var=0.05, seed=seed, embed_dim=10, embed_seed=seed)
        ev = EvalConfig(target="forecast", forecast_start=7.0, forecast_end=14.0, forecast_points=50, seed=seed)
        model = ModelConfig(num_inducing=16, prior_depth=prior_depth, posterior_depth=posterior_depth,
                            pca_k=3, seed=seed)
        default_steps = 1000
    else:
        raise ContractViolation(f"unknown experiment {name!r}; choose vdp, fhn or latent-demo")
    return ExperimentConfig(data, model, TrainSection(steps=steps or default_steps, seed=seed), ev)


# Depths of the flow model in each named experiment; the baseline is always (0, 0).
MODEL_DEPTHS = {"vdp": (1, 0), "fhn": (1, 0), "latent-demo": (1, 1)}


def _summary(reports):
    keys = ("mse", "mnll", "coverage")
    return {k: float(np.median([getattr(r, k) for r in reports])) for k in keys} | {
        "n_divergent": int(sum(r.n_divergent for r in reports))
    }


def reproduce(name: str, seeds=(0, 1, 2), steps: int | None = None, depths=None) -> dict:
    """Flow model and zero-depth baseline over ``seeds``; returns a JSON-ready report.

    Top-level ``mse``/``mnll``/``coverage`` are the flow model's medians over seeds.
    """
    kp, kq = depths or MODEL_DEPTHS[name]
    runs = []
    per = {"model": [], "baseline": []}
    for seed in seeds:
        for label, (a, b) in (("model", (kp, kq)), ("baseline", (0, 0))):
            cfg = protocol(name, seed, a, b, steps)
            _, history, rep = run_config(cfg)
            log.info("%s seed %d %s: mse %.4f mnll %.4f", name, seed, label, rep.mse, rep.mnll)
            per[label].append(rep)
            runs.append({"seed": seed, "variant": label, "prior_depth": a, "posterior_depth": b,
                         "final_elbo": history[-1].total if history else None, **rep.to_dict()})
    model, base = _summary(per["model"]), _summary(per["baseline"])
    return {
        "schema_version": 1,
        "experiment": name,
        "seeds": list(seeds),
        "steps": protocol(name, 0, steps=steps).train.steps,
        "mse": model["mse"],
        "mnll": model["mnll"],
        "coverage": model["coverage"],
        "model": model,
        "baseline": base,
        "runs": runs,
    }
