"""TOML experiment configuration.

Four tables: ``[data]``, ``[model]``, ``[train]``, ``[eval]``. Every key is
optional and defaults to the values below. Unknown tables or keys are
rejected, as are values of the wrong type. All times are in the model's own
time units (the same units as the ``t`` column of data CSVs); variances are
in squared observation units.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import tomli

from .errors import ConfigError


@dataclasses.dataclass(frozen=True)
class DataConfig:
    source: str = "simulate"  # "simulate" or "csv"
    path: str = ""  # CSV file when source = "csv"
    system: str = "vdp"  # "vdp" or "fhn"
    x0: tuple = (-1.5, 2.5)
    grid: str = "regular"  # "regular" or "irregular"
    n_points: int = 50
    t_start: float = 0.0
    t_end: float = 7.0
    noise_var: float = 0.05
    seed: int = 0
    mask: str = "none"  # "none" or "fhn-quadrant"
    embed_dim: int = 0  # > 0: observe a random linear embedding of the state
    embed_seed: int = 0


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    num_inducing: int = 16
    prior_depth: int = 0
    posterior_depth: int = 0
    pca_k: int = 0  # 0 disables the PCA latent space
    shooting_segments: int = 0  # 0 or 1 disables multiple shooting
    n_basis: int = 256
    substeps: int = 5
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class TrainSection:
    steps: int = 1000
    step_size: float = 1e-2
    n_mc: int = 5
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    target: str = "forecast"  # "forecast" or "masked"
    forecast_start: float = 7.0
    forecast_end: float = 14.0
    forecast_points: int = 50
    n_mc_eval: int = 50
    coverage_level: float = 0.95
    coverage_mode: str = "quantile"
    seed: int = 0


@dataclasses.dataclass(frozen=True)
class ExperimentConfig:
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainSection = TrainSection()
    eval: EvalConfig = EvalConfig()

    def to_dict(self):
        return {f.name: dataclasses.asdict(getattr(self, f.name)) for f in dataclasses.fields(self)}


_SECTIONS = {"data": DataConfig, "model": ModelConfig, "train": TrainSection, "eval": EvalConfig}


def _coerce(section, key, value, default):
    where = f"[{section}] {key}"
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
        value = tuple(float(v) for v in value) if ok else value
    else:  # pragma: no cover
        ok = False
    if not ok:
        raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")
    return value


def _check(cfg: ExperimentConfig, base: Path | None) -> ExperimentConfig:
    d, m, t, e = cfg.data, cfg.model, cfg.train, cfg.eval
    if d.source not in ("simulate", "csv"):
        raise ConfigError(f"[data] source must be 'simulate' or 'csv', got {d.source!r}")
    if d.source == "csv":
        if not d.path:
            raise ConfigError("[data] path is required when source = 'csv'")
        p = Path(d.path) if base is None or Path(d.path).is_absolute() else base / d.path
        if not p.is_file():
            raise ConfigError(f"[data] path {str(p)!r} does not exist")
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(d, path=str(p)))
    if d.system not in ("vdp", "fhn"):
        raise ConfigError(f"[data] unknown system {d.system!r}")
    if len(d.x0) != 2:
        raise ConfigError("[data] x0 must have two entries")
    if d.grid not in ("regular", "irregular"):
        raise ConfigError(f"[data] grid must be 'regular' or 'irregular', got {d.grid!r}")
    if d.mask not in ("none", "fhn-quadrant"):
        raise ConfigError(f"[data] unknown mask {d.mask!r}")
    if d.n_points < 2 or not d.t_end > d.t_start or d.noise_var < 0 or d.embed_dim < 0:
        raise ConfigError("[data] needs n_points >= 2, t_end > t_start, noise_var >= 0, embed_dim >= 0")
    if m.num_inducing < 1 or m.prior_depth < 0 or m.posterior_depth < 0:
        raise ConfigError("[model] needs num_inducing >= 1 and flow depths >= 0")
    if m.pca_k < 0 or m.shooting_segments < 0 or m.n_basis < 1 or m.substeps < 1:
        raise ConfigError("[model] pca_k, shooting_segments must be >= 0; n_basis, substeps >= 1")
    if t.steps < 0 or t.n_mc < 1 or not t.step_size > 0:
        raise ConfigError("[train] needs steps >= 0, n_mc >= 1, step_size > 0")
    if not 0.0 < e.coverage_level < 1.0:
        raise ConfigError("[eval] coverage_level must lie in (0, 1)")
    if e.coverage_mode not in ("quantile", "stddev"):
        raise ConfigError(f"[eval] coverage_mode must be 'quantile' or 'stddev', got {e.coverage_mode!r}")
    if e.target not in ("forecast", "masked"):
        raise ConfigError(f"[eval] target must be 'forecast' or 'masked', got {e.target!r}")
    if e.forecast_points < 1 or e.n_mc_eval < 1 or not e.forecast_end >= e.forecast_start:
        raise ConfigError("[eval] needs forecast_points >= 1, n_mc_eval >= 1, forecast_end >= forecast_start")
    return cfg


def config_from_dict(raw: dict, base: Path | None = None) -> ExperimentConfig:
    unknown = set(raw) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config table(s): {', '.join(sorted(unknown))}")
    sections = {}
    for name, cls in _SECTIONS.items():
        table = raw.get(name, {})
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
        fields = {f.name: f.default for f in dataclasses.fields(cls)}
        bad = set(table) - set(fields)
        if bad:
            raise ConfigError(f"[{name}] unknown key(s): {', '.join(sorted(bad))}")
        sections[name] = cls(**{k: _coerce(name, k, v, fields[k]) for k, v in table.items()})
    return _check(ExperimentConfig(**sections), base)


def load_config(path) -> ExperimentConfig:
    """Parse and validate a TOML file; relative data paths resolve against its directory."""
    p = Path(path)
    try:
        raw = tomli.loads(p.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {str(p)!r} not found") from None
    except (tomli.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config file {str(p)!r} is not valid TOML: {exc}") from None
    return config_from_dict(raw, p.parent)
