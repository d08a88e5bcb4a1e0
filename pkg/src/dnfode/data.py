"""Synthetic systems, observation noise, grids, masking, PCA and CSV ingestion."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
from pathlib import Path
from typing import Callable

import jax.numpy as jnp
import numpy as np

from .dynamics import TimeGrid, Trajectory, rk4_integrate
from .errors import ContractViolation, DataParseError, EmptyDataError

TRUTH_SUBSTEPS = 20


@dataclasses.dataclass
class ObservationSet:
    grid: TimeGrid
    observations: np.ndarray  # (N, d_obs), NaN where no value exists
    mask: np.ndarray  # (N, d_obs), True = observed
    metadata: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        y = np.asarray(self.observations, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        m = np.asarray(self.mask, dtype=bool)
        if y.shape != m.shape or y.shape[0] != len(self.grid):
            raise ContractViolation(
                f"observations {y.shape}, mask {m.shape} and grid length {len(self.grid)} disagree"
            )
        m = m & np.isfinite(y)
        if not m.any():
            raise EmptyDataError("observation set has no observed entries")
        self.observations = y
        self.mask = m

    @property
    def times(self):
        return self.grid.times

    @property
    def dim(self):
        return self.observations.shape[1]

    def __len__(self):
        return self.observations.shape[0]

    def subset(self, rows):
        rows = np.asarray(rows)
        return ObservationSet(
            TimeGrid(self.times[rows], self.grid.substeps_per_interval),
            self.observations[rows],
            self.mask[rows],
            dict(self.metadata),
        )


def vdp_field(x):
    """Van der Pol: x1' = x2, x2' = -x1 + 0.5 x2 (1 - x1^2)."""
    x = jnp.asarray(x, dtype=jnp.float64)
    if x.shape[-1] != 2:
        raise ContractViolation("the Van der Pol field is two-dimensional")
    x1, x2 = x[..., 0], x[..., 1]
    return jnp.stack([x2, -x1 + 0.5 * x2 * (1.0 - x1**2)], axis=-1)


def fhn_field(x):
    """FitzHugh-Nagumo: x1' = 3 (x1 - x1^3/3 + x2), x2' = (0.2 - 3 x1 - 0.2 x2) / 3."""
    x = jnp.asarray(x, dtype=jnp.float64)
    if x.shape[-1] != 2:
        raise ContractViolation("the FitzHugh-Nagumo field is two-dimensional")
    x1, x2 = x[..., 0], x[..., 1]
    return jnp.stack([3.0 * (x1 - x1**3 / 3.0 + x2), (0.2 - 3.0 * x1 - 0.2 * x2) / 3.0], axis=-1)


SYSTEMS: dict[str, Callable] = {"vdp": vdp_field, "fhn": fhn_field}


def _rng(rng):
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def simulate(system, x0, grid: TimeGrid, rng, noise_var: float, substeps: int = TRUTH_SUBSTEPS,
             name=None):
    """Integrate the true field finely and add i.i.d. Gaussian observation noise."""
    field = SYSTEMS[system] if isinstance(system, str) else system
    if noise_var < 0:
        raise ContractViolation("noise variance must be nonnegative")
    truth = rk4_integrate(field, jnp.asarray(x0, dtype=jnp.float64), grid.with_substeps(substeps))
    truth = Trajectory(grid, truth.states)
    gen = _rng(rng)
    noise = gen.standard_normal(truth.states.shape) * np.sqrt(noise_var)
    meta = {
        "system": name or (system if isinstance(system, str) else getattr(system, "__name__", "custom")),
        "noise_var": float(noise_var),
    }
    if isinstance(rng, (int, np.integer)):
        meta["seed"] = int(rng)
    obs = ObservationSet(grid, truth.states + noise, np.ones_like(truth.states, dtype=bool), meta)
    return truth, obs


def make_grid(kind: str, N: int, t_start: float, t_end: float, rng=None, substeps: int = 5) -> TimeGrid:
    if N < 2 or not t_end > t_start:
        raise ContractViolation("need N >= 2 and t_end > t_start")
    if kind == "regular":
        return TimeGrid(np.linspace(t_start, t_end, N), substeps)
    if kind in ("irregular", "irregular-uniform"):
        gen = _rng(rng)
        while True:
            inner = np.sort(gen.uniform(t_start, t_end, N - 2))
            t = np.concatenate([[t_start], inner, [t_end]])
            if np.all(np.diff(t) > 0):
                return TimeGrid(t, substeps)
    raise ContractViolation(f"unknown grid kind {kind!r}")


def mask_region(obs: ObservationSet, predicate: Callable, states=None) -> ObservationSet:
    """Hide whole rows whose state satisfies ``predicate``.

    The predicate is tested on ``states`` when given (e.g. the noise-free truth),
    otherwise on the observation rows. Unmasked values are never touched.
    """
    rows = np.asarray(obs.observations if states is None else states)
    hit = np.array([bool(predicate(r)) for r in rows], dtype=bool)
    mask = obs.mask & ~hit[:, None]
    if not mask.any():
        raise EmptyDataError("masking removed every observation")
    meta = dict(obs.metadata)
    meta["masked_rows"] = int(meta.get("masked_rows", 0)) + int(hit.sum())
    return ObservationSet(obs.grid, obs.observations.copy(), mask, meta)


def fhn_quadrant(row):
    return row[0] > 0 and row[1] < 0


@dataclasses.dataclass(frozen=True)
class PcaMap:
    mean: np.ndarray  # (d_obs,)
    components: np.ndarray  # (k, d_obs), orthonormal rows

    @property
    def k(self):
        return self.components.shape[0]


def pca_fit(data, k: int) -> PcaMap:
    X = np.asarray(data, dtype=np.float64)
    n, d = X.shape
    if k < 1 or k > min(n, d):
        raise ContractViolation(f"k must be in [1, {min(n, d)}], got {k}")
    mean = X.mean(axis=0)
    _, _, vt = np.linalg.svd(X - mean, full_matrices=False)
    comps = vt[:k]
    # Sign convention: largest-magnitude loading of each component is positive.
    signs = np.sign(comps[np.arange(k), np.argmax(np.abs(comps), axis=1)])
    return PcaMap(mean, comps * signs[:, None])


def pca_project(pmap: PcaMap, data):
    return (np.asarray(data, dtype=np.float64) - pmap.mean) @ pmap.components.T


def pca_invert(pmap: PcaMap, latent):
    return np.asarray(latent, dtype=np.float64) @ pmap.components + pmap.mean


def _fmt(v: float) -> str:
    return "" if not np.isfinite(v) else format(float(v), ".17g")


def save_csv(obs: ObservationSet, path):
    """Header ``t,y1..yd,m1..md``; metadata as leading ``# key=value`` lines."""
    d = obs.dim
    buf = io.StringIO()
    for key in sorted(obs.metadata):
        buf.write(f"# {key}={json.dumps(obs.metadata[key])}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"y{j + 1}" for j in range(d)] + [f"m{j + 1}" for j in range(d)])
    for t, y, m in zip(obs.times, obs.observations, obs.mask):
        w.writerow([_fmt(t)] + [_fmt(v) for v in y] + [str(int(b)) for b in m])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _parse_meta(value: str):
    try:
        return json.loads(value)
    except json.JSONDecodeError:
        return value


def load_csv(path, substeps: int = 5) -> ObservationSet:
    text = Path(path).read_text(encoding="utf-8")
    meta = {}
    header = None
    rows = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if "=" in body:
                k, v = body.split("=", 1)
                meta[k.strip()] = _parse_meta(v.strip())
            continue
        cells = next(csv.reader([line]))
        if header is None:
            header = [c.strip() for c in cells]
            header_line = lineno
            continue
        rows.append((lineno, cells))
    if header is None:
        raise DataParseError("missing header row")
    d = sum(1 for c in header if c.startswith("y"))
    expected = ["t"] + [f"y{j + 1}" for j in range(d)]
    has_mask = len(header) == 2 * d + 1
    if has_mask:
        expected += [f"m{j + 1}" for j in range(d)]
    if d < 1 or header != expected:
        raise DataParseError(f"malformed header {header!r}; expected t,y1..yd[,m1..md]", header_line)
    if not rows:
        raise DataParseError("no data rows")
    times, ys, ms = [], [], []
    for lineno, cells in rows:
        if len(cells) != len(header):
            raise DataParseError(f"expected {len(header)} cells, found {len(cells)}", lineno)
        try:
            t = float(cells[0])
            y = [float(c) if c.strip() else np.nan for c in cells[1 : d + 1]]
            m = [c.strip() not in ("0", "") for c in cells[d + 1 :]] if has_mask else [True] * d
        except ValueError as exc:
            raise DataParseError(f"non-numeric cell ({exc})", lineno) from None
        if times and not t > times[-1]:
            raise DataParseError(f"time {t!r} is not greater than the previous time", lineno)
        times.append(t)
        ys.append(y)
        ms.append(m)
    y = np.array(ys, dtype=np.float64)
    m = np.array(ms, dtype=bool) & np.isfinite(y)
    return ObservationSet(TimeGrid(np.array(times), substeps), y, m, meta)
