"""Datasets, synthetic generators, CSV ingestion, and standardization.

Data rows carry named input coordinates, outputs, a scenario tag, and an
optional realization id grouping repeated stochastic draws at the same input.
Synthetic generators stand in for expensive high-fidelity solvers; each one
documents its closed form and is deterministic under a fixed seed.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, CsvParseError, ShapeError

__all__ = [
    "Scenario",
    "Dataset",
    "Standardizer",
    "CsvSchema",
    "SliceSpec",
    "EnergyLikeConfig",
    "RegressionRateConfig",
    "PlantedSparseConfig",
    "CustomConfig",
    "generate_synthetic",
    "load_csv",
    "split_leave_out",
    "standardize",
]


class Scenario(enum.Enum):
    PRE_TRAINING = "pre_training"
    TRAINING = "training"
    PREDICTION = "prediction"


@dataclass
class Dataset:
    """Immutable-by-convention container of input/output rows.

    ``realization_id[i]`` groups rows that are distinct stochastic draws at
    the same input tuple; None means one realization per row.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    input_names: tuple[str, ...]
    output_names: tuple[str, ...]
    scenario: Scenario = Scenario.TRAINING
    realization_id: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        self.outputs = np.atleast_2d(np.asarray(self.outputs, dtype=float))
        if self.outputs.shape[0] != self.inputs.shape[0]:
            raise ShapeError(
                f"{self.inputs.shape[0]} input rows vs {self.outputs.shape[0]} output rows"
            )
        if self.inputs.shape[0] < 1:
            raise ValueError("dataset must contain at least one row")
        if not np.all(np.isfinite(self.inputs)) or not np.all(np.isfinite(self.outputs)):
            raise ValueError("dataset contains non-finite entries")
        self.input_names = tuple(self.input_names)
        self.output_names = tuple(self.output_names)
        if len(self.input_names) != self.inputs.shape[1]:
            raise ShapeError("input_names length does not match input columns")
        if len(self.output_names) != self.outputs.shape[1]:
            raise ShapeError("output_names length does not match output columns")
        if self.realization_id is not None:
            self.realization_id = np.asarray(self.realization_id, dtype=int)
            if self.realization_id.shape != (self.inputs.shape[0],):
                raise ShapeError("realization_id must have one entry per row")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @property
    def output_dim(self) -> int:
        return self.outputs.shape[1]

    def select(self, rows: np.ndarray) -> "Dataset":
        rid = self.realization_id[rows] if self.realization_id is not None else None
        return Dataset(
            inputs=self.inputs[rows],
            outputs=self.outputs[rows],
            input_names=self.input_names,
            output_names=self.output_names,
            scenario=self.scenario,
            realization_id=rid,
        )


@dataclass(frozen=True)
class Standardizer:
    """Per-coordinate affine maps to zero mean, unit variance, and back."""

    input_shift: np.ndarray
    input_scale: np.ndarray
    output_shift: np.ndarray
    output_scale: np.ndarray

    def transform_inputs(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=float) - self.input_shift) / self.input_scale

    def inverse_inputs(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) * self.input_scale + self.input_shift

    def transform_outputs(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.output_shift) / self.output_scale

    def inverse_outputs(self, y: np.ndarray) -> np.ndarray:
        return np.asarray(y, dtype=float) * self.output_scale + self.output_shift

    def inverse_output_variance(self, var: np.ndarray) -> np.ndarray:
        return np.asarray(var, dtype=float) * self.output_scale**2

    @classmethod
    def identity(cls, d_in: int, d_out: int) -> "Standardizer":
        return cls(np.zeros(d_in), np.ones(d_in), np.zeros(d_out), np.ones(d_out))


def standardize(dataset: Dataset) -> tuple[Dataset, Standardizer]:
    """Shift/scale every coordinate to zero mean and unit variance.

    Raises :class:`ConfigError` naming the first constant coordinate, since a
    zero-variance column cannot be scaled invertibly.
    """
    if dataset.n < 2:
        raise ValueError("standardization needs at least two rows")
    in_shift = dataset.inputs.mean(axis=0)
    in_scale = dataset.inputs.std(axis=0)
    out_shift = dataset.outputs.mean(axis=0)
    out_scale = dataset.outputs.std(axis=0)
    for name, s in zip(dataset.input_names, in_scale):
        if s == 0.0:
            raise ConfigError(f"input coordinate {name!r} is constant; cannot standardize")
    for name, s in zip(dataset.output_names, out_scale):
        if s == 0.0:
            raise ConfigError(f"output column {name!r} is constant; cannot standardize")
    std = Standardizer(in_shift, in_scale, out_shift, out_scale)
    return (
        Dataset(
            inputs=std.transform_inputs(dataset.inputs),
            outputs=std.transform_outputs(dataset.outputs),
            input_names=dataset.input_names,
            output_names=dataset.output_names,
            scenario=dataset.scenario,
            realization_id=dataset.realization_id,
        ),
        std,
    )


# ---------------------------------------------------------------------------
# Synthetic generators
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EnergyLikeConfig:
    """Grid of (size, modulus) inputs with power-law growth and mean-one
    lognormal realization noise: ``u = c * E * L**p * exp(s*z - s^2/2)``.

    The realization factor is drawn once per (L, realization) pair and shared
    across the modulus grid, mimicking a stochastic structure realization that
    produces a coherent response curve over E.
    """

    l_range: tuple[float, float] = (1.0, 2.5)
    e_range: tuple[float, float] = (1.0, 1.15)
    n_l: int = 12
    n_e: int = 8
    realizations: int = 3
    noise: float = 0.05
    c: float = 1.0
    p: float = 1.3
    scenario: Scenario = Scenario.TRAINING


@dataclass(frozen=True)
class RegressionRateConfig:
    """Latin-hypercube samples of a smooth saturating 2-input response:
    ``u = a * G**0.8 / (1 + G/g_sat) * (l_ref/l_v)**0.6`` with mean-one
    lognormal realization noise per (sample, realization).
    """

    g_range: tuple[float, float] = (5.0, 20.0)
    lv_range: tuple[float, float] = (6e5, 11e5)
    n_samples: int = 64
    realizations: int = 1
    noise: float = 0.02
    a: float = 1.0
    g_sat: float = 15.0
    l_ref: float = 8e5
    scenario: Scenario = Scenario.TRAINING


@dataclass(frozen=True)
class PlantedSparseConfig:
    """Linear truth over a known subset of many inputs, plus additive noise.

    ``u = sum_k coefs[k] * x[active[k]] + eps`` with inputs uniform on
    [-1, 1]^d; everything outside ``active_indices`` is pure distractor.
    """

    n_inputs: int = 20
    active_indices: tuple[int, ...] = (0, 1, 2)
    coefs: tuple[float, ...] = (1.5, -2.0, 1.0)
    n_samples: int = 120
    noise: float = 0.05
    scenario: Scenario = Scenario.TRAINING


@dataclass(frozen=True)
class CustomConfig:
    """Arbitrary response sampled on a box; the callable maps (N, d) -> (N,)."""

    fn: Callable[[np.ndarray], np.ndarray]
    ranges: tuple[tuple[float, float], ...]
    input_names: tuple[str, ...]
    n_samples: int = 100
    realizations: int = 1
    noise: float = 0.0
    output_name: str = "u"
    scenario: Scenario = Scenario.TRAINING


def generate_synthetic(task: str, config, seed: int) -> Dataset:
    """Draw a synthetic dataset; bit-identical for identical (task, config, seed)."""
    rng = np.random.default_rng(seed)
    if task == "energy_like":
        return _generate_energy_like(config, rng)
    if task == "regression_rate_like":
        return _generate_regression_rate(config, rng)
    if task == "planted_sparse":
        return _generate_planted_sparse(config, rng)
    if task == "custom":
        return _generate_custom(config, rng)
    raise ConfigError(f"unknown synthetic task {task!r}")


def _check_range(name: str, rng_pair: tuple[float, float]) -> None:
    lo, hi = rng_pair
    if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
        raise ConfigError(f"empty or invalid range for {name}: {rng_pair}")


def _generate_energy_like(cfg: EnergyLikeConfig, rng: np.random.Generator) -> Dataset:
    _check_range("L", cfg.l_range)
    _check_range("E", cfg.e_range)
    if cfg.n_l < 1 or cfg.n_e < 1 or cfg.realizations < 1:
        raise ConfigError("sample counts must be positive")
    l_grid = np.linspace(*cfg.l_range, cfg.n_l)
    e_grid = np.linspace(*cfg.e_range, cfg.n_e)
    # one realization factor per (L, realization), shared across the E sweep
    z = rng.standard_normal((cfg.n_l, cfg.realizations))
    factor = np.exp(cfg.noise * z - 0.5 * cfg.noise**2) if cfg.noise > 0 else np.ones_like(z)
    rows_x, rows_y, rows_r = [], [], []
    for i, l_val in enumerate(l_grid):
        for r in range(cfg.realizations):
            for e_val in e_grid:
                rows_x.append((l_val, e_val))
                rows_y.append(cfg.c * e_val * l_val**cfg.p * factor[i, r])
                rows_r.append(r)
    return Dataset(
        inputs=np.array(rows_x),
        outputs=np.array(rows_y)[:, None],
        input_names=("L", "E"),
        output_names=("u",),
        scenario=cfg.scenario,
        realization_id=np.array(rows_r),
    )


def _generate_regression_rate(cfg: RegressionRateConfig, rng: np.random.Generator) -> Dataset:
    from scipy.stats import qmc

    _check_range("G", cfg.g_range)
    _check_range("l_v", cfg.lv_range)
    if cfg.n_samples < 1 or cfg.realizations < 1:
        raise ConfigError("sample counts must be positive")
    sampler = qmc.LatinHypercube(d=2, seed=rng)
    unit = sampler.random(cfg.n_samples)
    lows = np.array([cfg.g_range[0], cfg.lv_range[0]])
    highs = np.array([cfg.g_range[1], cfg.lv_range[1]])
    pts = qmc.scale(unit, lows, highs)
    g, lv = pts[:, 0], pts[:, 1]
    base = cfg.a * g**0.8 / (1.0 + g / cfg.g_sat) * (cfg.l_ref / lv) ** 0.6
    rows_x, rows_y, rows_r = [], [], []
    for r in range(cfg.realizations):
        z = rng.standard_normal(cfg.n_samples)
        factor = np.exp(cfg.noise * z - 0.5 * cfg.noise**2) if cfg.noise > 0 else np.ones_like(z)
        rows_x.append(pts)
        rows_y.append(base * factor)
        rows_r.append(np.full(cfg.n_samples, r))
    return Dataset(
        inputs=np.concatenate(rows_x),
        outputs=np.concatenate(rows_y)[:, None],
        input_names=("G", "l_v"),
        output_names=("r_dot",),
        scenario=cfg.scenario,
        realization_id=np.concatenate(rows_r),
    )


def _generate_planted_sparse(cfg: PlantedSparseConfig, rng: np.random.Generator) -> Dataset:
    if len(cfg.active_indices) != len(cfg.coefs):
        raise ConfigError("active_indices and coefs must have the same length")
    if any(not (0 <= k < cfg.n_inputs) for k in cfg.active_indices):
        raise ConfigError("active index out of range")
    x = rng.uniform(-1.0, 1.0, size=(cfg.n_samples, cfg.n_inputs))
    y = x[:, list(cfg.active_indices)] @ np.asarray(cfg.coefs)
    if cfg.noise > 0:
        y = y + rng.normal(0.0, cfg.noise, size=cfg.n_samples)
    return Dataset(
        inputs=x,
        outputs=y[:, None],
        input_names=tuple(f"x{k}" for k in range(cfg.n_inputs)),
        output_names=("u",),
        scenario=cfg.scenario,
    )


def _generate_custom(cfg: CustomConfig, rng: np.random.Generator) -> Dataset:
    for nm, pair in zip(cfg.input_names, cfg.ranges):
        _check_range(nm, pair)
    d = len(cfg.ranges)
    x = rng.uniform(size=(cfg.n_samples, d))
    lows = np.array([r[0] for r in cfg.ranges])
    highs = np.array([r[1] for r in cfg.ranges])
    x = lows + x * (highs - lows)
    rows_x, rows_y, rows_r = [], [], []
    base = np.asarray(cfg.fn(x), dtype=float).reshape(-1)
    for r in range(cfg.realizations):
        noise = rng.normal(0.0, cfg.noise, size=cfg.n_samples) if cfg.noise > 0 else 0.0
        rows_x.append(x)
        rows_y.append(base + noise)
        rows_r.append(np.full(cfg.n_samples, r))
    return Dataset(
        inputs=np.concatenate(rows_x),
        outputs=np.concatenate(rows_y)[:, None],
        input_names=tuple(cfg.input_names),
        output_names=(cfg.output_name,),
        scenario=cfg.scenario,
        realization_id=np.concatenate(rows_r),
    )


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Named columns of a dataset CSV; loadable from a JSON mapping."""

    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    scenario: Scenario = Scenario.TRAINING
    realization_column: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "CsvSchema":
        try:
            inputs = tuple(d["inputs"])
            outputs = tuple(d["outputs"])
        except KeyError as exc:
            raise ConfigError(f"schema is missing key {exc}") from exc
        scenario = Scenario(d.get("scenario", "training"))
        return cls(
            inputs=inputs,
            outputs=outputs,
            scenario=scenario,
            realization_column=d.get("realization_column"),
        )


def load_csv(path, schema: CsvSchema) -> Dataset:
    """Parse a UTF-8 CSV with a header row into a Dataset.

    Errors name the offending row (1-based, header excluded) and column.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvParseError(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        col_index: dict[str, int] = {}
        wanted = list(schema.inputs) + list(schema.outputs)
        if schema.realization_column:
            wanted.append(schema.realization_column)
        for name in wanted:
            if name not in header:
                raise CsvParseError(f"{path}: missing column {name!r}", column=name)
            col_index[name] = header.index(name)

        xs, ys, rids = [], [], []
        for rownum, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                xs.append([float(row[col_index[n]]) for n in schema.inputs])
                ys.append([float(row[col_index[n]]) for n in schema.outputs])
                if schema.realization_column:
                    rids.append(int(float(row[col_index[schema.realization_column]])))
            except (ValueError, IndexError) as exc:
                raise CsvParseError(
                    f"{path}: malformed numeric value at row {rownum}", row=rownum
                ) from exc
    if not xs:
        raise CsvParseError(f"{path}: no data rows")
    return Dataset(
        inputs=np.array(xs),
        outputs=np.array(ys),
        input_names=schema.inputs,
        output_names=schema.outputs,
        scenario=schema.scenario,
        realization_id=np.array(rids) if rids else None,
    )


# ---------------------------------------------------------------------------
# Leave-out splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SliceSpec:
    """One held-out slice: rows whose coordinate hits given values (within a
    tolerance), falls in an interval, or match explicit row indices.

    Exactly one of ``values``, ``interval``, ``indices`` must be provided.
    """

    coordinate: int | None = None
    values: tuple[float, ...] | None = None
    interval: tuple[float, float] | None = None
    indices: tuple[int, ...] | None = None
    tol: float = 1e-9

    def __post_init__(self):
        provided = sum(v is not None for v in (self.values, self.interval, self.indices))
        if provided != 1:
            raise ConfigError("slice must set exactly one of values, interval, indices")
        if self.indices is None and self.coordinate is None:
            raise ConfigError("coordinate-based slice needs a coordinate index")

    def row_mask(self, dataset: Dataset) -> np.ndarray:
        if self.indices is not None:
            mask = np.zeros(dataset.n, dtype=bool)
            mask[list(self.indices)] = True
            return _expand_to_realization_groups(dataset, mask)
        col = dataset.inputs[:, self.coordinate]
        if self.values is not None:
            mask = np.zeros(dataset.n, dtype=bool)
            for v in self.values:
                mask |= np.abs(col - v) <= self.tol
            return mask
        lo, hi = self.interval
        return (col >= lo) & (col <= hi)


def _expand_to_realization_groups(dataset: Dataset, mask: np.ndarray) -> np.ndarray:
    """Grow an index selection so realization groups never straddle the split."""
    if not mask.any():
        return mask
    selected_inputs = dataset.inputs[mask]
    out = mask.copy()
    for row in selected_inputs:
        out |= np.all(dataset.inputs == row, axis=1)
    return out


def split_leave_out(dataset: Dataset, spec: Sequence[SliceSpec]) -> list[tuple[Dataset, Dataset]]:
    """Build (training remainder, held-out slice) pairs, one per slice.

    Slices must be pairwise disjoint; every pair partitions the dataset, and
    all realizations of a held-out input move to the held-out side together.
    """
    if not spec:
        raise ConfigError("no leave-out slices given")
    masks = [s.row_mask(dataset) for s in spec]
    for i, m in enumerate(masks):
        if not m.any():
            raise ConfigError(f"leave-out slice {i} selects no rows")
        if m.all():
            raise ConfigError(f"leave-out slice {i} leaves no training rows")
    for i in range(len(masks)):
        for j in range(i + 1, len(masks)):
            if np.any(masks[i] & masks[j]):
                raise ConfigError(f"leave-out slices {i} and {j} overlap")
    return [
        (dataset.select(np.flatnonzero(~m)), dataset.select(np.flatnonzero(m))) for m in masks
    ]
