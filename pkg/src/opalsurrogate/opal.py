"""Occam-style surrogate discovery loop and its validation machinery.

Candidate networks are organized into complexity-ordered categories.  Within
a category, layers are added greedily with the activation of each new layer
chosen by model evidence, the best fully connected candidate is sparsified,
and the resulting plausible model faces a leave-out validation test on
integral observables of the response.  The first category whose plausible
model passes both distance metrics wins; if none does, the outcome reports
that the initial model set must be enlarged.
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.interpolate import LinearNDInterpolator
from scipy.stats import gaussian_kde, wasserstein_distance

from .data import Dataset, SliceSpec, Standardizer, split_leave_out, standardize
from .errors import (
    ConfigError,
    CoverageError,
    DegenerateEvidenceError,
    MetricUndefinedError,
)
from .evidence import (
    EvidenceRecord,
    HierarchicalConfig,
    ModelRecord,
    fit_hierarchical,
    plausibilities,
)
from .laplace import (
    InferenceHyperParams,
    LaplacePosterior,
    OptConfig,
    sample_parameters,
)
from .network import (
    Activation,
    ActivationKind,
    Architecture,
    Parameters,
    SparsityMask,
    forward_trace,
)
from .sparsify import SparsifyConfig, SweepResult, sweep_threshold

__all__ = [
    "GridConfig",
    "metric_dkl",
    "metric_cdf",
    "IntegrationAxis",
    "ObservableSpec",
    "observable",
    "dataset_observable_samples",
    "posterior_observable_samples",
    "OccamCategory",
    "ProbeConfig",
    "ProbeResult",
    "build_initial_set",
    "partition_categories",
    "select_activation",
    "discover_category_model",
    "ValidationConfig",
    "ValidationReport",
    "SliceResult",
    "leave_out_validate",
    "OpalConfig",
    "OpalResult",
    "run_opal",
    "fit_model",
    "stable_seed",
]


def stable_seed(root: int, *parts) -> int:
    """Deterministic sub-seed from a root seed and a label path."""
    digest = hashlib.sha256(repr((root, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _pmap(fn: Callable, items: Sequence, workers: int) -> list:
    """Order-preserving map, optionally on a thread pool."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


# ---------------------------------------------------------------------------
# Distribution distance metrics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GridConfig:
    """Shared evaluation grid for density comparison: uniform over the pooled
    sample range padded by ``pad_sigmas`` pooled standard deviations."""

    n_grid: int = 512
    pad_sigmas: float = 3.0


def _kde_masses(samples_a, samples_b, grid: GridConfig) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(samples_a, dtype=float).reshape(-1)
    b = np.asarray(samples_b, dtype=float).reshape(-1)
    pooled = np.concatenate([a, b])
    spread = float(np.std(pooled))
    lo = float(pooled.min()) - grid.pad_sigmas * spread
    hi = float(pooled.max()) + grid.pad_sigmas * spread
    if not (hi > lo):
        raise MetricUndefinedError("pooled samples are a single point; densities degenerate")
    xs = np.linspace(lo, hi, grid.n_grid)
    try:
        p = gaussian_kde(a)(xs)  # Scott bandwidth
        q = gaussian_kde(b)(xs)
    except np.linalg.LinAlgError as exc:
        raise MetricUndefinedError("degenerate sample set for density estimation") from exc
    p = p / p.sum()
    q = np.maximum(q / q.sum(), 1e-300)
    return p, q


def metric_dkl(
    samples_data,
    samples_model,
    grid: GridConfig | None = None,
    normalize: bool = True,
) -> float:
    """Relative-entropy discrepancy of two sample sets, normalized by the
    entropy of the data distribution.

    Both densities are kernel estimates evaluated on one shared grid; the
    divergence and the entropy are computed from the discrete grid masses, in
    nats.  Raises :class:`MetricUndefinedError` when the data distribution
    carries no entropy.
    """
    a = np.asarray(samples_data, dtype=float).reshape(-1)
    b = np.asarray(samples_model, dtype=float).reshape(-1)
    if a.size < 30 or b.size < 30:
        raise ValueError(f"need at least 30 samples per side, got {a.size} and {b.size}")
    p, q = _kde_masses(a, b, grid or GridConfig())
    nz = p > 0
    kl = float(np.sum(p[nz] * (np.log(p[nz]) - np.log(q[nz]))))
    if not normalize:
        return kl
    entropy = -float(np.sum(p[nz] * np.log(p[nz])))
    if entropy <= 0:
        raise MetricUndefinedError("data distribution has zero entropy on the grid")
    return kl / entropy


def metric_cdf(samples_a, samples_b) -> float:
    """Integrated absolute difference of the two empirical CDFs.

    Equals the 1-Wasserstein distance between the empirical distributions and
    carries the units of the observable.
    """
    a = np.asarray(samples_a, dtype=float).reshape(-1)
    b = np.asarray(samples_b, dtype=float).reshape(-1)
    if a.size < 2 or b.size < 2:
        raise ValueError("need at least 2 samples per side")
    return float(wasserstein_distance(a, b))


# ---------------------------------------------------------------------------
# Integral observables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IntegrationAxis:
    """One trapezoid-quadrature axis of an observable."""

    coordinate: int
    bounds: tuple[float, float]
    n_nodes: int

    def __post_init__(self):
        lo, hi = self.bounds
        if not (math.isfinite(lo) and math.isfinite(hi) and lo < hi):
            raise ConfigError(f"integration bounds must be finite with low < high, got {self.bounds}")
        if self.n_nodes < 2:
            raise ConfigError(f"need at least 2 quadrature nodes, got {self.n_nodes}")

    def nodes(self) -> np.ndarray:
        return np.linspace(self.bounds[0], self.bounds[1], self.n_nodes)


@dataclass(frozen=True)
class ObservableSpec:
    """An integral of the response over one or more input coordinates, with
    the remaining coordinates pinned to fixed values."""

    integrate_over: tuple[IntegrationAxis, ...]
    fixed_at: tuple[tuple[int, float], ...] = ()

    def __post_init__(self):
        coords = [ax.coordinate for ax in self.integrate_over] + [c for c, _ in self.fixed_at]
        if len(set(coords)) != len(coords):
            raise ConfigError("observable coordinates overlap")
        if not self.integrate_over:
            raise ConfigError("observable needs at least one integration axis")

    def input_dim(self) -> int:
        return len(self.integrate_over) + len(self.fixed_at)

    def grid_points(self) -> np.ndarray:
        """Quadrature points as rows, coordinates placed at their indices."""
        shapes = [ax.n_nodes for ax in self.integrate_over]
        mesh = np.meshgrid(*[ax.nodes() for ax in self.integrate_over], indexing="ij")
        m = int(np.prod(shapes))
        pts = np.empty((m, self.input_dim()))
        for ax, grid in zip(self.integrate_over, mesh):
            pts[:, ax.coordinate] = grid.reshape(-1)
        for coord, value in self.fixed_at:
            pts[:, coord] = value
        return pts

    def integrate(self, values: np.ndarray) -> np.ndarray:
        """Iterated trapezoid over the grid axes; ``values`` is (..., M)."""
        shapes = tuple(ax.n_nodes for ax in self.integrate_over)
        v = np.asarray(values, dtype=float)
        lead = v.shape[:-1]
        v = v.reshape(lead + shapes)
        for ax in reversed(self.integrate_over):
            v = np.trapezoid(v, x=ax.nodes(), axis=-1)
        return v

    def volume(self) -> float:
        out = 1.0
        for ax in self.integrate_over:
            out *= ax.bounds[1] - ax.bounds[0]
        return out


def observable(evaluate: Callable[[np.ndarray], np.ndarray], spec: ObservableSpec) -> np.ndarray:
    """Observable samples from an evaluator mapping grid rows (M, d) to values.

    The evaluator may return one value row ``(M,)`` or a stack ``(S, M)`` of
    realizations/posterior draws; one integral per row comes back.
    """
    pts = spec.grid_points()
    values = np.asarray(evaluate(pts), dtype=float)
    if values.ndim == 1:
        values = values[None, :]
    if values.shape[-1] != pts.shape[0]:
        raise ValueError(f"evaluator returned {values.shape[-1]} values for {pts.shape[0]} nodes")
    return spec.integrate(values)


def dataset_observable_samples(
    dataset: Dataset,
    spec: ObservableSpec,
    output: int = 0,
    sigma_noise: float | None = None,
    min_samples: int = 30,
    n_widen: int = 200,
    seed: int = 0,
) -> np.ndarray:
    """Observable distribution carried by the data at the pinned coordinates.

    Each realization group interpolates to the quadrature grid and integrates
    to one sample.  When fewer than ``min_samples`` realizations exist and a
    noise scale is available, the set is widened by resampling realizations
    and adding a coherent offset of that scale over the integration volume.
    """
    rows = np.ones(dataset.n, dtype=bool)
    for coord, value in spec.fixed_at:
        col = dataset.inputs[:, coord]
        tol = 1e-9 * max(1.0, float(np.max(np.abs(col))))
        rows &= np.abs(col - value) <= tol
    if not rows.any():
        fixed = {dataset.input_names[c]: v for c, v in spec.fixed_at}
        raise CoverageError(f"no data rows at the pinned coordinates {fixed}")
    sub_idx = np.flatnonzero(rows)
    rid = (
        dataset.realization_id[sub_idx]
        if dataset.realization_id is not None
        else np.zeros(sub_idx.size, dtype=int)
    )
    pts = spec.grid_points()
    zs = []
    for r in np.unique(rid):
        r_idx = sub_idx[rid == r]
        coords = dataset.inputs[np.ix_(r_idx, [ax.coordinate for ax in spec.integrate_over])]
        y = dataset.outputs[r_idx, output]
        values = _interpolate_to_grid(coords, y, pts[:, [ax.coordinate for ax in spec.integrate_over]])
        zs.append(float(spec.integrate(values[None, :])[0]))
    z = np.array(zs)
    if z.size < min_samples and sigma_noise is not None and sigma_noise > 0:
        rng = np.random.default_rng(seed)
        picks = rng.integers(0, z.size, size=n_widen)
        z = z[picks] + sigma_noise * spec.volume() * rng.standard_normal(n_widen)
    return z


def _interpolate_to_grid(coords: np.ndarray, y: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Linear interpolation of scattered (coords, y) onto grid rows."""
    if coords.shape[1] == 1:
        xs = coords[:, 0]
        order = np.argsort(xs)
        xs, ys = xs[order], y[order]
        xq = grid[:, 0]
        if xq.min() < xs.min() - 1e-12 or xq.max() > xs.max() + 1e-12:
            raise CoverageError(
                f"integration range [{xq.min():.6g}, {xq.max():.6g}] exceeds data "
                f"coverage [{xs.min():.6g}, {xs.max():.6g}]"
            )
        return np.interp(xq, xs, ys)
    interp = LinearNDInterpolator(coords, y)
    values = interp(grid)
    if np.any(np.isnan(values)):
        raise CoverageError("integration grid leaves the convex hull of the data")
    return values


def posterior_observable_samples(
    posterior: LaplacePosterior,
    spec: ObservableSpec,
    n_samples: int,
    seed: int = 0,
    standardizer: Standardizer | None = None,
    output: int = 0,
    noise_scale: float | None = None,
) -> np.ndarray:
    """Observable distribution induced by the weight posterior.

    The quadrature grid lives in physical units; inputs are standardized for
    the network and outputs mapped back.  ``noise_scale`` adds a coherent
    physical-units noise offset per draw, mirroring the data-side widening.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    pts = spec.grid_points()
    net_in = standardizer.transform_inputs(pts) if standardizer is not None else pts
    thetas = sample_parameters(posterior, n_samples, seed=seed)
    outs = np.stack(
        [forward_trace(posterior.arch, th, net_in).output[:, output] for th in thetas]
    )
    if standardizer is not None:
        outs = outs * standardizer.output_scale[output] + standardizer.output_shift[output]
    z = spec.integrate(outs)
    if noise_scale is not None and noise_scale > 0:
        rng = np.random.default_rng(stable_seed(seed, "observable-noise"))
        z = z + noise_scale * spec.volume() * rng.standard_normal(z.shape)
    return z


# ---------------------------------------------------------------------------
# Model set construction
# ---------------------------------------------------------------------------

DEFAULT_ACTIVATIONS = (
    Activation(ActivationKind.TANH),
    Activation(ActivationKind.RELU),
    Activation(ActivationKind.LEAKY_RELU),
    Activation(ActivationKind.SIGMOID),
)


@dataclass(frozen=True)
class OccamCategory:
    """One complexity cell of the model set: a band of depths at a common
    width cap and a shared activation menu."""

    index: int
    depths: tuple[int, ...]
    width_cap: int
    allowed_activations: tuple[Activation, ...] = DEFAULT_ACTIVATIONS


def partition_categories(
    width_cap: int,
    depth_per_category: int,
    n_categories: int,
    allowed_activations: tuple[Activation, ...] = DEFAULT_ACTIVATIONS,
) -> list[OccamCategory]:
    """Category l covers depths {(l-1)k+1, ..., lk} at the common width cap."""
    if depth_per_category < 1:
        raise ConfigError("depth_per_category must be >= 1")
    if n_categories < 1:
        raise ConfigError("need at least one category")
    cats = []
    for l in range(1, n_categories + 1):
        depths = tuple(range((l - 1) * depth_per_category + 1, l * depth_per_category + 1))
        cats.append(
            OccamCategory(
                index=l,
                depths=depths,
                width_cap=width_cap,
                allowed_activations=allowed_activations,
            )
        )
    return cats


def select_activation(candidate_evidences: Mapping[Activation, float]) -> Activation:
    """Highest-evidence activation; ties break toward the earlier enum member."""
    if not candidate_evidences:
        raise ValueError("empty candidate map")
    order = {kind: i for i, kind in enumerate(ActivationKind)}
    best_act, best_val = None, -math.inf
    for act in sorted(candidate_evidences, key=lambda a: order[a.kind]):
        val = float(candidate_evidences[act])
        if not math.isfinite(val):
            raise ValueError(f"non-finite evidence for {act.kind.value}")
        if val > best_val:
            best_act, best_val = act, val
    assert best_act is not None
    return best_act


@dataclass(frozen=True)
class ProbeConfig:
    """Single-hidden-layer evidence probe used to cap the width range."""

    widths: tuple[int, ...]
    activations: tuple[Activation, ...] = DEFAULT_ACTIVATIONS
    cap_factor: float = 1.10


@dataclass
class ProbeResult:
    width_cap: int
    peak_width: int
    grid: list[dict]
    interior_peak: bool
    warning: str | None = None


@dataclass(frozen=True)
class FitSettings:
    """Everything a single hierarchical fit needs besides the data."""

    init_sigma_pr: float = 1.0
    init_sigma_noise: float = 0.5
    hier: HierarchicalConfig = field(default_factory=HierarchicalConfig)
    opt: OptConfig = field(default_factory=OptConfig)


def fit_model(
    arch: Architecture,
    data_std: Dataset,
    settings: FitSettings,
    mask: SparsityMask | None = None,
    prior_mean: Parameters | None = None,
    seed: int = 0,
    label: str = "",
    pretrain_std: Dataset | None = None,
) -> ModelRecord:
    """Hierarchical fit of one candidate on standardized data.

    With pre-training data, the candidate is first fitted there and its MAP
    point becomes the prior mean for the main fit (two-stage prior protocol).
    """
    opt = replace(settings.opt, seed=seed)
    sigma0 = InferenceHyperParams.isotropic(arch, settings.init_sigma_pr, settings.init_sigma_noise)
    if pretrain_std is not None:
        pre_post, _ = fit_hierarchical(
            arch, pretrain_std, sigma0, mask=mask, config=settings.hier, opt=opt
        )
        prior_mean = pre_post.theta_map
        sigma0 = pre_post.sigma
    post, record = fit_hierarchical(
        arch, data_std, sigma0, mask=mask, config=settings.hier, opt=opt, prior_mean=prior_mean
    )
    return ModelRecord(
        arch=arch,
        mask=post.mask,
        posterior=post,
        evidence=record,
        label=label or arch.describe(),
    )


def build_initial_set(
    data_std: Dataset,
    probe: ProbeConfig,
    settings: FitSettings,
    seed: int = 0,
    workers: int = 1,
    pretrain_std: Dataset | None = None,
) -> ProbeResult:
    """Probe single-hidden-layer models over widths and activations; cap the
    width range slightly above the width of peak mean log evidence."""
    widths = tuple(int(w) for w in probe.widths)
    if len(widths) < 3:
        raise ConfigError(f"need at least 3 probe widths, got {len(widths)}")
    if sorted(widths) != list(widths):
        raise ConfigError("probe widths must be ascending")

    jobs = [(w, act) for w in widths for act in probe.activations]

    def run(job):
        w, act = job
        arch = Architecture(data_std.input_dim, data_std.output_dim, (w,), (act,))
        rec = fit_model(
            arch,
            data_std,
            settings,
            seed=stable_seed(seed, "probe", w, act.kind.value),
            label=f"probe W={w} {act.kind.value}",
            pretrain_std=pretrain_std,
        )
        return {"width": w, "activation": act.kind.value, "log_evid_model": rec.evidence.log_evid_model}

    grid = _pmap(run, jobs, workers)
    mean_by_width = {
        w: float(np.mean([g["log_evid_model"] for g in grid if g["width"] == w])) for w in widths
    }
    peak = max(widths, key=lambda w: mean_by_width[w])
    interior = peak != widths[-1]
    if interior:
        cap = int(round(probe.cap_factor * peak))
        warning = None
    else:
        cap = widths[-1]
        warning = (
            "probe evidence is still increasing at the largest width; capping at the "
            "largest probe width"
        )
    return ProbeResult(width_cap=cap, peak_width=peak, grid=grid, interior_peak=interior, warning=warning)


# ---------------------------------------------------------------------------
# Category-wise discovery
# ---------------------------------------------------------------------------


@dataclass
class CategoryDiscovery:
    """Outcome of the within-category search, including its audit details."""

    record: ModelRecord
    activation_prefix: tuple[Activation, ...]
    candidates: list[dict]
    sweep: SweepResult
    selected_depth: int


def discover_category_model(
    category: OccamCategory,
    data_std: Dataset,
    settings: FitSettings,
    activation_prefix: tuple[Activation, ...] = (),
    pretrain_std: Dataset | None = None,
    sparsify_config: SparsifyConfig | None = None,
    seed: int = 0,
    workers: int = 1,
) -> CategoryDiscovery:
    """Find the plausible model of one category.

    Layers are appended one at a time up to each depth in the category, the
    new layer's activation chosen by model evidence with earlier selections
    frozen; the best fully connected candidate across the category's depths
    is then sparsified by an evidence-guided threshold sweep.
    """
    if not category.depths:
        raise ConfigError(f"category {category.index} has no depths")
    prefix = list(activation_prefix)
    candidates: list[dict] = []
    per_depth: dict[int, ModelRecord] = {}

    for depth in sorted(category.depths):
        while len(prefix) < depth:
            new_layer = len(prefix) + 1

            def run(act: Activation) -> ModelRecord:
                arch = Architecture(
                    data_std.input_dim,
                    data_std.output_dim,
                    (category.width_cap,) * new_layer,
                    (*prefix, act),
                )
                return fit_model(
                    arch,
                    data_std,
                    settings,
                    seed=stable_seed(seed, "cat", category.index, new_layer, act.kind.value),
                    label=f"D={new_layer} W={category.width_cap} +{act.kind.value}",
                    pretrain_std=pretrain_std,
                )

            recs = _pmap(run, list(category.allowed_activations), workers)
            by_act = dict(zip(category.allowed_activations, recs))
            chosen = select_activation(
                {act: r.evidence.log_evid_model for act, r in by_act.items()}
            )
            for act, r in by_act.items():
                candidates.append(
                    {
                        "depth": new_layer,
                        "width": category.width_cap,
                        "new_layer_activation": act.kind.value,
                        "activations": [a.kind.value for a in (*prefix, act)],
                        "log_evid_sigma": r.evidence.log_evid_sigma,
                        "log_evid_model": r.evidence.log_evid_model,
                        "selected": act == chosen,
                        "in_category": new_layer in category.depths,
                    }
                )
            prefix.append(chosen)
            if new_layer in category.depths:
                per_depth[new_layer] = by_act[chosen]
        if depth not in per_depth:
            # the activation prefix already covers this depth (e.g. a re-run
            # of an earlier category); fit the frozen-activation candidate
            arch = Architecture(
                data_std.input_dim,
                data_std.output_dim,
                (category.width_cap,) * depth,
                tuple(prefix[:depth]),
            )
            per_depth[depth] = fit_model(
                arch,
                data_std,
                settings,
                seed=stable_seed(seed, "cat", category.index, depth, "frozen"),
                label=f"D={depth} W={category.width_cap} (frozen activations)",
                pretrain_std=pretrain_std,
            )

    best_depth = max(per_depth, key=lambda d: per_depth[d].evidence.log_evid_model)
    best = per_depth[best_depth]
    sweep = sweep_threshold(
        best.arch,
        data_std,
        best.evidence.sigma_map,
        config=sparsify_config,
        hier=settings.hier,
        opt=replace(settings.opt, seed=stable_seed(seed, "sweep", category.index)),
        init=best.posterior.theta_map,
        prior_mean=best.posterior.prior_mean,
    )
    record = ModelRecord(
        arch=best.arch,
        mask=sweep.mask,
        posterior=sweep.posterior,
        evidence=sweep.evidence,
        label=f"category {category.index} plausible model (D={best_depth})",
    )
    return CategoryDiscovery(
        record=record,
        activation_prefix=tuple(prefix),
        candidates=candidates,
        sweep=sweep,
        selected_depth=best_depth,
    )


# ---------------------------------------------------------------------------
# Leave-out validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ValidationConfig:
    """Leave-out test settings.

    ``observable_axes`` are the coordinates integrated for every slice; a
    value-type slice pins its coordinate, an interval-type slice integrates
    over the interval with ``holdout_nodes`` points.  The verdict requires
    both metrics to pass each slice (``mode="both"``; ``"either"`` relaxes).
    """

    tol_dkl: float
    tol_cdf: float
    leave_out: tuple[SliceSpec, ...]
    observable_axes: tuple[IntegrationAxis, ...]
    holdout_nodes: int = 21
    n_posterior_samples: int = 300
    n_data_samples: int = 200
    min_data_samples: int = 30
    mode: str = "both"
    grid: GridConfig = field(default_factory=GridConfig)

    def __post_init__(self):
        if self.tol_dkl <= 0 or self.tol_cdf <= 0:
            raise ConfigError("validation tolerances must be positive")
        if not self.leave_out:
            raise ConfigError("need at least one leave-out slice")
        if self.mode not in ("both", "either"):
            raise ConfigError(f"unknown validation mode {self.mode!r}")


@dataclass
class SliceResult:
    slice_index: int
    description: str
    d_dkl: float
    d_cdf: float
    pass_dkl: bool
    pass_cdf: bool
    passed: bool
    n_data_samples: int
    n_model_samples: int


@dataclass
class ValidationReport:
    slices: list[SliceResult]
    verdict: str  # "not_invalid" | "invalid"
    final_record: ModelRecord | None = None

    @property
    def not_invalid(self) -> bool:
        return self.verdict == "not_invalid"


def _slice_observable(vconfig: ValidationConfig, spec: SliceSpec) -> ObservableSpec:
    if spec.values is not None:
        if len(spec.values) != 1:
            raise ConfigError("a value-type validation slice must pin exactly one value")
        return ObservableSpec(
            integrate_over=vconfig.observable_axes,
            fixed_at=((spec.coordinate, spec.values[0]),),
        )
    if spec.interval is not None:
        extra = IntegrationAxis(
            coordinate=spec.coordinate, bounds=spec.interval, n_nodes=vconfig.holdout_nodes
        )
        return ObservableSpec(integrate_over=(*vconfig.observable_axes, extra))
    raise ConfigError("index-based slices carry no leave-out coordinate for the observable")


def leave_out_validate(
    record: ModelRecord,
    dataset: Dataset,
    vconfig: ValidationConfig,
    standardizer: Standardizer,
    settings: FitSettings,
    seed: int = 0,
    workers: int = 1,
) -> ValidationReport:
    """Credibility test: refit on each slice's remainder, compare the observable
    distributions of model and held-out data, and pass only if every slice
    meets the tolerances.  On a pass, the returned report carries a record
    refitted on the full dataset.
    """
    pairs = split_leave_out(dataset, vconfig.leave_out)

    def run(item) -> SliceResult:
        n, (train_ds, held_ds) = item
        if held_ds.n < 2:
            raise ConfigError(f"leave-out slice {n} holds fewer than 2 rows")
        obs = _slice_observable(vconfig, vconfig.leave_out[n])
        train_std = Dataset(
            inputs=standardizer.transform_inputs(train_ds.inputs),
            outputs=standardizer.transform_outputs(train_ds.outputs),
            input_names=train_ds.input_names,
            output_names=train_ds.output_names,
            scenario=train_ds.scenario,
            realization_id=train_ds.realization_id,
        )
        opt = replace(settings.opt, seed=stable_seed(seed, "validate", n))
        post, _rec = fit_hierarchical(
            record.arch,
            train_std,
            record.evidence.sigma_map,
            mask=record.mask,
            config=settings.hier,
            opt=opt,
            prior_mean=record.posterior.prior_mean,
            init_params=record.posterior.theta_map,
        )
        noise_phys = post.sigma.sigma_noise * float(standardizer.output_scale[0])
        z_data = dataset_observable_samples(
            held_ds,
            obs,
            sigma_noise=noise_phys,
            min_samples=vconfig.min_data_samples,
            n_widen=vconfig.n_data_samples,
            seed=stable_seed(seed, "zdata", n),
        )
        z_model = posterior_observable_samples(
            post,
            obs,
            vconfig.n_posterior_samples,
            seed=stable_seed(seed, "zmodel", n),
            standardizer=standardizer,
            noise_scale=noise_phys,
        )
        d_dkl = metric_dkl(z_data, z_model, vconfig.grid)
        d_cdf = metric_cdf(z_data, z_model)
        ok_dkl = d_dkl <= vconfig.tol_dkl
        ok_cdf = d_cdf <= vconfig.tol_cdf
        passed = (ok_dkl and ok_cdf) if vconfig.mode == "both" else (ok_dkl or ok_cdf)
        return SliceResult(
            slice_index=n,
            description=_describe_slice(vconfig.leave_out[n], dataset),
            d_dkl=d_dkl,
            d_cdf=d_cdf,
            pass_dkl=ok_dkl,
            pass_cdf=ok_cdf,
            passed=passed,
            n_data_samples=int(np.size(z_data)),
            n_model_samples=int(np.size(z_model)),
        )

    slices = _pmap(run, list(enumerate(pairs)), workers)
    verdict = "not_invalid" if all(s.passed for s in slices) else "invalid"
    final_record = None
    if verdict == "not_invalid":
        data_std = Dataset(
            inputs=standardizer.transform_inputs(dataset.inputs),
            outputs=standardizer.transform_outputs(dataset.outputs),
            input_names=dataset.input_names,
            output_names=dataset.output_names,
            scenario=dataset.scenario,
            realization_id=dataset.realization_id,
        )
        opt = replace(settings.opt, seed=stable_seed(seed, "validate", "full"))
        post, rec = fit_hierarchical(
            record.arch,
            data_std,
            record.evidence.sigma_map,
            mask=record.mask,
            config=settings.hier,
            opt=opt,
            prior_mean=record.posterior.prior_mean,
            init_params=record.posterior.theta_map,
        )
        final_record = ModelRecord(
            arch=record.arch,
            mask=record.mask,
            posterior=post,
            evidence=rec,
            label=record.label + " (full-data refit)",
        )
    return ValidationReport(slices=slices, verdict=verdict, final_record=final_record)


def _describe_slice(spec: SliceSpec, dataset: Dataset) -> str:
    if spec.indices is not None:
        return f"{len(spec.indices)} explicit rows"
    name = dataset.input_names[spec.coordinate]
    if spec.values is not None:
        return f"{name} in {list(spec.values)}"
    return f"{name} in [{spec.interval[0]:.6g}, {spec.interval[1]:.6g}]"


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OpalConfig:
    """Bundle of every stage's settings for one discovery run."""

    probe: ProbeConfig
    validation: ValidationConfig
    depth_per_category: int = 1
    n_categories: int = 3
    allowed_activations: tuple[Activation, ...] = DEFAULT_ACTIVATIONS
    sparsify: SparsifyConfig = field(default_factory=SparsifyConfig)
    fit: FitSettings = field(default_factory=FitSettings)
    width_cap_override: int | None = None
    explore_beyond_valid: bool = False
    workers: int = 1


@dataclass
class OpalResult:
    outcome: str  # "not_invalid" | "all_invalid"
    best: ModelRecord | None
    records: list[ModelRecord]
    probe: ProbeResult
    trail: dict
    standardizer: Standardizer


def run_opal(
    data: Dataset,
    config: OpalConfig,
    pretrain_data: Dataset | None = None,
    seed: int = 0,
) -> OpalResult:
    """Full discovery loop over ascending Occam categories.

    Fits run on standardized coordinates; metrics and observables are
    reported in physical units.  Stops at the first category whose plausible
    model is not invalid; if every category fails, the outcome instructs the
    caller to enlarge the initial model set.  The scenario-design step is a
    recorded no-op hook.
    """
    data_std, standardizer = standardize(data)
    pretrain_std = None
    if pretrain_data is not None:
        pretrain_std = Dataset(
            inputs=standardizer.transform_inputs(pretrain_data.inputs),
            outputs=standardizer.transform_outputs(pretrain_data.outputs),
            input_names=pretrain_data.input_names,
            output_names=pretrain_data.output_names,
            scenario=pretrain_data.scenario,
            realization_id=pretrain_data.realization_id,
        )

    probe = build_initial_set(
        data_std, config.probe, config.fit, seed=seed, workers=config.workers,
        pretrain_std=pretrain_std,
    )
    width_cap = config.width_cap_override or probe.width_cap
    categories = partition_categories(
        width_cap, config.depth_per_category, config.n_categories, config.allowed_activations
    )

    trail: dict = {
        "seed": seed,
        "probe": {
            "width_cap": width_cap,
            "peak_width": probe.peak_width,
            "interior_peak": probe.interior_peak,
            "warning": probe.warning,
            "grid": probe.grid,
        },
        "categories": [],
    }
    records: list[ModelRecord] = []
    best: ModelRecord | None = None
    best_report: ValidationReport | None = None
    prefix: tuple[Activation, ...] = ()

    for category in categories:
        try:
            disc = discover_category_model(
                category,
                data_std,
                config.fit,
                activation_prefix=prefix,
                pretrain_std=pretrain_std,
                sparsify_config=config.sparsify,
                seed=seed,
                workers=config.workers,
            )
        except DegenerateEvidenceError as exc:
            trail["categories"].append(
                {"index": category.index, "status": "failed", "error": str(exc)}
            )
            continue
        prefix = disc.activation_prefix
        report = leave_out_validate(
            disc.record,
            data,
            config.validation,
            standardizer,
            config.fit,
            seed=stable_seed(seed, "validation", category.index),
            workers=config.workers,
        )
        records.append(disc.record)
        trail["categories"].append(_category_trail(category, disc, report))
        if report.not_invalid:
            candidate = report.final_record or disc.record
            if best is None or _better_validator(report, best_report):
                best, best_report = candidate, report
            if not config.explore_beyond_valid:
                break

    if records:
        plausibilities(records)
        for entry, rec in zip([c for c in trail["categories"] if "candidates" in c], records):
            entry["plausibility"] = rec.plausibility

    trail["scenario_design"] = {"status": "scenario-exhausted", "note": "no scenario budget; hook only"}
    if best is not None:
        trail["outcome"] = "not_invalid"
        outcome = "not_invalid"
    else:
        trail["outcome"] = "all_invalid"
        trail["directive"] = "enlarge the initial model set"
        outcome = "all_invalid"
    return OpalResult(
        outcome=outcome,
        best=best,
        records=records,
        probe=probe,
        trail=trail,
        standardizer=standardizer,
    )


def _better_validator(report: ValidationReport, incumbent: ValidationReport | None) -> bool:
    if incumbent is None:
        return True
    score = max(s.d_dkl for s in report.slices) + max(s.d_cdf for s in report.slices)
    inc = max(s.d_dkl for s in incumbent.slices) + max(s.d_cdf for s in incumbent.slices)
    return score < inc


def _category_trail(category: OccamCategory, disc: CategoryDiscovery, report: ValidationReport) -> dict:
    sweep = disc.sweep
    return {
        "index": category.index,
        "depths": list(category.depths),
        "width_cap": category.width_cap,
        "candidates": disc.candidates,
        "selected_depth": disc.selected_depth,
        "plausible_model": {
            "label": disc.record.label,
            "arch": disc.record.arch.describe(),
            "mask_density": disc.record.mask.density(),
            "log_evid_sigma": disc.record.evidence.log_evid_sigma,
            "log_evid_model": disc.record.evidence.log_evid_model,
        },
        "sweep": {
            "thresholds": [float(t) for t in sweep.trace.thresholds],
            "removed_fraction": [float(r) for r in sweep.trace.removed_fraction],
            "log_evid_model": [float(v) for v in sweep.trace.log_evid_model],
            "log_evid_raw": [float(v) for v in sweep.trace.log_evid_raw],
            "selected_index": sweep.trace.selected_index,
        },
        "validation": {
            "verdict": report.verdict,
            "slices": [
                {
                    "slice": s.slice_index,
                    "description": s.description,
                    "d_dkl": s.d_dkl,
                    "d_cdf": s.d_cdf,
                    "pass_dkl": s.pass_dkl,
                    "pass_cdf": s.pass_cdf,
                    "passed": s.passed,
                }
                for s in report.slices
            ],
        },
    }
