"""Hierarchical evidence computations and model comparison.

Three levels of inference share one Gaussian machinery: weights are fitted at
fixed hyperparameters, the prior/noise scales are then re-estimated by
maximizing the data evidence (fixed-point updates in terms of the effective
number of well-determined parameters), and architectures are finally ranked
by the evidence with the hyperparameters integrated out through a Gaussian
approximation of their posterior in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, DegenerateEvidenceError, NumericalError, StateError
from .laplace import (
    InferenceHyperParams,
    LaplacePosterior,
    OptConfig,
    PredictiveDistribution,
    build_posterior,
    layer_trace_h_inv,
    predict,
    train_map,
)
from .network import Architecture, Parameters, SparsityMask, forward_trace, unpack_data

__all__ = [
    "EvidenceRecord",
    "ModelRecord",
    "HierarchicalConfig",
    "DEFAULT_HYPER_BOX",
    "log_evidence_sigma",
    "log_model_evidence",
    "fit_hierarchical",
    "plausibilities",
    "model_average_predict",
]

# Support of the uniform prior on (ln sigma_pr^2, ln sigma_noise^2): bounds on
# the squared scales themselves.  Shared by all models, so it cancels in
# comparisons; it still fixes the constant density entering the model evidence.
DEFAULT_HYPER_BOX = (1e-6, 1e6)


def c_prior_from_box(box: tuple[float, float] = DEFAULT_HYPER_BOX) -> float:
    """Log-density of the uniform hyperprior over its log-variance box."""
    lo, hi = box
    if not (0 < lo < hi):
        raise ConfigError(f"hyperparameter box must satisfy 0 < lo < hi, got {box}")
    side = math.log(hi) - math.log(lo)
    return -2.0 * math.log(side)


@dataclass
class EvidenceRecord:
    """Evidence values and hyperparameter-posterior curvature for one model."""

    log_evid_sigma: float
    log_evid_model: float
    sigma_map: InferenceHyperParams
    var_ln_sigma_pr2: float
    var_ln_sigma_noise2: float
    iterations: int
    converged: bool
    gamma: float = math.nan
    c_prior: float = 0.0


@dataclass
class ModelRecord:
    """An architecture with its fitted posterior and evidence bookkeeping.

    ``plausibility`` stays None until a model set is normalized together.
    """

    arch: Architecture
    mask: SparsityMask
    posterior: LaplacePosterior
    evidence: EvidenceRecord
    plausibility: float | None = None
    label: str = ""


def _retained_norms_squared(post: LaplacePosterior) -> np.ndarray:
    """Per-layer squared norm of (theta - prior_mean) over retained entries only."""
    out = []
    for l in range(post.arch.n_layers):
        centred = post.theta_map[l] - (post.prior_mean[l] if post.prior_mean is not None else 0.0)
        out.append(float(np.sum(centred[post.mask[l]] ** 2)))
    return np.array(out)


def residual_sum_squares(post: LaplacePosterior, data) -> float:
    x, y = unpack_data(data)
    if x.shape[0] == 0:
        return 0.0
    pred = forward_trace(post.arch, post.theta_map, x).output
    ss = float(np.sum((pred - y) ** 2))
    if not math.isfinite(ss):
        raise NumericalError("non-finite residuals when evaluating the evidence")
    return ss


def log_evidence_sigma(post: LaplacePosterior, data) -> float:
    """Log evidence of the data at fixed hyperparameters (Laplace estimate).

    Combines the log likelihood and log prior at the MAP point with the
    Gaussian-volume correction from the posterior precision determinant.
    Exact whenever the model is linear in its parameters.
    """
    x, y = unpack_data(data)
    n_total = x.shape[0] * (y.shape[1] if y.ndim > 1 else 1)
    ss = residual_sum_squares(post, data)
    sn2 = post.sigma.sigma_noise**2
    norms = _retained_norms_squared(post)
    p_layer = post.retained_per_layer()
    p_total = int(p_layer.sum())
    sigma_pr2 = np.asarray(post.sigma.sigma_pr) ** 2

    value = -0.5 * ss / sn2 - 0.5 * n_total * math.log(2 * math.pi * sn2)
    value -= float(np.sum(0.5 * norms / sigma_pr2))
    value -= float(np.sum(0.5 * p_layer * np.log(2 * math.pi * sigma_pr2)))
    value -= 0.5 * post.log_det_h
    value += 0.5 * p_total * math.log(2 * math.pi)
    return value


def log_model_evidence(record: EvidenceRecord, c_prior: float | None = None) -> float:
    """Architecture-level log evidence: hyperparameters integrated out.

    Adds the Gaussian occupancy of the hyperparameter posterior (2*pi times
    the two log-variance standard deviations) and the constant hyperprior
    density to the fixed-hyperparameter evidence.
    """
    if not (record.var_ln_sigma_pr2 > 0 and record.var_ln_sigma_noise2 > 0):
        raise StateError("hyperparameter posterior variances are unavailable or non-positive")
    c = record.c_prior if c_prior is None else c_prior
    return (
        record.log_evid_sigma
        + math.log(2 * math.pi)
        + 0.5 * math.log(record.var_ln_sigma_pr2)
        + 0.5 * math.log(record.var_ln_sigma_noise2)
        + c
    )


@dataclass(frozen=True)
class HierarchicalConfig:
    """Outer-loop settings for alternating weight and hyperparameter updates."""

    max_outer: int = 30
    tol: float = 1e-6
    shared_prior: bool = False
    hyper_box: tuple[float, float] = DEFAULT_HYPER_BOX
    c_prior: float | None = None  # None: derived from hyper_box
    method: str = "fixed_point"  # or "direct" (coordinate search, shared prior)
    direct_rounds: int = 3
    ascent_slack: float = 1e-9
    max_damping: int = 4

    def resolved_c_prior(self) -> float:
        return self.c_prior if self.c_prior is not None else c_prior_from_box(self.hyper_box)


def _effective_parameters(post: LaplacePosterior) -> tuple[np.ndarray, float]:
    """Per-layer and total count of parameters determined by the data."""
    traces = layer_trace_h_inv(post)
    p_layer = post.retained_per_layer().astype(float)
    prec = np.asarray(post.sigma.sigma_pr, dtype=float) ** -2
    gamma_layer = p_layer - traces * prec
    return gamma_layer, float(gamma_layer.sum())


def _clip_box(value: float, box: tuple[float, float]) -> float:
    return float(min(max(value, box[0]), box[1]))


def _mackay_update(
    post: LaplacePosterior, data, cfg: HierarchicalConfig
) -> InferenceHyperParams:
    """Fixed-point hyperparameter update from the current posterior."""
    x, y = unpack_data(data)
    n_total = x.shape[0] * (y.shape[1] if y.ndim > 1 else 1)
    gamma_layer, gamma = _effective_parameters(post)
    norms = _retained_norms_squared(post)
    if cfg.shared_prior:
        if gamma <= 0:
            raise DegenerateEvidenceError(
                f"effective parameter count {gamma:.3g} is not positive; "
                "the model is too flexible for the data"
            )
        pr2 = _clip_box(float(norms.sum()) / gamma, cfg.hyper_box)
        sigma_pr = (math.sqrt(pr2),) * post.arch.n_layers
    else:
        new_pr = []
        for l, (g_l, nrm) in enumerate(zip(gamma_layer, norms)):
            if g_l <= 0:
                raise DegenerateEvidenceError(
                    f"effective parameter count {g_l:.3g} for layer {l} is not positive; "
                    "the model is too flexible for the data"
                )
            new_pr.append(math.sqrt(_clip_box(nrm / g_l, cfg.hyper_box)))
        sigma_pr = tuple(new_pr)
    if n_total - gamma <= 0:
        raise DegenerateEvidenceError(
            f"residual degrees of freedom {n_total - gamma:.3g} are not positive"
        )
    ss = residual_sum_squares(post, data)
    sn2 = _clip_box(ss / (n_total - gamma), cfg.hyper_box)
    return InferenceHyperParams(sigma_pr=sigma_pr, sigma_noise=math.sqrt(sn2))


def _log_midpoint(a: InferenceHyperParams, b: InferenceHyperParams) -> InferenceHyperParams:
    pr = tuple(math.sqrt(x * y) for x, y in zip(a.sigma_pr, b.sigma_pr))
    return InferenceHyperParams(sigma_pr=pr, sigma_noise=math.sqrt(a.sigma_noise * b.sigma_noise))


def fit_hierarchical(
    arch: Architecture,
    data,
    init_sigma: InferenceHyperParams,
    mask: SparsityMask | None = None,
    config: HierarchicalConfig | None = None,
    opt: OptConfig | None = None,
    prior_mean: Parameters | None = None,
    init_params: Parameters | None = None,
) -> tuple[LaplacePosterior, EvidenceRecord]:
    """Alternate MAP training and evidence-maximizing hyperparameter updates.

    Stops when the relative change of the fixed-hyperparameter log evidence
    drops below ``config.tol`` or the outer budget is exhausted; the best
    iterate (largest evidence) is returned either way, with ``converged``
    recording which happened.  An update that would decrease the evidence is
    damped by retrying from the log-space midpoint, so accepted iterates form
    an ascending sequence up to ``ascent_slack``.

    Raises :class:`DegenerateEvidenceError` when the effective-parameter
    bookkeeping breaks down (non-positive effective counts or residual
    degrees of freedom).
    """
    cfg = config or HierarchicalConfig()
    opt = opt or OptConfig()
    if cfg.method == "direct":
        return _fit_direct(arch, data, init_sigma, mask, cfg, opt, prior_mean, init_params)
    if cfg.method != "fixed_point":
        raise ConfigError(f"unknown hierarchical method {cfg.method!r}")

    sigma = init_sigma
    theta = init_params
    prev_sigma: InferenceHyperParams | None = None
    prev_ev: float | None = None
    best: tuple[float, LaplacePosterior] | None = None
    converged = False
    damping_left = cfg.max_damping
    iterations = 0

    for _ in range(cfg.max_outer):
        iterations += 1
        tr = train_map(arch, data, sigma, "gaussian", mask, opt, init=theta, prior_mean=prior_mean)
        theta = tr.params
        post = build_posterior(arch, theta, data, sigma, mask, prior_mean)
        ev = log_evidence_sigma(post, data)

        if prev_ev is not None and ev < prev_ev - cfg.ascent_slack * max(1.0, abs(prev_ev)):
            if damping_left > 0 and prev_sigma is not None:
                damping_left -= 1
                sigma = _log_midpoint(prev_sigma, sigma)
                continue
            break  # cannot improve further; keep the best iterate
        if best is None or ev > best[0]:
            best = (ev, post)
        if prev_ev is not None and abs(ev - prev_ev) <= cfg.tol * max(1.0, abs(ev)):
            converged = True
            break
        prev_ev, prev_sigma = ev, sigma
        damping_left = cfg.max_damping
        sigma = _mackay_update(post, data, cfg)

    assert best is not None
    return _finalize_record(best[1], data, cfg, iterations, converged)


def _finalize_record(
    post: LaplacePosterior, data, cfg: HierarchicalConfig, iterations: int, converged: bool
) -> tuple[LaplacePosterior, EvidenceRecord]:
    x, y = unpack_data(data)
    n_total = x.shape[0] * (y.shape[1] if y.ndim > 1 else 1)
    _gamma_layer, gamma = _effective_parameters(post)
    if gamma <= 0 or n_total - gamma <= 0:
        raise DegenerateEvidenceError(
            f"cannot form hyperparameter posterior variances: gamma={gamma:.3g}, "
            f"residual dof={n_total - gamma:.3g}"
        )
    record = EvidenceRecord(
        log_evid_sigma=log_evidence_sigma(post, data),
        log_evid_model=0.0,
        sigma_map=post.sigma,
        var_ln_sigma_pr2=2.0 / gamma,
        var_ln_sigma_noise2=2.0 / (n_total - gamma),
        iterations=iterations,
        converged=converged,
        gamma=gamma,
        c_prior=cfg.resolved_c_prior(),
    )
    record.log_evid_model = log_model_evidence(record)
    return post, record


def _fit_direct(arch, data, init_sigma, mask, cfg, opt, prior_mean, init_params):
    """Coordinate search over the two log hyperparameters; shared prior only.

    Slower than the fixed point; kept as an independent route for
    cross-checking it.
    """
    from scipy.optimize import minimize_scalar

    if len(set(init_sigma.sigma_pr)) != 1:
        raise ConfigError("direct evidence maximization requires a shared prior scale")
    lo, hi = math.log(cfg.hyper_box[0]), math.log(cfg.hyper_box[1])
    state = {"theta": init_params, "evals": 0}

    def evidence_at(ln_pr2: float, ln_sn2: float) -> float:
        sigma = InferenceHyperParams(
            sigma_pr=(math.exp(0.5 * ln_pr2),) * arch.n_layers,
            sigma_noise=math.exp(0.5 * ln_sn2),
        )
        tr = train_map(arch, data, sigma, "gaussian", mask, opt, init=state["theta"], prior_mean=prior_mean)
        state["theta"] = tr.params
        state["evals"] += 1
        post = build_posterior(arch, tr.params, data, sigma, mask, prior_mean)
        return log_evidence_sigma(post, data)

    ln_pr2 = math.log(init_sigma.sigma_pr[0] ** 2)
    ln_sn2 = math.log(init_sigma.sigma_noise**2)
    for _ in range(cfg.direct_rounds):
        res = minimize_scalar(
            lambda t: -evidence_at(t, ln_sn2), bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-4},
        )
        ln_pr2 = float(res.x)
        res = minimize_scalar(
            lambda t: -evidence_at(ln_pr2, t), bounds=(lo, hi), method="bounded",
            options={"xatol": 1e-4},
        )
        ln_sn2 = float(res.x)
    sigma = InferenceHyperParams(
        sigma_pr=(math.exp(0.5 * ln_pr2),) * arch.n_layers,
        sigma_noise=math.exp(0.5 * ln_sn2),
    )
    tr = train_map(arch, data, sigma, "gaussian", mask, opt, init=state["theta"], prior_mean=prior_mean)
    post = build_posterior(arch, tr.params, data, sigma, mask, prior_mean)
    return _finalize_record(post, data, cfg, state["evals"], True)


def plausibilities(
    records: Sequence[ModelRecord], log_prior_weights: Sequence[float] | None = None
) -> list[ModelRecord]:
    """Normalize model evidences into posterior plausibilities (in place).

    Uses max-subtracted softmax, so the result is invariant to adding any
    constant to all log evidences.
    """
    if not records:
        raise ValueError("empty model set")
    if log_prior_weights is None:
        log_prior_weights = [0.0] * len(records)
    if len(log_prior_weights) != len(records):
        raise ValueError("log_prior_weights length does not match records")
    scores = np.array(
        [r.evidence.log_evid_model + w for r, w in zip(records, log_prior_weights)], dtype=float
    )
    if np.any(np.isnan(scores)):
        raise ValueError("NaN in log evidences")
    if np.all(np.isinf(scores) & (scores < 0)):
        raise DegenerateEvidenceError("all models have vanishing evidence")
    shifted = scores - scores.max()
    weights = np.exp(shifted)
    rho = weights / weights.sum()
    for r, p in zip(records, rho):
        r.plausibility = float(p)
    return list(records)


def model_average_predict(
    records: Sequence[ModelRecord],
    x: np.ndarray,
    mode: str = "linearized",
    n_samples: int = 1000,
    seed: int = 0,
) -> PredictiveDistribution:
    """Plausibility-weighted mixture of the per-model predictives."""
    if not records:
        raise ValueError("empty model set")
    if any(r.plausibility is None for r in records):
        raise StateError("plausibilities must be normalized before model averaging")
    preds = [predict(r.posterior, x, mode=mode, n_samples=n_samples, seed=seed) for r in records]
    rho = np.array([r.plausibility for r in records])
    means = np.stack([p.mean for p in preds])
    variances = np.stack([p.variance for p in preds])
    mix_mean = np.tensordot(rho, means, axes=1)
    second_moment = np.tensordot(rho, variances + means**2, axes=1)
    return PredictiveDistribution(mean=mix_mean, variance=second_moment - mix_mean**2)
