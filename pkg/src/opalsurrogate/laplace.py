"""Gaussian posterior approximation for dense networks.

The posterior over weights is approximated by a normal centred at the MAP
point whose precision is the generalized Gauss-Newton curvature of the
negative log likelihood plus the prior precision.  Curvature is kept
layer-block-diagonal in Kronecker-factored form: per layer an activation
second-moment factor (summed over data, so the product of factors estimates
the curvature of the *total* loss) and an averaged pre-activation curvature
factor.  The prior enters exactly through the eigendecomposition of the two
factors; no damping is applied to them.

Masked (sparsified) layers lose the Kronecker structure, so their retained
sub-block is eigendecomposed densely; this is only permitted up to a
configurable size limit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .errors import (
    CapabilityError,
    DivergenceError,
    NumericalError,
    ShapeError,
)
from .network import (
    Architecture,
    ForwardTrace,
    Parameters,
    SparsityMask,
    _augment,
    apply_mask,
    batched_jacobian,
    forward_trace,
    grad_neg_log_posterior,
    output_preact_sensitivities,
    unpack_data,
    _laplace_scales,
)

__all__ = [
    "InferenceHyperParams",
    "OptConfig",
    "TrainResult",
    "KfacFactors",
    "LayerKfac",
    "LaplacePosterior",
    "PredictiveDistribution",
    "train_map",
    "compute_kfac",
    "build_posterior",
    "log_det_and_trace",
    "layer_trace_h_inv",
    "layer_covariance",
    "layer_covariance_matvec",
    "predict",
    "neg_log_posterior_loss",
    "DENSE_LAYER_LIMIT",
]

# Retained-parameter count above which a layer refuses dense factorization.
DENSE_LAYER_LIMIT = 4096


@dataclass(frozen=True)
class InferenceHyperParams:
    """Prior scales (one per weight layer, output layer included) and noise scale."""

    sigma_pr: tuple[float, ...]
    sigma_noise: float

    def __post_init__(self):
        object.__setattr__(self, "sigma_pr", tuple(float(s) for s in self.sigma_pr))
        object.__setattr__(self, "sigma_noise", float(self.sigma_noise))
        if not self.sigma_pr:
            raise ValueError("sigma_pr must have at least one entry")
        for s in self.sigma_pr:
            if not (s > 0 and math.isfinite(s)):
                raise ValueError(f"prior scale must be positive and finite, got {s}")
        if not (self.sigma_noise > 0 and math.isfinite(self.sigma_noise)):
            raise ValueError(f"noise scale must be positive and finite, got {self.sigma_noise}")

    @classmethod
    def isotropic(cls, arch: Architecture, sigma_pr: float, sigma_noise: float) -> "InferenceHyperParams":
        return cls(sigma_pr=(float(sigma_pr),) * arch.n_layers, sigma_noise=sigma_noise)

    def prior_precisions(self) -> np.ndarray:
        return 1.0 / np.asarray(self.sigma_pr) ** 2


@dataclass(frozen=True)
class OptConfig:
    """Settings for MAP training.

    Training runs a monotone Adam phase (steps are only accepted if the loss
    does not increase; otherwise the step size is halved and retried) followed
    by an optional damped Gauss-Newton polish for tight convergence on
    networks whose free-parameter count fits a dense solve.
    """

    max_iters: int = 600
    step_size: float = 0.05
    tolerance: float = 1e-6
    seed: int = 0
    init_scale: float = 0.1
    gauss_newton: bool = True
    gn_max_iters: int = 40
    gn_dense_limit: int = 1500
    min_step: float = 1e-14


@dataclass
class TrainResult:
    """MAP point plus convergence diagnostics; ``losses`` holds accepted steps only."""

    params: Parameters
    converged: bool
    iterations: int
    loss: float
    grad_norm: float
    losses: list[float] = field(default_factory=list)


def neg_log_posterior_loss(
    arch: Architecture,
    params: Parameters,
    data,
    sigma: InferenceHyperParams,
    prior_kind: str = "gaussian",
    prior_mean: Parameters | None = None,
    beta: Sequence[float] | float | None = None,
) -> float:
    """Parameter-dependent part of the negative log posterior (constants dropped)."""
    x, y = unpack_data(data)
    total = 0.0
    if x.shape[0] > 0:
        trace = forward_trace(arch, params, x)
        if y.shape != trace.output.shape:
            raise ShapeError(
                f"outputs of shape {y.shape} do not match predictions {trace.output.shape}"
            )
        total += 0.5 * float(np.sum((trace.output - y) ** 2)) / sigma.sigma_noise**2
    sigma_pr = np.asarray(sigma.sigma_pr)
    if prior_kind == "gaussian":
        for l in range(arch.n_layers):
            centred = params[l] - (prior_mean[l] if prior_mean is not None else 0.0)
            total += 0.5 * float(np.sum(centred**2)) / sigma_pr[l] ** 2
    elif prior_kind == "laplace":
        scales = _laplace_scales(sigma_pr, beta)
        for l in range(arch.n_layers):
            centred = params[l] - (prior_mean[l] if prior_mean is not None else 0.0)
            total += float(np.sum(np.abs(centred))) / scales[l]
    else:
        raise ValueError(f"unknown prior kind {prior_kind!r}")
    return total


def init_params(
    arch: Architecture,
    sigma: InferenceHyperParams,
    seed: int,
    init_scale: float = 0.1,
    mask: SparsityMask | None = None,
    prior_mean: Parameters | None = None,
) -> Parameters:
    """Deterministic seeded start: weights from the scaled prior, biases zero."""
    rng = np.random.default_rng(seed)
    layers = []
    for l, (rows, cols) in enumerate(arch.layer_shapes):
        w = rng.normal(0.0, init_scale * sigma.sigma_pr[l], size=(rows, cols))
        w[-1, :] = 0.0
        if prior_mean is not None:
            w += prior_mean[l]
        layers.append(w)
    params = Parameters(layers)
    return apply_mask(params, mask) if mask is not None else params


def train_map(
    arch: Architecture,
    data,
    sigma: InferenceHyperParams,
    prior_kind: str = "gaussian",
    mask: SparsityMask | None = None,
    opt: OptConfig | None = None,
    init: Parameters | None = None,
    prior_mean: Parameters | None = None,
) -> TrainResult:
    """Find the MAP point of the negative log posterior.

    Deterministic given ``opt.seed``; masked entries remain exactly zero
    throughout.  Convergence means the gradient norm fell below
    ``opt.tolerance * max(1, ||theta||)``; otherwise the iteration budget was
    exhausted and ``converged`` is False.  Non-finite losses raise
    :class:`DivergenceError`.
    """
    opt = opt or OptConfig()
    if prior_kind == "laplace":
        raise ValueError("use sparsify.train_map_laplace_prior for the non-smooth prior")

    theta = init.copy() if init is not None else init_params(
        arch, sigma, opt.seed, opt.init_scale, mask, prior_mean
    )
    if mask is not None:
        theta = apply_mask(theta, mask)

    def loss_of(p: Parameters) -> float:
        return neg_log_posterior_loss(arch, p, data, sigma, prior_kind, prior_mean)

    def grad_of(p: Parameters) -> np.ndarray:
        return grad_neg_log_posterior(arch, p, data, sigma, prior_kind, mask, prior_mean)

    cur_loss = loss_of(theta)
    if not math.isfinite(cur_loss):
        raise DivergenceError("non-finite loss at initialization", iteration=0)
    losses = [cur_loss]
    theta_flat = theta.flatten()
    m = np.zeros_like(theta_flat)
    v = np.zeros_like(theta_flat)
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    lr = opt.step_size
    converged = False
    grad = grad_of(theta)
    iters = 0

    for t in range(1, opt.max_iters + 1):
        iters = t
        gnorm = float(np.linalg.norm(grad))
        if not math.isfinite(gnorm):
            raise DivergenceError("non-finite gradient", iteration=t)
        if gnorm <= opt.tolerance * max(1.0, float(np.linalg.norm(theta_flat))):
            converged = True
            break
        m = beta1 * m + (1 - beta1) * grad
        v = beta2 * v + (1 - beta2) * grad * grad
        direction = (m / (1 - beta1**t)) / (np.sqrt(v / (1 - beta2**t)) + eps)
        while True:
            cand_flat = theta_flat - lr * direction
            cand = Parameters.from_flat(arch, cand_flat)
            if mask is not None:
                cand = apply_mask(cand, mask)
            cand_loss = loss_of(cand)
            if not math.isfinite(cand_loss):
                raise DivergenceError("non-finite loss during optimization", iteration=t)
            if cand_loss <= cur_loss:
                theta, theta_flat, cur_loss = cand, cand.flatten(), cand_loss
                losses.append(cur_loss)
                lr = min(lr * 1.25, opt.step_size)
                break
            lr *= 0.5
            if lr < opt.min_step:
                break
        if lr < opt.min_step:
            break
        grad = grad_of(theta)

    if opt.gauss_newton:
        theta, cur_loss, converged, gn_iters = _gauss_newton_polish(
            arch, theta, data, sigma, mask, prior_mean, opt, cur_loss, losses
        )
        iters += gn_iters

    grad = grad_of(theta)
    return TrainResult(
        params=theta,
        converged=converged
        or float(np.linalg.norm(grad))
        <= opt.tolerance * max(1.0, float(np.linalg.norm(theta.flatten()))),
        iterations=iters,
        loss=cur_loss,
        grad_norm=float(np.linalg.norm(grad)),
        losses=losses,
    )


def _gauss_newton_polish(arch, theta, data, sigma, mask, prior_mean, opt, cur_loss, losses):
    """Damped Gauss-Newton steps with Armijo backtracking on the free coordinates."""
    free = mask.flatten() if mask is not None else np.ones(arch.param_count, dtype=bool)
    n_free = int(free.sum())
    if n_free == 0 or n_free > opt.gn_dense_limit:
        return theta, cur_loss, False, 0
    x, _ = unpack_data(data)
    prec = np.concatenate(
        [np.full(r * c, 1.0 / sigma.sigma_pr[l] ** 2) for l, (r, c) in enumerate(arch.layer_shapes)]
    )[free]

    def loss_of(p):
        return neg_log_posterior_loss(arch, p, data, sigma, "gaussian", prior_mean)

    converged = False
    it = 0
    for it in range(1, opt.gn_max_iters + 1):
        g_full = grad_neg_log_posterior(arch, theta, data, sigma, "gaussian", mask, prior_mean)
        g = g_full[free]
        theta_flat = theta.flatten()
        if float(np.linalg.norm(g)) <= opt.tolerance * max(1.0, float(np.linalg.norm(theta_flat))):
            converged = True
            break
        if x.shape[0] > 0:
            J = batched_jacobian(arch, theta, x).reshape(-1, arch.param_count)[:, free]
            H = (J.T @ J) / sigma.sigma_noise**2
        else:
            H = np.zeros((n_free, n_free))
        H[np.diag_indices_from(H)] += prec
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(H, g, rcond=None)[0]
        slope = float(g @ step)
        if slope >= 0:
            break
        t = 1.0
        accepted = False
        while t >= 1e-12:
            cand_flat = theta_flat.copy()
            cand_flat[free] += t * step
            cand = Parameters.from_flat(arch, cand_flat)
            cand_loss = loss_of(cand)
            if math.isfinite(cand_loss) and cand_loss <= cur_loss + 1e-4 * t * slope:
                theta, cur_loss = cand, cand_loss
                losses.append(cur_loss)
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
    return theta, cur_loss, converged, it


@dataclass
class LayerKfac:
    """Kronecker curvature factors of one layer and their eigendecompositions.

    ``act_moment`` is the second moment of the augmented layer inputs summed
    over the data; ``curv`` is the data-averaged curvature of the loss with
    respect to the layer pre-activations.  Eigenvalues are clamped at zero
    (the factors are PSD by construction; negatives are roundoff) and sorted
    descending.
    """

    act_moment: np.ndarray
    curv: np.ndarray
    act_evecs: np.ndarray
    act_evals: np.ndarray
    curv_evecs: np.ndarray
    curv_evals: np.ndarray

    @classmethod
    def from_factors(cls, act_moment: np.ndarray, curv: np.ndarray, layer_index: int) -> "LayerKfac":
        try:
            aw, av = np.linalg.eigh(act_moment)
            cw, cv = np.linalg.eigh(curv)
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"eigendecomposition failed for layer {layer_index}") from exc
        a_order = np.argsort(aw)[::-1]
        c_order = np.argsort(cw)[::-1]
        return cls(
            act_moment=act_moment,
            curv=curv,
            act_evecs=av[:, a_order],
            act_evals=np.maximum(aw[a_order], 0.0),
            curv_evecs=cv[:, c_order],
            curv_evals=np.maximum(cw[c_order], 0.0),
        )


@dataclass
class KfacFactors:
    """Per-layer Kronecker factors for the whole network."""

    layers: tuple[LayerKfac, ...]
    n_data: int


def compute_kfac(
    arch: Architecture,
    theta_map: Parameters,
    data,
    sigma: InferenceHyperParams,
) -> KfacFactors:
    """Kronecker-factored curvature of the negative log likelihood at the MAP point.

    The pre-activation curvature starts from the identity scaled by the noise
    precision at the output and is pulled backwards through each layer by
    conjugation with the outgoing weights and the activation derivative
    (second-derivative terms dropped, as in any Gauss-Newton scheme).
    """
    theta_map.validate_for(arch)
    x, _y = unpack_data(data)
    n = x.shape[0]
    noise_prec = 1.0 / sigma.sigma_noise**2

    if n == 0:
        layers = tuple(
            LayerKfac.from_factors(np.zeros((r, r)), np.zeros((c, c)), l)
            for l, (r, c) in enumerate(arch.layer_shapes)
        )
        return KfacFactors(layers=layers, n_data=0)

    trace = forward_trace(arch, theta_map, x)
    # Backward recursion for per-datum pre-activation curvature, averaged at
    # each layer.  The output block is constant across data.
    curv_by_layer: list[np.ndarray] = [np.empty(0)] * arch.n_layers
    curv_by_layer[arch.depth] = noise_prec * np.eye(arch.output_dim)
    b = np.broadcast_to(
        curv_by_layer[arch.depth], (n, arch.output_dim, arch.output_dim)
    ).copy()
    for l in range(arch.depth - 1, -1, -1):
        w_nb = theta_map[l + 1][:-1, :]  # (width_l, width_{l+1})
        d = arch.activations[l].derivative(trace.preacts[l])  # (N, width_l)
        p = d[:, :, None] * w_nb[None, :, :]  # (N, width_l, width_{l+1})
        b = p @ b @ np.transpose(p, (0, 2, 1))
        curv_by_layer[l] = b.mean(axis=0)

    layers = []
    for l in range(arch.n_layers):
        zin = _augment(trace.acts[l])
        act_moment = zin.T @ zin  # summed over data
        act_moment = 0.5 * (act_moment + act_moment.T)
        curv = 0.5 * (curv_by_layer[l] + curv_by_layer[l].T)
        layers.append(LayerKfac.from_factors(act_moment, curv, l))
    return KfacFactors(layers=tuple(layers), n_data=n)


@dataclass
class _MaskedLayerSpectrum:
    """Dense eigendecomposition of the retained sub-block of a masked layer."""

    keep: np.ndarray  # flat indices retained within the layer
    evals: np.ndarray  # curvature eigenvalues (prior excluded)
    evecs: np.ndarray


def _masked_layer_spectrum(
    lf: LayerKfac, mask_layer: np.ndarray, layer_index: int, dense_limit: int
) -> _MaskedLayerSpectrum:
    keep = np.flatnonzero(mask_layer.reshape(-1))
    if keep.size > dense_limit:
        raise CapabilityError(
            f"masked layer {layer_index} retains {keep.size} parameters, above the "
            f"dense factorization limit {dense_limit}"
        )
    cols = lf.curv.shape[0]
    j_idx, i_idx = np.divmod(keep, cols)
    block = lf.act_moment[np.ix_(j_idx, j_idx)] * lf.curv[np.ix_(i_idx, i_idx)]
    try:
        w, v = np.linalg.eigh(block)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(f"eigendecomposition failed for masked layer {layer_index}") from exc
    return _MaskedLayerSpectrum(keep=keep, evals=np.maximum(w, 0.0), evecs=v)


@dataclass
class LaplacePosterior:
    """Gaussian posterior approximation: MAP centre plus factored curvature."""

    arch: Architecture
    mask: SparsityMask
    theta_map: Parameters
    sigma: InferenceHyperParams
    kfac: KfacFactors
    log_det_h: float
    trace_h_inv: float
    prior_mean: Parameters | None = None
    masked_spectra: dict[int, _MaskedLayerSpectrum] = field(default_factory=dict)

    @property
    def param_count(self) -> int:
        """Retained (free) parameter count."""
        return self.mask.retained_total()

    def retained_per_layer(self) -> np.ndarray:
        return self.mask.retained_per_layer()


def build_posterior(
    arch: Architecture,
    theta_map: Parameters,
    data,
    sigma: InferenceHyperParams,
    mask: SparsityMask | None = None,
    prior_mean: Parameters | None = None,
    dense_limit: int = DENSE_LAYER_LIMIT,
) -> LaplacePosterior:
    """Assemble the Laplace posterior at a trained MAP point."""
    mask = mask if mask is not None else SparsityMask.all_true(arch)
    mask.validate_for(arch)
    kfac = compute_kfac(arch, theta_map, data, sigma)
    spectra: dict[int, _MaskedLayerSpectrum] = {}
    for l in range(arch.n_layers):
        if not mask.layer_is_full(l):
            spectra[l] = _masked_layer_spectrum(kfac.layers[l], mask[l], l, dense_limit)
    post = LaplacePosterior(
        arch=arch,
        mask=mask,
        theta_map=theta_map,
        sigma=sigma,
        kfac=kfac,
        log_det_h=0.0,
        trace_h_inv=0.0,
        prior_mean=prior_mean,
        masked_spectra=spectra,
    )
    post.log_det_h, post.trace_h_inv = log_det_and_trace(post)
    return post


def _layer_log_det_trace(post: LaplacePosterior, l: int) -> tuple[float, float]:
    prec = 1.0 / post.sigma.sigma_pr[l] ** 2
    if l in post.masked_spectra:
        shifted = post.masked_spectra[l].evals + prec
        return float(np.sum(np.log(shifted))), float(np.sum(1.0 / shifted))
    lf = post.kfac.layers[l]
    shifted = np.outer(lf.act_evals, lf.curv_evals) + prec
    return float(np.sum(np.log(shifted))), float(np.sum(1.0 / shifted))


def log_det_and_trace(post: LaplacePosterior) -> tuple[float, float]:
    """Log-determinant of the posterior precision and trace of its inverse.

    Both come from the factor spectra: each retained direction contributes
    ``act_eval * curv_eval + 1/sigma_pr^2`` (the prior enters as a precision,
    which keeps every term strictly positive).
    """
    log_det = 0.0
    trace = 0.0
    for l in range(post.arch.n_layers):
        ld, tr = _layer_log_det_trace(post, l)
        log_det += ld
        trace += tr
    return log_det, trace


def layer_trace_h_inv(post: LaplacePosterior) -> np.ndarray:
    """Per-layer trace of the inverse posterior precision."""
    return np.array([_layer_log_det_trace(post, l)[1] for l in range(post.arch.n_layers)])


def layer_covariance(
    post: LaplacePosterior, layer: int, dense_limit: int = DENSE_LAYER_LIMIT
) -> np.ndarray:
    """Dense posterior covariance block of one layer, in the flat layer layout.

    For masked layers the covariance of the retained coordinates is embedded
    at their positions (removed coordinates are pinned at zero, so their rows
    and columns are zero).  Layers above ``dense_limit`` raise
    :class:`CapabilityError`; use :func:`layer_covariance_matvec` instead.
    """
    if not (0 <= layer < post.arch.n_layers):
        raise IndexError(f"layer {layer} out of range")
    rows, cols = post.arch.layer_shapes[layer]
    dim = rows * cols
    prec = 1.0 / post.sigma.sigma_pr[layer] ** 2
    if layer in post.masked_spectra:
        sp = post.masked_spectra[layer]
        inv = 1.0 / (sp.evals + prec)
        cov_keep = (sp.evecs * inv) @ sp.evecs.T
        cov = np.zeros((dim, dim))
        cov[np.ix_(sp.keep, sp.keep)] = cov_keep
        return cov
    if dim > dense_limit:
        raise CapabilityError(
            f"layer {layer} has {dim} parameters, above the dense materialization "
            f"limit {dense_limit}; use layer_covariance_matvec"
        )
    lf = post.kfac.layers[layer]
    u = np.kron(lf.act_evecs, lf.curv_evecs)
    inv = 1.0 / (np.outer(lf.act_evals, lf.curv_evals) + prec)
    return (u * inv.reshape(-1)) @ u.T


def layer_covariance_matvec(post: LaplacePosterior, layer: int, vec: np.ndarray) -> np.ndarray:
    """Apply one layer's posterior covariance to a flat vector without densifying."""
    rows, cols = post.arch.layer_shapes[layer]
    vec = np.asarray(vec, dtype=float).reshape(-1)
    if vec.size != rows * cols:
        raise ShapeError(f"expected a vector of length {rows * cols}, got {vec.size}")
    prec = 1.0 / post.sigma.sigma_pr[layer] ** 2
    if layer in post.masked_spectra:
        sp = post.masked_spectra[layer]
        out = np.zeros_like(vec)
        proj = sp.evecs.T @ vec[sp.keep]
        out[sp.keep] = sp.evecs @ (proj / (sp.evals + prec))
        return out
    lf = post.kfac.layers[layer]
    v = vec.reshape(rows, cols)
    t = lf.act_evecs.T @ v @ lf.curv_evecs
    t /= np.outer(lf.act_evals, lf.curv_evals) + prec
    return (lf.act_evecs @ t @ lf.curv_evecs.T).reshape(-1)


@dataclass
class PredictiveDistribution:
    """Pointwise predictive mean and variance; the noise floor is always included."""

    mean: np.ndarray
    variance: np.ndarray
    samples: np.ndarray | None = None


def predict(
    post: LaplacePosterior,
    x: np.ndarray,
    mode: str = "linearized",
    n_samples: int = 1000,
    seed: int = 0,
) -> PredictiveDistribution:
    """Posterior predictive at query points, hyperparameters plugged in at their MAP.

    ``"linearized"`` propagates the weight covariance through the network
    Jacobian; ``"sampled"`` draws weight samples layer-wise, runs the forward
    pass per sample, and reports empirical moments.  Both add the noise
    variance to the reported variance.
    """
    x_arr = np.asarray(x, dtype=float)
    single = x_arr.ndim == 1
    xb = x_arr[None, :] if single else x_arr
    if mode == "linearized":
        mean, var = _predict_linearized(post, xb)
        samples = None
    elif mode == "sampled":
        if n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {n_samples}")
        mean, var, samples = _predict_sampled(post, xb, n_samples, seed)
    else:
        raise ValueError(f"unknown predictive mode {mode!r}")
    if single:
        mean, var = mean[0], var[0]
        samples = samples[:, 0, :] if samples is not None else None
    return PredictiveDistribution(mean=mean, variance=var, samples=samples)


def _predict_linearized(post: LaplacePosterior, xb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    arch = post.arch
    trace = forward_trace(arch, post.theta_map, xb)
    sens = output_preact_sensitivities(arch, post.theta_map, trace)
    n, d_o = trace.output.shape
    var = np.zeros((n, d_o))
    for l in range(arch.n_layers):
        zin = _augment(trace.acts[l])
        g = sens[l]  # (N, d_o, width)
        prec = 1.0 / post.sigma.sigma_pr[l] ** 2
        if l in post.masked_spectra:
            sp = post.masked_spectra[l]
            jblock = np.einsum("nj,noi->noji", zin, g).reshape(n, d_o, -1)[:, :, sp.keep]
            proj = jblock @ sp.evecs
            var += np.einsum("nok,k->no", proj**2, 1.0 / (sp.evals + prec))
        else:
            lf = post.kfac.layers[l]
            zh = (zin @ lf.act_evecs) ** 2  # (N, rows)
            gh = (g @ lf.curv_evecs) ** 2  # (N, d_o, cols)
            inv = 1.0 / (np.outer(lf.act_evals, lf.curv_evals) + prec)
            var += np.einsum("na,nob,ab->no", zh, gh, inv)
    return trace.output, np.maximum(var, 0.0) + post.sigma.sigma_noise**2


def sample_parameters(post: LaplacePosterior, n_samples: int, seed: int = 0) -> list[Parameters]:
    """Draw weight samples from the layer-wise Gaussian posterior."""
    rng = np.random.default_rng(seed)
    arch = post.arch
    draws: list[list[np.ndarray]] = [[] for _ in range(n_samples)]
    for l in range(arch.n_layers):
        rows, cols = arch.layer_shapes[l]
        prec = 1.0 / post.sigma.sigma_pr[l] ** 2
        base = post.theta_map[l]
        if l in post.masked_spectra:
            sp = post.masked_spectra[l]
            eps = rng.standard_normal((n_samples, sp.keep.size))
            scaled = eps / np.sqrt(sp.evals + prec)
            flat_noise = scaled @ sp.evecs.T
            for s in range(n_samples):
                layer = np.zeros(rows * cols)
                layer[sp.keep] = flat_noise[s]
                draws[s].append(base + layer.reshape(rows, cols))
        else:
            lf = post.kfac.layers[l]
            denom = np.sqrt(np.outer(lf.act_evals, lf.curv_evals) + prec)
            eps = rng.standard_normal((n_samples, rows, cols))
            for s in range(n_samples):
                noise = lf.act_evecs @ (eps[s] / denom) @ lf.curv_evecs.T
                draws[s].append(base + noise)
    return [Parameters(layers) for layers in draws]


def _predict_sampled(
    post: LaplacePosterior, xb: np.ndarray, n_samples: int, seed: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    thetas = sample_parameters(post, n_samples, seed)
    outs = np.stack([forward_trace(post.arch, th, xb).output for th in thetas])
    mean = outs.mean(axis=0)
    spread = outs.var(axis=0, ddof=1) if n_samples > 1 else np.zeros_like(mean)
    return mean, spread + post.sigma.sigma_noise**2, outs
