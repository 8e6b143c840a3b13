"""Dense feed-forward networks on plain numpy arrays.

Parameter layout contract
-------------------------
Each layer is a single augmented weight matrix of shape ``(fan_in + 1,
fan_out)``: one row per incoming unit plus a trailing row that multiplies a
constant 1 and therefore holds the biases.  The flat parameter vector
concatenates layers in order and flattens each matrix in C order (incoming
unit varies slowest, bias slot last).  Posterior covariance blocks and all
curvature factors depend on this ordering; it is part of the public API.

A network with ``depth == 0`` is a single affine output layer, which is the
linear-in-parameters case used by the conjugate-regression oracles.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError

__all__ = [
    "ActivationKind",
    "Activation",
    "Architecture",
    "Parameters",
    "SparsityMask",
    "ForwardTrace",
    "forward",
    "forward_trace",
    "grad_neg_log_posterior",
    "jacobian",
    "apply_mask",
    "unpack_data",
]


class ActivationKind(enum.Enum):
    """Supported scalar nonlinearities; enum order is the tie-break order."""

    TANH = "tanh"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


@dataclass(frozen=True)
class Activation:
    """A scalar activation map with its first derivative.

    ``leaky_slope`` only matters for ``LEAKY_RELU`` and must lie in (0, 1).
    The kink of the rectifiers at 0 uses the right derivative.
    """

    kind: ActivationKind
    leaky_slope: float = 0.01

    def __post_init__(self):
        if not (0.0 < self.leaky_slope < 1.0):
            raise ValueError(f"leaky_slope must be in (0, 1), got {self.leaky_slope}")

    def __call__(self, a: np.ndarray) -> np.ndarray:
        k = self.kind
        if k is ActivationKind.TANH:
            return np.tanh(a)
        if k is ActivationKind.RELU:
            return np.maximum(a, 0.0)
        if k is ActivationKind.LEAKY_RELU:
            return np.where(a >= 0.0, a, self.leaky_slope * a)
        if k is ActivationKind.SIGMOID:
            return 1.0 / (1.0 + np.exp(-a))
        return np.asarray(a, dtype=float)

    def derivative(self, a: np.ndarray) -> np.ndarray:
        k = self.kind
        if k is ActivationKind.TANH:
            t = np.tanh(a)
            return 1.0 - t * t
        if k is ActivationKind.RELU:
            return np.where(a >= 0.0, 1.0, 0.0)
        if k is ActivationKind.LEAKY_RELU:
            return np.where(a >= 0.0, 1.0, self.leaky_slope)
        if k is ActivationKind.SIGMOID:
            s = 1.0 / (1.0 + np.exp(-a))
            return s * (1.0 - s)
        return np.ones_like(np.asarray(a, dtype=float))

    @classmethod
    def of(cls, kind: "ActivationKind | str", leaky_slope: float = 0.01) -> "Activation":
        if isinstance(kind, str):
            kind = ActivationKind(kind.lower())
        return cls(kind=kind, leaky_slope=leaky_slope)


TANH = Activation(ActivationKind.TANH)
RELU = Activation(ActivationKind.RELU)
LEAKY_RELU = Activation(ActivationKind.LEAKY_RELU)
SIGMOID = Activation(ActivationKind.SIGMOID)
IDENTITY = Activation(ActivationKind.IDENTITY)


@dataclass(frozen=True)
class Architecture:
    """Dense architecture: widths of the hidden layers plus their activations.

    The output layer is always affine (identity activation), so a network has
    ``depth + 1`` weight matrices.  ``depth == 0`` (no hidden layer) gives a
    plain affine regression model.
    """

    input_dim: int
    output_dim: int
    hidden_widths: tuple[int, ...] = ()
    activations: tuple[Activation, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        object.__setattr__(self, "activations", tuple(self.activations))
        if self.input_dim < 1 or self.output_dim < 1:
            raise ValueError("input_dim and output_dim must be positive")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden widths must be positive")
        if len(self.hidden_widths) != len(self.activations):
            raise ValueError(
                f"{len(self.hidden_widths)} hidden widths but "
                f"{len(self.activations)} activations"
            )

    @property
    def depth(self) -> int:
        return len(self.hidden_widths)

    @property
    def n_layers(self) -> int:
        """Number of weight matrices (hidden layers plus the output layer)."""
        return self.depth + 1

    @property
    def layer_shapes(self) -> tuple[tuple[int, int], ...]:
        """(fan_in + 1, fan_out) of every weight matrix, in order."""
        fans = (self.input_dim, *self.hidden_widths, self.output_dim)
        return tuple((fans[i] + 1, fans[i + 1]) for i in range(self.n_layers))

    @property
    def param_count(self) -> int:
        return sum(r * c for r, c in self.layer_shapes)

    def layer_sizes(self) -> tuple[int, ...]:
        return tuple(r * c for r, c in self.layer_shapes)

    def describe(self) -> str:
        acts = "/".join(a.kind.value for a in self.activations) or "affine"
        widths = "x".join(str(w) for w in self.hidden_widths) or "-"
        return f"{self.input_dim}->[{widths}]->{self.output_dim} ({acts})"


class _LayerStack:
    """Shared behaviour of per-layer array containers (weights, masks)."""

    __slots__ = ("layers",)

    def __init__(self, layers: Iterable[np.ndarray]):
        self.layers = tuple(np.asarray(l) for l in layers)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, i):
        return self.layers[i]

    def shapes(self) -> tuple[tuple[int, int], ...]:
        return tuple(l.shape for l in self.layers)

    def _check_congruent(self, arch: Architecture, what: str) -> None:
        if self.shapes() != arch.layer_shapes:
            raise ShapeError(
                f"{what} shapes {self.shapes()} do not match architecture "
                f"layer shapes {arch.layer_shapes}"
            )


class Parameters(_LayerStack):
    """Per-layer augmented weight matrices (see module docstring for layout)."""

    def __init__(self, layers: Iterable[np.ndarray]):
        super().__init__(np.asarray(l, dtype=float) for l in layers)

    def flatten(self) -> np.ndarray:
        return np.concatenate([l.reshape(-1) for l in self.layers]) if self.layers else np.zeros(0)

    @classmethod
    def from_flat(cls, arch: Architecture, vec: np.ndarray) -> "Parameters":
        vec = np.asarray(vec, dtype=float).reshape(-1)
        if vec.size != arch.param_count:
            raise ShapeError(f"expected {arch.param_count} parameters, got {vec.size}")
        out, off = [], 0
        for r, c in arch.layer_shapes:
            out.append(vec[off : off + r * c].reshape(r, c).copy())
            off += r * c
        return cls(out)

    @classmethod
    def zeros(cls, arch: Architecture) -> "Parameters":
        return cls(np.zeros(s) for s in arch.layer_shapes)

    def copy(self) -> "Parameters":
        return Parameters(l.copy() for l in self.layers)

    def validate_for(self, arch: Architecture) -> None:
        self._check_congruent(arch, "parameter")

    def norms_squared(self, prior_mean: "Parameters | None" = None) -> np.ndarray:
        """Per-layer squared Euclidean norm, optionally about a nonzero centre."""
        if prior_mean is None:
            return np.array([float(np.sum(l * l)) for l in self.layers])
        return np.array(
            [float(np.sum((l - m) ** 2)) for l, m in zip(self.layers, prior_mean.layers)]
        )


class SparsityMask(_LayerStack):
    """Per-layer boolean masks congruent with the weight matrices; True = keep."""

    def __init__(self, layers: Iterable[np.ndarray]):
        super().__init__(np.asarray(l, dtype=bool) for l in layers)

    @classmethod
    def all_true(cls, arch: Architecture) -> "SparsityMask":
        return cls(np.ones(s, dtype=bool) for s in arch.layer_shapes)

    @classmethod
    def from_flat(cls, arch: Architecture, vec: np.ndarray) -> "SparsityMask":
        vec = np.asarray(vec, dtype=bool).reshape(-1)
        if vec.size != arch.param_count:
            raise ShapeError(f"expected {arch.param_count} mask entries, got {vec.size}")
        out, off = [], 0
        for r, c in arch.layer_shapes:
            out.append(vec[off : off + r * c].reshape(r, c).copy())
            off += r * c
        return cls(out)

    def flatten(self) -> np.ndarray:
        return np.concatenate([l.reshape(-1) for l in self.layers]) if self.layers else np.zeros(0, bool)

    def density(self) -> float:
        total = sum(l.size for l in self.layers)
        return float(sum(int(l.sum()) for l in self.layers)) / total if total else 1.0

    def retained_per_layer(self) -> np.ndarray:
        return np.array([int(l.sum()) for l in self.layers])

    def retained_total(self) -> int:
        return int(self.retained_per_layer().sum())

    def is_all_true(self) -> bool:
        return all(bool(l.all()) for l in self.layers)

    def layer_is_full(self, index: int) -> bool:
        return bool(self.layers[index].all())

    def validate_for(self, arch: Architecture) -> None:
        self._check_congruent(arch, "mask")


def apply_mask(params: Parameters, mask: SparsityMask) -> Parameters:
    """Zero the masked-out entries; idempotent."""
    if params.shapes() != mask.shapes():
        raise ShapeError(
            f"mask shapes {mask.shapes()} do not match parameter shapes {params.shapes()}"
        )
    return Parameters(np.where(m, w, 0.0) for w, m in zip(params.layers, mask.layers))


@dataclass
class ForwardTrace:
    """All intermediate states of a batched forward pass.

    ``acts[l]`` is the layer-``l`` input batch (``acts[0]`` is the network
    input), ``preacts[l]`` the pre-activation batch of hidden layer ``l``,
    and ``output`` the final affine output.  Shapes are ``(N, width)``.
    """

    acts: list[np.ndarray]
    preacts: list[np.ndarray]
    output: np.ndarray


def _augment(z: np.ndarray) -> np.ndarray:
    return np.concatenate([z, np.ones((z.shape[0], 1))], axis=1)


def _as_batch(arch: Architecture, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != arch.input_dim:
        raise ShapeError(f"input of shape {x.shape} incompatible with input_dim {arch.input_dim}")
    return x, single


def forward_trace(arch: Architecture, params: Parameters, x: np.ndarray) -> ForwardTrace:
    """Run the network on a batch and keep every intermediate state."""
    params.validate_for(arch)
    xb, _ = _as_batch(arch, x)
    acts = [xb]
    preacts = []
    h = xb
    for l in range(arch.depth):
        a = _augment(h) @ params[l]
        preacts.append(a)
        h = arch.activations[l](a)
        acts.append(h)
    output = _augment(h) @ params[arch.depth]
    return ForwardTrace(acts=acts, preacts=preacts, output=output)


def forward(arch: Architecture, params: Parameters, x: np.ndarray) -> np.ndarray:
    """Evaluate the network; a 1-d input gives a 1-d output."""
    xb, single = _as_batch(arch, x)
    out = forward_trace(arch, params, xb).output
    return out[0] if single else out


def unpack_data(data) -> tuple[np.ndarray, np.ndarray]:
    """Accept a Dataset-like object (``.inputs``/``.outputs``) or an (X, Y) pair."""
    if hasattr(data, "inputs") and hasattr(data, "outputs"):
        return np.asarray(data.inputs, dtype=float), np.asarray(data.outputs, dtype=float)
    x, y = data
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if y.ndim == 1:
        y = y[:, None]
    return x, y


def _backward_layer_grads(
    arch: Architecture, params: Parameters, trace: ForwardTrace, dout: np.ndarray
) -> list[np.ndarray]:
    """Accumulated weight gradients from output-side sensitivities ``dout`` (N, d_o)."""
    grads: list[np.ndarray | None] = [None] * arch.n_layers
    up = dout
    for l in range(arch.depth, -1, -1):
        zin = _augment(trace.acts[l])
        grads[l] = zin.T @ up
        if l > 0:
            up = (up @ params[l][:-1, :].T) * arch.activations[l - 1].derivative(
                trace.preacts[l - 1]
            )
    return grads  # type: ignore[return-value]


def grad_neg_log_posterior(
    arch: Architecture,
    params: Parameters,
    data,
    sigma,
    prior_kind: str = "gaussian",
    mask: SparsityMask | None = None,
    prior_mean: Parameters | None = None,
    beta: Sequence[float] | None = None,
) -> np.ndarray:
    """Gradient of the negative log posterior in the flat parameter layout.

    ``sigma`` supplies the per-layer prior scales and the noise scale (see
    :class:`opalsurrogate.laplace.InferenceHyperParams`).  With the
    ``"laplace"`` prior the subgradient of ``|t|`` at 0 is taken as 0 and the
    per-layer scale defaults to ``sigma_pr / sqrt(2)`` (variance-matched)
    unless ``beta`` is given.  Masked entries are fixed at zero, so their
    gradient components are reported as 0.
    """
    params.validate_for(arch)
    x, y = unpack_data(data)
    sigma_pr, sigma_noise = _unpack_sigma(sigma, arch)

    if x.shape[0] > 0:
        trace = forward_trace(arch, params, x)
        if y.shape != trace.output.shape:
            raise ShapeError(f"outputs of shape {y.shape} do not match predictions {trace.output.shape}")
        resid = trace.output - y
        grads = _backward_layer_grads(arch, params, trace, resid / sigma_noise**2)
    else:
        grads = [np.zeros(s) for s in arch.layer_shapes]

    if prior_kind == "gaussian":
        for l in range(arch.n_layers):
            centred = params[l] - (prior_mean[l] if prior_mean is not None else 0.0)
            grads[l] = grads[l] + centred / sigma_pr[l] ** 2
    elif prior_kind == "laplace":
        scales = _laplace_scales(sigma_pr, beta)
        for l in range(arch.n_layers):
            centred = params[l] - (prior_mean[l] if prior_mean is not None else 0.0)
            grads[l] = grads[l] + np.sign(centred) / scales[l]
    else:
        raise ValueError(f"unknown prior kind {prior_kind!r}")

    if mask is not None:
        mask.validate_for(arch)
        grads = [np.where(m, g, 0.0) for g, m in zip(grads, mask.layers)]
    return np.concatenate([g.reshape(-1) for g in grads])


def _unpack_sigma(sigma, arch: Architecture) -> tuple[np.ndarray, float]:
    """Normalize hyperparameters to (per-layer prior stds, noise std)."""
    if hasattr(sigma, "sigma_pr"):
        sigma_pr = np.asarray(sigma.sigma_pr, dtype=float)
        sigma_noise = float(sigma.sigma_noise)
    else:
        pr, sigma_noise = sigma
        sigma_pr = np.asarray(pr, dtype=float)
    if sigma_pr.ndim == 0:
        sigma_pr = np.full(arch.n_layers, float(sigma_pr))
    if sigma_pr.size != arch.n_layers:
        raise ShapeError(f"expected {arch.n_layers} prior scales, got {sigma_pr.size}")
    if not (np.all(sigma_pr > 0) and np.all(np.isfinite(sigma_pr))):
        raise ValueError("prior scales must be positive and finite")
    if not (sigma_noise > 0 and math.isfinite(sigma_noise)):
        raise ValueError("noise scale must be positive and finite")
    return sigma_pr, sigma_noise


def _laplace_scales(sigma_pr: np.ndarray, beta: Sequence[float] | float | None) -> np.ndarray:
    if beta is None:
        return sigma_pr / math.sqrt(2.0)
    b = np.asarray(beta, dtype=float)
    if b.ndim == 0:
        b = np.full(sigma_pr.size, float(b))
    if np.any(b <= 0):
        raise ValueError("laplace prior scale must be positive")
    return b


def jacobian(arch: Architecture, params: Parameters, x: np.ndarray) -> np.ndarray:
    """Output Jacobian with respect to the flat parameters, shape (d_o, P)."""
    xb, single = _as_batch(arch, x)
    if not single and xb.shape[0] != 1:
        raise ShapeError("jacobian expects a single input point")
    J = batched_jacobian(arch, params, xb)
    return J[0]


def batched_jacobian(arch: Architecture, params: Parameters, x: np.ndarray) -> np.ndarray:
    """Per-point Jacobians, shape (N, d_o, P); layout matches ``Parameters.flatten``."""
    params.validate_for(arch)
    xb, _ = _as_batch(arch, x)
    trace = forward_trace(arch, params, xb)
    sens = output_preact_sensitivities(arch, params, trace)
    n, d_o = xb.shape[0], arch.output_dim
    blocks = []
    for l in range(arch.n_layers):
        zin = _augment(trace.acts[l])  # (N, fan_in + 1)
        # d out / d W[l][j, i] = zin[:, j] * sens[l][:, :, i]
        block = np.einsum("nj,noi->noji", zin, sens[l])
        blocks.append(block.reshape(n, d_o, -1))
    return np.concatenate(blocks, axis=2)


def output_preact_sensitivities(
    arch: Architecture, params: Parameters, trace: ForwardTrace
) -> list[np.ndarray]:
    """d output / d pre-activation for every layer, each of shape (N, d_o, width).

    Entry ``l`` differentiates the network output with respect to the affine
    combination entering layer ``l``'s nonlinearity (for the output layer the
    affine output itself).
    """
    n = trace.output.shape[0]
    d_o = trace.output.shape[1]
    sens: list[np.ndarray] = [np.empty(0)] * arch.n_layers
    g = np.broadcast_to(np.eye(d_o), (n, d_o, d_o)).copy()
    sens[arch.depth] = g
    for l in range(arch.depth - 1, -1, -1):
        w_nb = params[l + 1][:-1, :]  # (width_l, width_{l+1})
        g = np.einsum("nok,jk->noj", g, w_nb)
        g = g * arch.activations[l].derivative(trace.preacts[l])[:, None, :]
        sens[l] = g
    return sens
