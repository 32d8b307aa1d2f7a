"""
Shallow coupling networks and the common flow-stack interface.

Coupling networks are two-layer perceptrons with hand-written reverse accumulation. Parameters
live in a flat ``{name: array}`` dictionary owned by the flow stack, which keeps optimizer
state, gradient checking and serialization uniform across flow kinds.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import numpy.typing as npt

from flowhmm.exceptions import NumericalError, ShapeError
from flowhmm.numerics import (
    FloatArray,
    RngStream,
    flatten_params,
    std_normal_log_pdf,
    unflatten_params,
)

Params = Dict[str, FloatArray]

# Smoothing inside the Euclidean activation norm; keeps the map differentiable at h = 0
ACT_NORM_EPS = 1e-6


@dataclass(frozen=True)
class MlpSpec:
    """Shape and options of one coupling network."""

    name: str
    in_dim: int
    hidden: int
    out_dim: int
    out_tanh: bool = False
    weight_norm: bool = False
    act_norm: bool = False


def init_dense(
    params: Params,
    name: str,
    fan_in: int,
    fan_out: int,
    rng: RngStream,
    zero: bool = False,
    weight_norm: bool = False,
) -> None:
    """
    Add one dense layer to ``params``.

    Plain layers store ``{name}.w`` (fan_in x fan_out); weight-normalized layers store a
    direction ``{name}.v`` (fan_out x fan_in) and a magnitude ``{name}.g`` per output unit.
    ``zero`` makes the layer output exactly zero (``w = 0`` or ``g = 0``).
    """
    limit = 1.0 / np.sqrt(max(fan_in, 1))
    if weight_norm:
        direction = rng.uniform(-limit, limit, size=(fan_out, fan_in))
        params[f"{name}.v"] = direction
        params[f"{name}.g"] = (
            np.zeros(fan_out) if zero else np.sqrt(np.sum(direction * direction, axis=1))
        )
    else:
        params[f"{name}.w"] = (
            np.zeros((fan_in, fan_out))
            if zero
            else rng.uniform(-limit, limit, size=(fan_in, fan_out))
        )
    params[f"{name}.b"] = np.zeros(fan_out)


def effective_weight(params: Params, name: str) -> FloatArray:
    """Weight matrix (fan_in x fan_out) of a dense layer, reparameterized if needed."""
    plain = params.get(f"{name}.w")
    if plain is not None:
        return plain
    direction = params[f"{name}.v"]
    magnitude = params[f"{name}.g"]
    norms = np.sqrt(np.sum(direction * direction, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        return ((magnitude / norms)[:, None] * direction).T


def _accumulate_dense(params: Params, grads: Params, name: str, grad_weight: FloatArray) -> None:
    if f"{name}.w" in params:
        grads[f"{name}.w"] += grad_weight
        return
    direction = params[f"{name}.v"]
    magnitude = params[f"{name}.g"]
    grad_rows = grad_weight.T
    norms = np.sqrt(np.sum(direction * direction, axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        unit = direction / norms[:, None]
        grad_g = np.sum(grad_rows * unit, axis=1)
        grad_v = (magnitude / norms)[:, None] * (grad_rows - grad_g[:, None] * unit)
    grads[f"{name}.g"] += grad_g
    grads[f"{name}.v"] += grad_v


def init_mlp(params: Params, spec: MlpSpec, rng: RngStream, jitter: float = 0.0) -> None:
    """Hidden layer with fan-in scaled uniform weights, zero output layer."""
    init_dense(
        params, f"{spec.name}.l1", spec.in_dim, spec.hidden, rng, weight_norm=spec.weight_norm
    )
    if jitter > 0:
        key = f"{spec.name}.l1.v" if spec.weight_norm else f"{spec.name}.l1.w"
        params[key] = params[key] + jitter * rng.standard_normal(params[key].shape)
    init_dense(
        params,
        f"{spec.name}.l2",
        spec.hidden,
        spec.out_dim,
        rng,
        zero=True,
        weight_norm=spec.weight_norm,
    )


def mlp_forward(
    params: Params, spec: MlpSpec, x: FloatArray
) -> Tuple[FloatArray, Dict[str, Any]]:
    """Evaluate a coupling network; returns the output and a cache for the backward pass."""
    w1 = effective_weight(params, f"{spec.name}.l1")
    w2 = effective_weight(params, f"{spec.name}.l2")
    hidden = np.tanh(x @ w1 + params[f"{spec.name}.l1.b"])
    if spec.act_norm:
        radius = np.sqrt(np.sum(hidden * hidden, axis=1) + ACT_NORM_EPS)
        features = hidden / radius[:, None]
    else:
        radius = None
        features = hidden
    out = features @ w2 + params[f"{spec.name}.l2.b"]
    if spec.out_tanh:
        out = np.tanh(out)
    cache = {"x": x, "hidden": hidden, "radius": radius, "features": features, "out": out}
    cache["w1"], cache["w2"] = w1, w2
    return out, cache


def mlp_backward(
    params: Params, spec: MlpSpec, cache: Dict[str, Any], grad_out: FloatArray, grads: Params
) -> FloatArray:
    """Accumulate parameter gradients into ``grads``; returns the gradient w.r.t. the input."""
    out = cache["out"]
    grad_pre2 = grad_out * (1.0 - out * out) if spec.out_tanh else grad_out
    _accumulate_dense(params, grads, f"{spec.name}.l2", cache["features"].T @ grad_pre2)
    grads[f"{spec.name}.l2.b"] += grad_pre2.sum(axis=0)
    grad_features = grad_pre2 @ cache["w2"].T

    hidden = cache["hidden"]
    if spec.act_norm:
        radius = cache["radius"]
        projection = np.sum(hidden * grad_features, axis=1) / radius**3
        grad_hidden = grad_features / radius[:, None] - hidden * projection[:, None]
    else:
        grad_hidden = grad_features

    grad_pre1 = grad_hidden * (1.0 - hidden * hidden)
    _accumulate_dense(params, grads, f"{spec.name}.l1", cache["x"].T @ grad_pre1)
    grads[f"{spec.name}.l1.b"] += grad_pre1.sum(axis=0)
    return np.asarray(grad_pre1 @ cache["w1"].T)


def as_batch(x: npt.ArrayLike, dim: int) -> Tuple[FloatArray, bool]:
    """Promote a single vector to a one-row batch; remember whether it was a vector."""
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    batch = np.atleast_2d(arr)
    if batch.ndim != 2 or batch.shape[1] != dim:
        raise ShapeError(f"Expected vectors of dimension {dim}, got shape {arr.shape}")
    return batch, single


def check_finite(values: FloatArray, what: str, layer: int) -> None:
    """Raise NumericalError naming ``layer`` if ``values`` has a non-finite entry."""
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"Non-finite {what}", layer=layer)


class FlowStack(ABC):
    """
    Invertible map ``f`` from data to latent space with a standard-normal prior.

    ``forward`` is the normalizing direction (data -> latent) and returns the log-Jacobian
    determinant of ``f``; ``inverse`` is the generating direction.
    """

    kind: str = ""

    def __init__(self, dim: int, params: Params) -> None:
        if dim < 1:
            raise ShapeError(f"Flow dimension must be >= 1, got {dim}")
        self.dim = dim
        self.params = params

    # Subclass hooks -----------------------------------------------------------------

    @abstractmethod
    def _forward_cached(self, x: FloatArray) -> Tuple[FloatArray, FloatArray, List[Any]]:
        """Batch forward pass returning ``(z, log_det, caches)``."""

    @abstractmethod
    def _backward_layers(
        self, caches: List[Any], grad_z: FloatArray, weights: FloatArray, grads: Params
    ) -> None:
        """Reverse pass; ``weights`` scale each frame's log-det term."""

    @abstractmethod
    def _inverse_batch(self, z: FloatArray) -> FloatArray:
        """Batch generating direction."""

    @abstractmethod
    def config(self) -> Dict[str, Any]:
        """Hyperparameters needed to rebuild the stack around ``params``."""

    @abstractmethod
    def copy(self) -> "FlowStack":
        """Deep copy."""

    # Public API ---------------------------------------------------------------------

    def forward(self, x: npt.ArrayLike) -> Tuple[Any, Any]:
        """``z = f(x)`` and ``log|det df/dx|`` per frame."""
        batch, single = as_batch(x, self.dim)
        z, log_det, _ = self._forward_cached(batch)
        if single:
            return z[0], float(log_det[0])
        return z, log_det

    def inverse(self, z: npt.ArrayLike) -> FloatArray:
        """``x = f^{-1}(z)``."""
        batch, single = as_batch(z, self.dim)
        x = self._inverse_batch(batch)
        return x[0] if single else x

    def log_likelihood(self, x: npt.ArrayLike) -> Union[float, FloatArray]:
        """Exact log-density by change of variables: ``log N(f(x); 0, I) + log|det|``."""
        batch, single = as_batch(x, self.dim)
        z, log_det, _ = self._forward_cached(batch)
        result = std_normal_log_pdf(z) + log_det
        return float(result[0]) if single else result

    def backward(self, x: npt.ArrayLike, upstream_weight: npt.ArrayLike = 1.0) -> Params:
        """
        Gradient of ``sum_n w_n * log_likelihood(x_n)`` w.r.t. every parameter.

        Args:
            x: One frame or an ``N x D`` batch
            upstream_weight: Scalar or per-frame weights ``w_n``

        Returns:
            Dictionary of gradients keyed like ``params``
        """
        batch, _ = as_batch(x, self.dim)
        weights = np.broadcast_to(
            np.asarray(upstream_weight, dtype=np.float64), (batch.shape[0],)
        ).copy()
        grads = self.zero_grads()
        if not np.any(weights):
            return grads
        z, _, caches = self._forward_cached(batch)
        self._backward_layers(caches, -weights[:, None] * z, weights, grads)
        return grads

    def sample(self, rng: RngStream, size: Optional[int] = None) -> FloatArray:
        """Push standard-normal draws through the generating direction."""
        count = 1 if size is None else size
        x = self._inverse_batch(rng.standard_normal((count, self.dim)))
        return x[0] if size is None else x

    def zero_grads(self) -> Params:
        return {name: np.zeros_like(value) for name, value in self.params.items()}

    def parameter_vector(self) -> FloatArray:
        return flatten_params(self.params)

    def set_parameter_vector(self, vector: npt.ArrayLike) -> None:
        self.params = unflatten_params(vector, self.params)

    @property
    def num_parameters(self) -> int:
        return int(sum(value.size for value in self.params.values()))
