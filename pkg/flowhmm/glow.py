"""
Single-scale Glow flow stack.

Each flow step composes, in the normalizing direction (data -> latent):

1. activation normalization  ``h = (x - bias) * exp(logs)``          log|det| = sum(logs)
2. invertible 1x1 convolution ``h' = W h``                           log|det| = log|det W|
3. affine coupling            ``y_a = h'_a * exp(log_sigma(h'_b)) + m(h'_b)``, ``y_b = h'_b``
                                                                     log|det| = sum(log_sigma)

Frames are treated as D channels at a single position. The coupling network is weight
normalized, and its hidden activations are optionally divided by their Euclidean norm.
"""

from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt
from scipy.linalg import lu_factor, lu_solve

from flowhmm.exceptions import ConfigurationError, DataError, SingularMatrixError
from flowhmm.logger import get_logger
from flowhmm.networks import (
    FlowStack,
    MlpSpec,
    Params,
    as_batch,
    check_finite,
    init_mlp,
    mlp_backward,
    mlp_forward,
)
from flowhmm.numerics import FloatArray, RngStream, make_rng

logger = get_logger("glow")

STD_FLOOR = 1e-6
SINGULAR_DET = 1e-12


def random_rotation(dim: int, rng: RngStream) -> FloatArray:
    """Orthogonal matrix from the QR decomposition of a Gaussian matrix."""
    q, r = np.linalg.qr(rng.standard_normal((dim, dim)))
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return np.ascontiguousarray(q * signs[None, :])


class GlowStack(FlowStack):
    """K Glow flow steps (actnorm, invertible 1x1 convolution, affine coupling)."""

    kind = "glow"

    def __init__(
        self,
        dim: int,
        num_steps: int = 12,
        hidden: Optional[int] = None,
        params: Optional[Params] = None,
        rng: Optional[RngStream] = None,
        jitter: float = 0.0,
        act_norm: bool = True,
        initialized: Optional[Sequence[bool]] = None,
        det_warning_threshold: float = 1e-6,
    ) -> None:
        if num_steps < 1:
            raise ConfigurationError(f"Glow needs at least one flow step, got {num_steps}")
        self.num_steps = num_steps
        self.hidden = hidden if hidden is not None else 2 * dim
        self.act_norm = act_norm
        self.det_warning_threshold = det_warning_threshold
        # x_a takes the first ceil(D/2) dims
        self.split = (dim + 1) // 2
        self.nets = [
            MlpSpec(
                f"step{k}.coupling",
                dim - self.split,
                self.hidden,
                2 * self.split,
                weight_norm=True,
                act_norm=act_norm,
            )
            for k in range(num_steps)
        ]

        if params is None:
            rng = rng if rng is not None else make_rng(0)
            params = {}
            for k, spec in enumerate(self.nets):
                params[f"step{k}.actnorm.bias"] = np.zeros(dim)
                params[f"step{k}.actnorm.logs"] = np.zeros(dim)
                params[f"step{k}.invconv.weight"] = random_rotation(dim, rng)
                init_mlp(params, spec, rng, jitter=jitter)
        self.initialized = (
            [bool(flag) for flag in initialized] if initialized is not None else [False] * num_steps
        )
        if len(self.initialized) != num_steps:
            raise ConfigurationError("One actnorm initialization flag is needed per flow step")
        self._warned_steps: set = set()
        super().__init__(dim, params)

    @classmethod
    def identity(
        cls,
        dim: int,
        num_steps: int = 12,
        hidden: Optional[int] = None,
        rng: Optional[RngStream] = None,
        jitter: float = 0.0,
        act_norm: bool = True,
    ) -> "GlowStack":
        """Stack computing the identity map: ``W = I``, zero actnorm, zero coupling output."""
        stack = cls(dim, num_steps, hidden, rng=rng, jitter=jitter, act_norm=act_norm)
        for k in range(num_steps):
            stack.params[f"step{k}.invconv.weight"] = np.eye(dim)
        stack.initialized = [True] * num_steps
        return stack

    # Activation normalization ---------------------------------------------------------

    @property
    def is_initialized(self) -> bool:
        return all(self.initialized)

    def actnorm_init(self, step: int, batch: npt.ArrayLike) -> None:
        """
        Data-dependent initialization of one actnorm layer.

        ``batch`` holds the activations entering the step. Afterwards the actnorm output on
        that batch has zero mean and unit (population) standard deviation per dimension.
        """
        if self.initialized[step]:
            raise ConfigurationError(f"Actnorm of flow step {step} is already initialized")
        frames, _ = as_batch(batch, self.dim)
        if frames.shape[0] == 0:
            raise DataError("Cannot initialize actnorm from an empty batch")
        std = np.maximum(frames.std(axis=0), STD_FLOOR)
        self.params[f"step{step}.actnorm.bias"] = frames.mean(axis=0)
        self.params[f"step{step}.actnorm.logs"] = -np.log(std)
        self.initialized[step] = True

    def initialize(self, batch: npt.ArrayLike) -> None:
        """Initialize every actnorm in order, feeding ``batch`` through the earlier steps."""
        h, _ = as_batch(batch, self.dim)
        for k in range(self.num_steps):
            self.actnorm_init(k, h)
            h, _, _ = self._step_forward(k, h)

    # Invertible convolution -----------------------------------------------------------

    def _checked_log_det(self, step: int) -> float:
        weight = self.params[f"step{step}.invconv.weight"]
        sign, log_abs = np.linalg.slogdet(weight)
        if sign == 0 or not np.isfinite(log_abs) or log_abs < np.log(SINGULAR_DET):
            raise SingularMatrixError("Invertible 1x1 convolution is singular", layer=step)
        if log_abs < np.log(self.det_warning_threshold) and step not in self._warned_steps:
            self._warned_steps.add(step)
            logger.warning(
                f"|det W| of flow step {step} fell to {np.exp(log_abs):.3e}",
                extra={"error_type": "near_singular"},
            )
        return float(log_abs)

    def min_abs_det(self) -> float:
        """Smallest ``|det W|`` over the flow steps."""
        return float(
            min(
                abs(np.linalg.det(self.params[f"step{k}.invconv.weight"]))
                for k in range(self.num_steps)
            )
        )

    # Passes ---------------------------------------------------------------------------

    def _step_forward(self, step: int, x: FloatArray) -> Tuple[FloatArray, FloatArray, Any]:
        bias = self.params[f"step{step}.actnorm.bias"]
        logs = self.params[f"step{step}.actnorm.logs"]
        weight = self.params[f"step{step}.invconv.weight"]

        normed = (x - bias) * np.exp(logs)
        mixed = normed @ weight.T
        x_a, x_b = mixed[:, : self.split], mixed[:, self.split :]
        out, net_cache = mlp_forward(self.params, self.nets[step], x_b)
        log_sigma = np.tanh(out[:, : self.split])
        y = np.concatenate([x_a * np.exp(log_sigma) + out[:, self.split :], x_b], axis=1)

        log_det = logs.sum() + self._checked_log_det(step) + log_sigma.sum(axis=1)
        check_finite(y, "activation in normalizing direction", step)
        return y, log_det, (normed, x_a, log_sigma, net_cache)

    def _forward_cached(self, x: FloatArray) -> Tuple[FloatArray, FloatArray, List[Any]]:
        if not self.is_initialized:
            raise ConfigurationError("Glow actnorm layers must be initialized before evaluation")
        h = x
        log_det = np.zeros(x.shape[0])
        caches = []
        for k in range(self.num_steps):
            h, step_log_det, cache = self._step_forward(k, h)
            log_det = log_det + step_log_det
            caches.append(cache)
        return h, log_det, caches

    def _backward_layers(
        self, caches: List[Any], grad_z: FloatArray, weights: FloatArray, grads: Params
    ) -> None:
        total_weight = float(weights.sum())
        grad = grad_z
        for k in range(self.num_steps - 1, -1, -1):
            normed, x_a, log_sigma, net_cache = caches[k]
            logs = self.params[f"step{k}.actnorm.logs"]
            weight = self.params[f"step{k}.invconv.weight"]

            # Coupling
            grad_ya = grad[:, : self.split]
            sigma = np.exp(log_sigma)
            grad_log_sigma = grad_ya * x_a * sigma + weights[:, None]
            grad_out = np.concatenate(
                [grad_log_sigma * (1.0 - log_sigma * log_sigma), grad_ya], axis=1
            )
            grad_xb = grad[:, self.split :] + mlp_backward(
                self.params, self.nets[k], net_cache, grad_out, grads
            )
            grad_mixed = np.concatenate([grad_ya * sigma, grad_xb], axis=1)

            # Invertible 1x1 convolution; d log|det W| / dW = W^{-T}
            lu = lu_factor(weight)
            inv_transpose = lu_solve(lu, np.eye(self.dim), trans=1)
            grads[f"step{k}.invconv.weight"] += grad_mixed.T @ normed + total_weight * inv_transpose
            grad_normed = grad_mixed @ weight

            # Activation normalization
            scale = np.exp(logs)
            grads[f"step{k}.actnorm.bias"] += -np.sum(grad_normed * scale, axis=0)
            grads[f"step{k}.actnorm.logs"] += np.sum(grad_normed * normed, axis=0) + total_weight
            grad = grad_normed * scale

    def _inverse_batch(self, z: FloatArray) -> FloatArray:
        if not self.is_initialized:
            raise ConfigurationError("Glow actnorm layers must be initialized before evaluation")
        h = z
        for k in range(self.num_steps - 1, -1, -1):
            self._checked_log_det(k)
            y_a, y_b = h[:, : self.split], h[:, self.split :]
            out, _ = mlp_forward(self.params, self.nets[k], y_b)
            log_sigma = np.tanh(out[:, : self.split])
            mixed = np.concatenate([(y_a - out[:, self.split :]) * np.exp(-log_sigma), y_b], axis=1)

            lu = lu_factor(self.params[f"step{k}.invconv.weight"])
            normed = lu_solve(lu, mixed.T).T

            h = normed * np.exp(-self.params[f"step{k}.actnorm.logs"])
            h = h + self.params[f"step{k}.actnorm.bias"]
            check_finite(h, "activation in generating direction", k)
        return np.ascontiguousarray(h)

    def config(self) -> Dict[str, Any]:
        return {
            "dim": self.dim,
            "num_steps": self.num_steps,
            "hidden": self.hidden,
            "act_norm": self.act_norm,
            "initialized": list(self.initialized),
            "det_warning_threshold": self.det_warning_threshold,
        }

    def copy(self) -> "GlowStack":
        return GlowStack(
            self.dim,
            num_steps=self.num_steps,
            hidden=self.hidden,
            params={name: value.copy() for name, value in self.params.items()},
            act_norm=self.act_norm,
            initialized=self.initialized,
            det_warning_threshold=self.det_warning_threshold,
        )
