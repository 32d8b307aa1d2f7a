"""
RealNVP flow stack built from affine coupling layers.

Layer ``l`` passes one half of the frame through unchanged and affinely transforms the other
half with scale and translation networks of the passed half. Consecutive layers swap halves,
and two consecutive layers form a flow block.

Normalizing direction of one layer (data -> latent)::

    y_a = x_a
    y_b = (x_b - t(x_a)) * exp(-s(x_a))         log|det| = -sum(s(x_a))

Generating direction::

    x_b = y_b * exp(s(y_a)) + t(y_a)
"""

from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from flowhmm.exceptions import ConfigurationError
from flowhmm.networks import (
    FlowStack,
    MlpSpec,
    Params,
    check_finite,
    init_mlp,
    mlp_backward,
    mlp_forward,
)
from flowhmm.numerics import FloatArray, RngStream, make_rng


class NvpStack(FlowStack):
    """Alternating-parity stack of RealNVP coupling layers."""

    kind = "nvp"

    def __init__(
        self,
        dim: int,
        num_layers: int = 4,
        hidden: Optional[int] = None,
        params: Optional[Params] = None,
        rng: Optional[RngStream] = None,
        jitter: float = 0.0,
    ) -> None:
        if num_layers < 2 or num_layers % 2:
            raise ConfigurationError(
                f"RealNVP needs an even number (>= 2) of coupling layers, got {num_layers}"
            )
        self.num_layers = num_layers
        self.hidden = hidden if hidden is not None else 2 * dim
        self.split = dim // 2
        self._dim = dim
        self.layers = [self._layer_specs(layer) for layer in range(num_layers)]

        if params is None:
            rng = rng if rng is not None else make_rng(0)
            params = {}
            for s_spec, t_spec, _, _ in self.layers:
                init_mlp(params, s_spec, rng, jitter=jitter)
                init_mlp(params, t_spec, rng, jitter=jitter)
        super().__init__(dim, params)

    def _layer_specs(self, layer: int) -> Tuple[MlpSpec, MlpSpec, slice, slice]:
        dim, split = self._dim, self.split
        if layer % 2 == 0:
            passed, transformed = slice(0, split), slice(split, dim)
        else:
            passed, transformed = slice(split, dim), slice(0, split)
        in_dim = passed.stop - passed.start
        out_dim = transformed.stop - transformed.start
        s_spec = MlpSpec(f"layer{layer}.s", in_dim, self.hidden, out_dim, out_tanh=True)
        t_spec = MlpSpec(f"layer{layer}.t", in_dim, self.hidden, out_dim, out_tanh=False)
        return s_spec, t_spec, passed, transformed

    def _forward_cached(self, x: FloatArray) -> Tuple[FloatArray, FloatArray, List[Any]]:
        h = x
        log_det = np.zeros(x.shape[0])
        caches = []
        for layer, (s_spec, t_spec, passed, transformed) in enumerate(self.layers):
            x_a = h[:, passed]
            scale, s_cache = mlp_forward(self.params, s_spec, x_a)
            shift, t_cache = mlp_forward(self.params, t_spec, x_a)
            y_b = (h[:, transformed] - shift) * np.exp(-scale)
            out = h.copy()
            out[:, transformed] = y_b
            check_finite(out, "activation in normalizing direction", layer)
            log_det = log_det - scale.sum(axis=1)
            caches.append((s_cache, t_cache, y_b, scale))
            h = out
        return h, log_det, caches

    def _backward_layers(
        self, caches: List[Any], grad_z: FloatArray, weights: FloatArray, grads: Params
    ) -> None:
        grad = grad_z
        for layer in range(self.num_layers - 1, -1, -1):
            s_spec, t_spec, passed, transformed = self.layers[layer]
            s_cache, t_cache, y_b, scale = caches[layer]
            inv_scale = np.exp(-scale)
            grad_yb = grad[:, transformed]

            grad_shift = -grad_yb * inv_scale
            grad_scale = -grad_yb * y_b - weights[:, None]
            grad_xa = (
                grad[:, passed]
                + mlp_backward(self.params, s_spec, s_cache, grad_scale, grads)
                + mlp_backward(self.params, t_spec, t_cache, grad_shift, grads)
            )

            new_grad = np.empty_like(grad)
            new_grad[:, passed] = grad_xa
            new_grad[:, transformed] = grad_yb * inv_scale
            grad = new_grad

    def _inverse_batch(self, z: FloatArray) -> FloatArray:
        h = z.copy()
        for layer in range(self.num_layers - 1, -1, -1):
            s_spec, t_spec, passed, transformed = self.layers[layer]
            y_a = h[:, passed]
            scale, _ = mlp_forward(self.params, s_spec, y_a)
            shift, _ = mlp_forward(self.params, t_spec, y_a)
            h[:, transformed] = h[:, transformed] * np.exp(scale) + shift
            check_finite(h, "activation in generating direction", layer)
        return h

    def config(self) -> Dict[str, Any]:
        return {"dim": self.dim, "num_layers": self.num_layers, "hidden": self.hidden}

    def copy(self) -> "NvpStack":
        return NvpStack(
            self.dim,
            num_layers=self.num_layers,
            hidden=self.hidden,
            params={name: value.copy() for name, value in self.params.items()},
        )
