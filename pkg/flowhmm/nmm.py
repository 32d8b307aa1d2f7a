"""
Normalizing-flow mixture emissions.

State ``s`` emits ``p(x | s) = sum_k pi_{s,k} p_{s,k}(x)`` where every component density is a
flow stack with a standard-normal prior. All components of one emission share a flow kind.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
import numpy.typing as npt

from flowhmm.config import FlowConfig
from flowhmm.exceptions import ConfigurationError, NumericalError, ShapeError
from flowhmm.glow import GlowStack
from flowhmm.hmm import PosteriorStats, stack_stats
from flowhmm.logger import get_logger, log_degenerate_update
from flowhmm.networks import FlowStack
from flowhmm.numerics import FloatArray, RngStream, derive_rng, log_sum_exp
from flowhmm.realnvp import NvpStack

logger = get_logger("nmm")

FLOW_KINDS = ("nvp", "glow")


def build_flow(
    kind: str,
    dim: int,
    flow_config: FlowConfig,
    rng: Optional[RngStream] = None,
    identity: bool = False,
    det_warning_threshold: float = 1e-6,
) -> FlowStack:
    """Create one flow stack of ``kind`` with hidden-layer jitter from ``flow_config``."""
    hidden = flow_config.hidden_for(dim)
    jitter = flow_config.init_jitter if rng is not None else 0.0
    if kind == "nvp":
        return NvpStack(dim, flow_config.coupling_layers, hidden, rng=rng, jitter=jitter)
    if kind == "glow":
        if identity:
            return GlowStack.identity(
                dim,
                flow_config.flow_steps,
                hidden,
                rng=rng,
                jitter=jitter,
                act_norm=flow_config.activation_norm,
            )
        return GlowStack(
            dim,
            flow_config.flow_steps,
            hidden,
            rng=rng,
            jitter=jitter,
            act_norm=flow_config.activation_norm,
            det_warning_threshold=det_warning_threshold,
        )
    raise ConfigurationError(f"Unknown flow kind: {kind!r} (expected one of {FLOW_KINDS})")


@dataclass
class NmmEmission:
    """Per-state mixtures of flow densities."""

    log_weights: FloatArray  # S x K
    flows: List[List[FlowStack]]  # [state][component]
    flow_kind: str = field(default="nvp")

    def __post_init__(self) -> None:
        self.log_weights = np.atleast_2d(np.asarray(self.log_weights, dtype=np.float64))
        S, K = self.log_weights.shape
        if len(self.flows) != S or any(len(row) != K for row in self.flows):
            raise ShapeError(f"Expected {S} x {K} flow stacks")
        if self.flow_kind not in FLOW_KINDS:
            raise ConfigurationError(f"Unknown flow kind: {self.flow_kind!r}")
        kinds = {flow.kind for row in self.flows for flow in row}
        if kinds != {self.flow_kind}:
            raise ConfigurationError(
                f"All component flows must be {self.flow_kind!r}, found {sorted(kinds)}"
            )
        dims = {flow.dim for row in self.flows for flow in row}
        if len(dims) != 1:
            raise ShapeError(f"Component flows disagree on the feature dimension: {dims}")
        if np.any(np.abs(np.exp(self.log_weights).sum(axis=1) - 1.0) > 1e-12):
            raise ValueError("Mixture weights do not sum to 1")

    @property
    def kind(self) -> str:
        return self.flow_kind

    @property
    def num_states(self) -> int:
        return int(self.log_weights.shape[0])

    @property
    def num_mix(self) -> int:
        return int(self.log_weights.shape[1])

    @property
    def dim(self) -> int:
        return self.flows[0][0].dim

    def iter_flows(self):
        """Yield ``(state, component, flow)`` in row-major order."""
        for s, row in enumerate(self.flows):
            for k, flow in enumerate(row):
                yield s, k, flow

    @classmethod
    def create(
        cls,
        kind: str,
        num_states: int,
        num_mix: int,
        dim: int,
        flow_config: FlowConfig,
        seed: int = 0,
        key: Sequence[int] = (),
        det_warning_threshold: float = 1e-6,
    ) -> "NmmEmission":
        """
        Fresh emission with uniform weights.

        Each component draws its hidden-layer weights from its own stream derived from
        ``seed``, ``key`` and its position, so components start distinct while every flow
        output is still zero.
        """
        flows = [
            [
                build_flow(
                    kind,
                    dim,
                    flow_config,
                    rng=derive_rng(seed, *key, s, k),
                    det_warning_threshold=det_warning_threshold,
                )
                for k in range(num_mix)
            ]
            for s in range(num_states)
        ]
        return cls(np.full((num_states, num_mix), -np.log(num_mix)), flows, kind)

    @classmethod
    def identity(
        cls,
        kind: str,
        num_states: int,
        num_mix: int,
        dim: int,
        flow_config: Optional[FlowConfig] = None,
        log_weights: Optional[npt.ArrayLike] = None,
    ) -> "NmmEmission":
        """Every component an identity flow, i.e. a unit Gaussian."""
        flow_config = flow_config if flow_config is not None else FlowConfig()
        flows = [
            [build_flow(kind, dim, flow_config, identity=True) for _ in range(num_mix)]
            for _ in range(num_states)
        ]
        weights = (
            np.asarray(log_weights, dtype=np.float64)
            if log_weights is not None
            else np.full((num_states, num_mix), -np.log(num_mix))
        )
        return cls(weights, flows, kind)

    def copy(self) -> "NmmEmission":
        return NmmEmission(
            self.log_weights.copy(),
            [[flow.copy() for flow in row] for row in self.flows],
            self.flow_kind,
        )

    # Evaluation -----------------------------------------------------------------------

    def component_log_densities(self, seq: FloatArray) -> FloatArray:
        """``T x S x K`` of ``log pi_{s,k} + log p_{s,k}(x_t)``."""
        frames = np.atleast_2d(np.asarray(seq, dtype=np.float64))
        if frames.shape[1] != self.dim:
            raise ShapeError(f"Frame dimension {frames.shape[1]} does not match NMM ({self.dim})")
        out = np.empty((frames.shape[0], self.num_states, self.num_mix))
        for s, k, flow in self.iter_flows():
            try:
                values = np.asarray(flow.log_likelihood(frames))
            except NumericalError as e:
                raise type(e)(str(e), state=s, component=k) from e
            bad = np.flatnonzero(~np.isfinite(values))
            if bad.size:
                raise NumericalError(
                    "Non-finite flow log-likelihood", state=s, component=k, frame=int(bad[0])
                )
            out[:, s, k] = self.log_weights[s, k] + values
        return out

    def _component_values(self, state: int, x: npt.ArrayLike) -> FloatArray:
        vector = np.asarray(x, dtype=np.float64)
        if vector.ndim != 1 or vector.shape[0] != self.dim:
            raise ShapeError(f"Expected a vector of length {self.dim}, got shape {vector.shape}")
        return np.array(
            [
                self.log_weights[state, k] + flow.log_likelihood(vector)
                for k, flow in enumerate(self.flows[state])
            ]
        )

    def log_pdf(self, state: int, x: npt.ArrayLike) -> float:
        """Mixture log-density of one frame under ``state``."""
        return float(log_sum_exp(self._component_values(state, x)))

    def component_resp(self, state: int, x: npt.ArrayLike) -> FloatArray:
        """Log posterior over the components of ``state`` given one frame."""
        values = self._component_values(state, x)
        return np.asarray(values - log_sum_exp(values))

    def sample(self, state: int, rng: RngStream, size: Optional[int] = None) -> FloatArray:
        """Draw a component from ``pi_s``, then push a standard-normal draw through its flow."""
        weights = np.exp(self.log_weights[state])
        weights /= weights.sum()
        count = 1 if size is None else size
        components = rng.choice(self.num_mix, size=count, p=weights)
        frames = np.empty((count, self.dim))
        for n, k in enumerate(components):
            frames[n] = self.flows[state][k].sample(rng)
        return frames[0] if size is None else frames

    # Glow data-dependent initialization -----------------------------------------------

    def initialize_actnorm(self, frames_per_state: Sequence[FloatArray]) -> None:
        """Initialize every Glow component of state ``s`` from ``frames_per_state[s]``."""
        if self.flow_kind != "glow":
            return
        if len(frames_per_state) != self.num_states:
            raise ShapeError("One frame batch is needed per state")
        for s, k, flow in self.iter_flows():
            if isinstance(flow, GlowStack) and not flow.is_initialized:
                flow.initialize(frames_per_state[s])
                logger.debug(f"Initialized actnorm of state {s} component {k}")

    def min_abs_det(self) -> Optional[float]:
        """Smallest ``|det W|`` over Glow components (None for RealNVP)."""
        if self.flow_kind != "glow":
            return None
        return min(
            flow.min_abs_det() for _, _, flow in self.iter_flows() if isinstance(flow, GlowStack)
        )


def update_pi(
    stats: Sequence[PosteriorStats], previous: Optional[npt.ArrayLike] = None
) -> FloatArray:
    """
    Closed-form update of the mixture weights from component responsibilities.

    States without posterior mass keep their previous weights (uniform when no previous
    weights are given) and are reported.

    Returns:
        New ``S x K`` log-weights
    """
    resp = np.exp(stack_stats(stats))  # N x S x K
    mass = resp.sum(axis=0)
    state_mass = mass.sum(axis=1)
    S, K = mass.shape
    log_weights = (
        np.array(previous, dtype=np.float64)
        if previous is not None
        else np.full((S, K), -np.log(K))
    )
    alive = state_mass > 0
    with np.errstate(divide="ignore"):
        log_weights[alive] = np.log(mass[alive] / state_mass[alive, None])
    log_degenerate_update(logger, "mixture weights of states", np.flatnonzero(~alive).tolist())
    return log_weights
