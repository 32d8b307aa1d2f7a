"""
Diagonal-covariance Gaussian mixture emissions (the GMM-HMM baseline).
"""

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import numpy.typing as npt

from flowhmm.exceptions import DataError, ShapeError
from flowhmm.hmm import PosteriorStats, stack_stats, uniform_segmentation
from flowhmm.logger import get_logger, log_degenerate_update
from flowhmm.numerics import LOG_2PI, FloatArray, RngStream, log_sum_exp

logger = get_logger("gmm")

VARIANCE_FLOOR = 1e-6
MIN_COMPONENT_MASS = 1e-8


@dataclass
class GmmEmission:
    """Per-state Gaussian mixtures with diagonal covariances."""

    log_weights: FloatArray  # S x K
    means: FloatArray  # S x K x D
    log_variances: FloatArray  # S x K x D

    kind = "gmm"

    def __post_init__(self) -> None:
        self.log_weights = np.atleast_2d(np.asarray(self.log_weights, dtype=np.float64))
        self.means = np.asarray(self.means, dtype=np.float64)
        self.log_variances = np.asarray(self.log_variances, dtype=np.float64)
        S, K = self.log_weights.shape
        if self.means.ndim != 3 or self.means.shape[:2] != (S, K):
            raise ShapeError(f"means shape {self.means.shape} does not match weights {(S, K)}")
        if self.log_variances.shape != self.means.shape:
            raise ShapeError("log_variances and means shapes differ")
        if np.any(np.abs(np.exp(self.log_weights).sum(axis=1) - 1.0) > 1e-10):
            raise ValueError("Mixture weights do not sum to 1")
        self.log_variances = np.maximum(self.log_variances, np.log(VARIANCE_FLOOR))

    @property
    def num_states(self) -> int:
        return int(self.log_weights.shape[0])

    @property
    def num_mix(self) -> int:
        return int(self.log_weights.shape[1])

    @property
    def dim(self) -> int:
        return int(self.means.shape[2])

    @property
    def variances(self) -> FloatArray:
        return np.exp(self.log_variances)

    @classmethod
    def unit(cls, num_states: int, dim: int, num_mix: int = 1) -> "GmmEmission":
        """Every component a standard normal; mostly useful as a reference model."""
        return cls(
            log_weights=np.full((num_states, num_mix), -np.log(num_mix)),
            means=np.zeros((num_states, num_mix, dim)),
            log_variances=np.zeros((num_states, num_mix, dim)),
        )

    def component_log_densities(self, seq: FloatArray) -> FloatArray:
        """``T x S x K`` of ``log pi_{s,k} + log N(x_t; mu_{s,k}, diag var_{s,k})``."""
        frames = np.atleast_2d(np.asarray(seq, dtype=np.float64))
        if frames.shape[1] != self.dim:
            raise ShapeError(f"Frame dimension {frames.shape[1]} does not match GMM ({self.dim})")
        diff = frames[:, None, None, :] - self.means[None]
        mahalanobis = np.sum(diff * diff * np.exp(-self.log_variances)[None], axis=3)
        log_norm = -0.5 * (self.dim * LOG_2PI + np.sum(self.log_variances, axis=2))
        return self.log_weights[None] + log_norm[None] - 0.5 * mahalanobis

    def log_pdf(self, state: int, x: npt.ArrayLike) -> float:
        """Mixture log-density of one frame under ``state``."""
        vector = np.asarray(x, dtype=np.float64)
        if vector.ndim != 1 or vector.shape[0] != self.dim:
            raise ShapeError(f"Expected a vector of length {self.dim}, got shape {vector.shape}")
        return float(log_sum_exp(self.component_log_densities(vector[None])[0, state]))

    def sample(self, state: int, rng: RngStream, size: Optional[int] = None) -> FloatArray:
        """Draw a component from the state's weights, then a Gaussian frame."""
        weights = np.exp(self.log_weights[state])
        weights /= weights.sum()
        count = 1 if size is None else size
        components = rng.choice(self.num_mix, size=count, p=weights)
        noise = rng.standard_normal((count, self.dim))
        frames = self.means[state, components] + np.exp(
            0.5 * self.log_variances[state, components]
        ) * noise
        return frames[0] if size is None else frames


def gmm_m_step(
    stats: Sequence[PosteriorStats],
    sequences: Sequence[FloatArray],
    previous: GmmEmission,
) -> GmmEmission:
    """
    Closed-form EM update of weights, means and diagonal variances.

    Components whose total responsibility is below 1e-8 keep their previous mean and
    variance; states without any mass keep their previous weights. Both are reported.

    Args:
        stats: E-step statistics, one per sequence
        sequences: The matching feature sequences
        previous: Emission model the statistics were computed under

    Returns:
        Updated GmmEmission
    """
    if len(stats) != len(sequences):
        raise DataError(f"{len(stats)} statistics for {len(sequences)} sequences")
    frames = np.concatenate([np.atleast_2d(seq) for seq in sequences], axis=0)
    resp = np.exp(stack_stats(stats))  # N x S x K
    if resp.shape[0] != frames.shape[0]:
        raise ShapeError("Responsibilities do not cover every frame")

    mass = resp.sum(axis=0)  # S x K
    safe_mass = np.where(mass > 0, mass, 1.0)
    means = np.einsum("nsk,nd->skd", resp, frames) / safe_mass[..., None]
    diff = frames[:, None, None, :] - means[None]
    variances = np.einsum("nsk,nskd->skd", resp, diff * diff) / safe_mass[..., None]
    log_variances = np.log(np.maximum(variances, VARIANCE_FLOOR))

    starved = mass < MIN_COMPONENT_MASS
    if np.any(starved):
        means[starved] = previous.means[starved]
        log_variances[starved] = previous.log_variances[starved]
        log_degenerate_update(logger, "GMM components", [tuple(i) for i in np.argwhere(starved)])

    state_mass = mass.sum(axis=1)
    log_weights = previous.log_weights.copy()
    alive = state_mass > 0
    with np.errstate(divide="ignore"):
        log_weights[alive] = np.log(mass[alive] / state_mass[alive, None])
    log_degenerate_update(logger, "GMM states", np.flatnonzero(~alive).tolist())

    return GmmEmission(log_weights=log_weights, means=means, log_variances=log_variances)


def init_gmm(
    sequences: Sequence[FloatArray], num_states: int, num_mix: int, rng: RngStream
) -> GmmEmission:
    """
    Initialize a GMM emission from data.

    Means are randomly chosen training frames from each state's flat-start segment,
    variances the global per-dimension variance, weights uniform.
    """
    if not sequences:
        raise DataError("Cannot initialize a GMM without data")
    frames = np.concatenate([np.atleast_2d(seq) for seq in sequences], axis=0)
    dim = frames.shape[1]
    global_var = np.maximum(frames.var(axis=0), VARIANCE_FLOOR)
    alignment = np.concatenate([uniform_segmentation(len(seq), num_states) for seq in sequences])

    means = np.empty((num_states, num_mix, dim))
    for state in range(num_states):
        pool = frames[alignment == state]
        if pool.shape[0] == 0:
            pool = frames
        picks = rng.choice(pool.shape[0], size=num_mix, replace=pool.shape[0] < num_mix)
        means[state] = pool[picks]

    return GmmEmission(
        log_weights=np.full((num_states, num_mix), -np.log(num_mix)),
        means=means,
        log_variances=np.broadcast_to(np.log(global_var), (num_states, num_mix, dim)).copy(),
    )
