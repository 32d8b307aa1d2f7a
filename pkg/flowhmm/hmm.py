"""
Markov-chain machinery shared by the GMM-HMM and the flow-mixture HMM.

All recursions run in the log domain (no scaling coefficients). Pairwise state posteriors are
kept summed over time, since no update needs them per frame.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Sequence

import numpy as np
import numpy.typing as npt

from flowhmm.exceptions import DataError, NumericalError, ShapeError
from flowhmm.logger import get_logger, log_degenerate_update
from flowhmm.numerics import FloatArray, RngStream, log_sum_exp

logger = get_logger("hmm")

# Mass below which a transition row counts as unvisited
ZERO_MASS = 1e-300

# Allowed deviation of a probability vector sum from 1
STOCHASTIC_TOL = 1e-12


class EmissionModel(Protocol):
    """State-conditional observation densities of an HMM."""

    kind: str

    @property
    def num_states(self) -> int: ...

    @property
    def num_mix(self) -> int: ...

    @property
    def dim(self) -> int: ...

    def component_log_densities(self, seq: FloatArray) -> FloatArray:
        """``T x S x K`` array of ``log pi_{s,k} + log p_{s,k}(x_t)``."""
        ...

    def sample(self, state: int, rng: RngStream, size: Optional[int] = None) -> FloatArray:
        """Draw one frame (or ``size`` frames) from the emission of ``state``."""
        ...


def _log(values: npt.ArrayLike) -> FloatArray:
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(values, dtype=np.float64))


@dataclass(frozen=True)
class MarkovChain:
    """Initial distribution and transition matrix, both stored as logs."""

    log_q: FloatArray
    log_A: FloatArray

    def __post_init__(self) -> None:
        log_q = np.asarray(self.log_q, dtype=np.float64)
        log_A = np.atleast_2d(np.asarray(self.log_A, dtype=np.float64))
        num_states = log_q.shape[0]
        if log_q.ndim != 1 or log_A.shape != (num_states, num_states):
            raise ShapeError(f"log_q {log_q.shape} and log_A {log_A.shape} are inconsistent")
        if np.any(np.isnan(log_q)) or np.any(np.isnan(log_A)):
            raise NumericalError("Markov chain parameters contain NaN")
        if np.any(log_q > 0) or np.any(log_A > 0):
            raise ValueError("Log probabilities must be <= 0")
        if abs(np.exp(log_q).sum() - 1.0) > STOCHASTIC_TOL:
            raise ValueError("Initial distribution does not sum to 1")
        if np.any(np.abs(np.exp(log_A).sum(axis=1) - 1.0) > STOCHASTIC_TOL):
            raise ValueError("Transition rows do not sum to 1")
        object.__setattr__(self, "log_q", log_q)
        object.__setattr__(self, "log_A", log_A)

    @property
    def num_states(self) -> int:
        return int(self.log_q.shape[0])

    @property
    def q(self) -> FloatArray:
        return np.exp(self.log_q)

    @property
    def A(self) -> FloatArray:
        return np.exp(self.log_A)

    @classmethod
    def from_probs(cls, q: npt.ArrayLike, A: npt.ArrayLike) -> "MarkovChain":
        """Build a chain from linear-domain probabilities."""
        return cls(log_q=_log(q), log_A=_log(A))

    @classmethod
    def left_to_right(cls, num_states: int) -> "MarkovChain":
        """
        Standard initialization: start in the first state, upper-triangular transitions with
        uniform mass over the reachable states.
        """
        if num_states < 1:
            raise ValueError(f"num_states must be >= 1, got {num_states}")
        q = np.zeros(num_states)
        q[0] = 1.0
        A = np.triu(np.ones((num_states, num_states)))
        A /= A.sum(axis=1, keepdims=True)
        return cls.from_probs(q, A)


@dataclass(frozen=True)
class PosteriorStats:
    """E-step output for one sequence."""

    log_gamma: FloatArray  # T x S
    log_xi_sum: FloatArray  # S x S
    log_likelihood: float
    comp_gamma: FloatArray  # T x S x K

    @property
    def num_frames(self) -> int:
        return int(self.log_gamma.shape[0])


@dataclass
class HmmModel:
    """One class model: Markov chain plus per-state emission densities."""

    chain: MarkovChain
    emission: EmissionModel
    label: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.emission.kind

    @property
    def dim(self) -> int:
        return self.emission.dim

    def log_likelihood(self, seq: FloatArray) -> float:
        """Sequence log-likelihood ``log p(x | H)``."""
        emis, _ = emission_log_likelihood(self.emission, seq)
        return forward_log_likelihood(self.chain, emis)


def _as_sequence(seq: npt.ArrayLike, dim: int) -> FloatArray:
    frames = np.atleast_2d(np.asarray(seq, dtype=np.float64))
    if frames.shape[0] == 0:
        raise DataError("Sequence has no frames")
    if frames.shape[1] != dim:
        raise ShapeError(f"Sequence dimension {frames.shape[1]} does not match model ({dim})")
    return frames


def emission_log_likelihood(emission: EmissionModel, seq: npt.ArrayLike) -> tuple:
    """
    Evaluate emissions on a sequence.

    Returns:
        ``(emis, comp)`` where ``emis`` is ``T x S`` and ``comp`` is ``T x S x K``
    """
    frames = _as_sequence(seq, emission.dim)
    comp = emission.component_log_densities(frames)
    emis = np.asarray(log_sum_exp(comp, axis=2))
    return emis, comp


def _check_emissions(chain: MarkovChain, emis: FloatArray) -> FloatArray:
    emis = np.atleast_2d(np.asarray(emis, dtype=np.float64))
    if emis.shape[0] == 0:
        raise DataError("Cannot evaluate an HMM on a sequence with T = 0")
    if emis.shape[1] != chain.num_states:
        raise ShapeError(
            f"Emission matrix has {emis.shape[1]} columns, chain has {chain.num_states} states"
        )
    if np.any(np.isnan(emis)) or np.any(emis == np.inf):
        raise NumericalError("Emission log-likelihoods contain NaN or +inf")
    return emis


def _forward(chain: MarkovChain, emis: FloatArray) -> FloatArray:
    T = emis.shape[0]
    log_alpha = np.empty_like(emis)
    log_alpha[0] = chain.log_q + emis[0]
    for t in range(1, T):
        log_alpha[t] = log_sum_exp(log_alpha[t - 1][:, None] + chain.log_A, axis=0) + emis[t]
    return log_alpha


def _backward(chain: MarkovChain, emis: FloatArray) -> FloatArray:
    T = emis.shape[0]
    log_beta = np.zeros_like(emis)
    for t in range(T - 2, -1, -1):
        log_beta[t] = log_sum_exp(chain.log_A + (emis[t + 1] + log_beta[t + 1])[None, :], axis=1)
    return log_beta


def forward_log_likelihood(chain: MarkovChain, emis: npt.ArrayLike) -> float:
    """
    Log-likelihood of a sequence summed over all state paths.

    Args:
        chain: Markov chain
        emis: ``T x S`` emission log-likelihoods

    Returns:
        ``log p(x | H)``
    """
    checked = _check_emissions(chain, np.asarray(emis, dtype=np.float64))
    log_alpha = _forward(chain, checked)
    return float(log_sum_exp(log_alpha[-1]))


def e_step(chain: MarkovChain, emission: EmissionModel, seq: npt.ArrayLike) -> PosteriorStats:
    """
    Posterior state, state-pair and component statistics for one sequence.

    Args:
        chain: Markov chain of the model
        emission: Emission model with ``chain.num_states`` states
        seq: ``T x D`` feature sequence

    Returns:
        PosteriorStats consistent with forward-backward
    """
    if emission.num_states != chain.num_states:
        raise ShapeError(
            f"Emission has {emission.num_states} states, chain has {chain.num_states}"
        )
    emis, comp = emission_log_likelihood(emission, seq)
    emis = _check_emissions(chain, emis)

    dead = np.flatnonzero(np.all(emis == -np.inf, axis=1))
    if dead.size:
        raise NumericalError("No state can explain the frame", frame=int(dead[0]))

    log_alpha = _forward(chain, emis)
    log_beta = _backward(chain, emis)
    log_likelihood = float(log_sum_exp(log_alpha[-1]))
    if not np.isfinite(log_likelihood):
        raise NumericalError("Sequence has zero likelihood under the model")

    with np.errstate(invalid="ignore"):
        log_gamma = log_alpha + log_beta - log_likelihood
        log_gamma[np.isnan(log_gamma)] = -np.inf

        T, S = emis.shape
        if T > 1:
            pair = (
                log_alpha[:-1, :, None]
                + chain.log_A[None, :, :]
                + (emis[1:] + log_beta[1:])[:, None, :]
                - log_likelihood
            )
            log_xi_sum = np.asarray(log_sum_exp(pair, axis=0))
        else:
            log_xi_sum = np.full((S, S), -np.inf)

        comp_gamma = log_gamma[:, :, None] + comp - emis[:, :, None]
        comp_gamma[np.isnan(comp_gamma)] = -np.inf

    return PosteriorStats(
        log_gamma=log_gamma,
        log_xi_sum=log_xi_sum,
        log_likelihood=log_likelihood,
        comp_gamma=comp_gamma,
    )


def update_q(stats: Sequence[PosteriorStats]) -> FloatArray:
    """
    Closed-form update of the initial distribution.

    Returns:
        New ``log_q``
    """
    if not stats:
        raise DataError("update_q needs at least one sequence")
    mass = np.sum([np.exp(s.log_gamma[0]) for s in stats], axis=0)
    return _log(mass / mass.sum())


def update_A(
    stats: Sequence[PosteriorStats], previous_log_A: Optional[FloatArray] = None
) -> FloatArray:
    """
    Closed-form update of the transition matrix.

    Rows without posterior mass keep their previous values (uniform if no previous matrix
    is given) and are reported.

    Returns:
        New ``log_A``
    """
    if not stats:
        raise DataError("update_A needs at least one sequence")
    if all(s.num_frames < 2 for s in stats):
        raise DataError("update_A needs at least one sequence with T >= 2")

    counts = np.sum([np.exp(s.log_xi_sum) for s in stats], axis=0)
    row_mass = counts.sum(axis=1)
    empty_rows = np.flatnonzero(row_mass <= ZERO_MASS)

    new_log_A = np.empty_like(counts)
    full_rows = row_mass > ZERO_MASS
    new_log_A[full_rows] = _log(counts[full_rows] / row_mass[full_rows, None])
    if empty_rows.size:
        num_states = counts.shape[0]
        fallback = (
            np.asarray(previous_log_A, dtype=np.float64)
            if previous_log_A is not None
            else np.full((num_states, num_states), -np.log(num_states))
        )
        new_log_A[empty_rows] = fallback[empty_rows]
        log_degenerate_update(logger, "transition rows", empty_rows.tolist())
    return new_log_A


def update_chain(stats: Sequence[PosteriorStats], previous: MarkovChain) -> MarkovChain:
    """Apply :func:`update_q` and :func:`update_A` (the latter only when some T >= 2)."""
    log_q = update_q(stats)
    if any(s.num_frames >= 2 for s in stats):
        log_A = update_A(stats, previous.log_A)
    else:
        log_A = previous.log_A
    return MarkovChain(log_q=log_q, log_A=log_A)


def uniform_segmentation(num_frames: int, num_states: int) -> npt.NDArray[np.int64]:
    """Flat-start state alignment: frame ``t`` goes to state ``floor(t * S / T)``."""
    if num_frames < 1:
        raise DataError("Cannot segment an empty sequence")
    return (np.arange(num_frames) * num_states) // num_frames


def total_log_likelihood(
    chain: MarkovChain, emission: EmissionModel, sequences: Sequence[FloatArray]
) -> float:
    """Sum of sequence log-likelihoods over a dataset."""
    return float(
        sum(
            forward_log_likelihood(chain, emission_log_likelihood(emission, seq)[0])
            for seq in sequences
        )
    )


def stack_stats(stats: Sequence[PosteriorStats]) -> FloatArray:
    """Concatenate per-frame component responsibilities over a dataset (``N x S x K``)."""
    return np.concatenate([s.comp_gamma for s in stats], axis=0)


def e_step_all(
    chain: MarkovChain, emission: EmissionModel, sequences: Sequence[FloatArray]
) -> List[PosteriorStats]:
    """E-step over every sequence of a dataset, in order."""
    return [e_step(chain, emission, seq) for seq in sequences]
