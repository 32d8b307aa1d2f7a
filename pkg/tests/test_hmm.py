"""
Tests for the HMM core: forward-backward, posteriors and chain updates.
"""

import numpy as np
import pytest

from flowhmm.exceptions import DataError, NumericalError, ShapeError
from flowhmm.gmm import GmmEmission
from flowhmm.hmm import (
    HmmModel,
    MarkovChain,
    PosteriorStats,
    e_step,
    emission_log_likelihood,
    forward_log_likelihood,
    total_log_likelihood,
    uniform_segmentation,
    update_A,
    update_chain,
    update_q,
)
from flowhmm.numerics import derive_rng, log_sum_exp
from flowhmm.selftest import enumerate_posteriors, random_gmm_model


def _stats_with_gamma(first_frame):
    """PosteriorStats whose only meaningful field is the first-frame state posterior."""
    with np.errstate(divide="ignore"):
        log_gamma = np.log(np.array([first_frame], dtype=np.float64))
    S = log_gamma.shape[1]
    return PosteriorStats(
        log_gamma=log_gamma,
        log_xi_sum=np.full((S, S), -np.inf),
        log_likelihood=0.0,
        comp_gamma=log_gamma[:, :, None],
    )


class TestMarkovChain:
    """Test chain construction and validation."""

    def test_left_to_right_initialization(self):
        """Test one-hot start and uniform upper-triangular transitions."""
        chain = MarkovChain.left_to_right(3)
        np.testing.assert_allclose(chain.q, [1.0, 0.0, 0.0])
        np.testing.assert_allclose(chain.A[0], [1 / 3, 1 / 3, 1 / 3])
        np.testing.assert_allclose(chain.A[1], [0.0, 0.5, 0.5])
        np.testing.assert_allclose(chain.A[2], [0.0, 0.0, 1.0])

    def test_rows_must_sum_to_one(self):
        """Test rejection of a non-stochastic transition matrix."""
        with pytest.raises(ValueError):
            MarkovChain.from_probs([0.5, 0.5], [[0.5, 0.4], [0.5, 0.5]])

    def test_row_sum_tolerance(self):
        """Test rows off by 1e-11 are rejected while rounding-level error is accepted."""
        with pytest.raises(ValueError):
            MarkovChain.from_probs([0.5, 0.5], [[0.5, 0.5 - 1e-11], [0.5, 0.5]])
        with pytest.raises(ValueError):
            MarkovChain.from_probs([0.5, 0.5 - 1e-11], [[0.5, 0.5], [0.5, 0.5]])
        chain = MarkovChain.from_probs([1.0], [[1.0 - 1e-14]])
        assert chain.num_states == 1

    def test_shape_mismatch(self):
        """Test rejection of inconsistent q and A."""
        with pytest.raises(ShapeError):
            MarkovChain.from_probs([1.0], [[0.5, 0.5], [0.5, 0.5]])


class TestForward:
    """Test the sequence log-likelihood."""

    def test_single_frame(self):
        """Test T = 1 reduces to lse(log_q + emis[0])."""
        chain = MarkovChain.from_probs([0.3, 0.7], [[0.9, 0.1], [0.2, 0.8]])
        emis = np.array([[-1.0, -2.5]])
        expected = log_sum_exp(chain.log_q + emis[0])
        assert forward_log_likelihood(chain, emis) == pytest.approx(expected, abs=1e-12)

    def test_unit_densities_give_zero(self):
        """Test that emissions of log(1) give log-likelihood 0 for any T."""
        chain = MarkovChain.from_probs([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]])
        for T in (1, 4, 17):
            assert forward_log_likelihood(chain, np.zeros((T, 2))) == pytest.approx(0.0, abs=1e-12)

    def test_matches_path_enumeration(self):
        """Test S = 2, T = 3 against the sum over all 8 state paths."""
        chain = MarkovChain.from_probs([0.6, 0.4], [[0.7, 0.3], [0.1, 0.9]])
        emis = np.log(np.array([[0.5, 0.1], [0.2, 0.3], [0.05, 0.6]]))
        total, _, _ = enumerate_posteriors(chain, emis)
        assert forward_log_likelihood(chain, emis) == pytest.approx(total, abs=1e-10)

    def test_empty_sequence(self):
        """Test that T = 0 is rejected."""
        chain = MarkovChain.left_to_right(2)
        with pytest.raises(DataError):
            forward_log_likelihood(chain, np.zeros((0, 2)))

    def test_emission_column_mismatch(self):
        """Test that the emission matrix must have S columns."""
        chain = MarkovChain.left_to_right(2)
        with pytest.raises(ShapeError):
            forward_log_likelihood(chain, np.zeros((3, 3)))

    def test_nan_emissions(self):
        """Test that NaN emissions are a numerical error."""
        chain = MarkovChain.left_to_right(2)
        with pytest.raises(NumericalError):
            forward_log_likelihood(chain, np.array([[np.nan, 0.0]]))


class TestEStep:
    """Test posterior statistics."""

    def test_single_state_posteriors_are_certain(self):
        """Test that S = 1 gives log_gamma = 0 everywhere."""
        chain = MarkovChain.left_to_right(1)
        emission = GmmEmission.unit(1, 2)
        stats = e_step(chain, emission, derive_rng(0).standard_normal((5, 2)))
        np.testing.assert_allclose(stats.log_gamma, 0.0, atol=1e-12)

    def test_single_component_comp_gamma_equals_gamma(self):
        """Test that with one component per state comp_gamma equals log_gamma."""
        model = random_gmm_model(derive_rng(1), 2, 1, 3)
        stats = e_step(model.chain, model.emission, derive_rng(2).standard_normal((6, 3)))
        np.testing.assert_allclose(stats.comp_gamma[:, :, 0], stats.log_gamma, atol=1e-12)

    def test_matches_enumeration(self):
        """Test gamma and summed xi against brute-force path enumeration."""
        for n in range(5):
            rng = derive_rng(3, n)
            model = random_gmm_model(rng, 2, 2, 2)
            seq = rng.standard_normal((3, 2))
            emis, _ = emission_log_likelihood(model.emission, seq)
            total, gamma, xi = enumerate_posteriors(model.chain, emis)
            stats = e_step(model.chain, model.emission, seq)
            assert stats.log_likelihood == pytest.approx(total, abs=1e-10)
            np.testing.assert_allclose(np.exp(stats.log_gamma), gamma, atol=1e-10)
            np.testing.assert_allclose(np.exp(stats.log_xi_sum), xi, atol=1e-10)

    def test_log_likelihood_agrees_with_forward(self):
        """Test that e_step and forward report the same likelihood."""
        model = random_gmm_model(derive_rng(4), 3, 2, 2)
        seq = derive_rng(5).standard_normal((12, 2))
        stats = e_step(model.chain, model.emission, seq)
        assert stats.log_likelihood == pytest.approx(model.log_likelihood(seq), abs=1e-10)

    def test_posteriors_are_normalized(self):
        """Test that every frame's state posterior sums to one."""
        model = random_gmm_model(derive_rng(6), 3, 2, 2)
        stats = e_step(model.chain, model.emission, derive_rng(7).standard_normal((9, 2)))
        np.testing.assert_allclose(np.exp(stats.log_gamma).sum(axis=1), 1.0, atol=1e-10)
        assert np.exp(stats.log_xi_sum).sum() == pytest.approx(8.0, abs=1e-9)

    def test_state_count_mismatch(self):
        """Test rejection of an emission model with the wrong number of states."""
        with pytest.raises(ShapeError):
            e_step(MarkovChain.left_to_right(2), GmmEmission.unit(3, 2), np.zeros((4, 2)))

    def test_unreachable_frame_is_reported(self):
        """Test that a frame no state can emit raises NumericalError."""

        class Silent:
            kind = "test"
            num_states = 2
            num_mix = 1
            dim = 1

            def component_log_densities(self, seq):
                comp = np.zeros((len(seq), 2, 1))
                comp[1] = -np.inf
                return comp

        with pytest.raises(NumericalError) as excinfo:
            e_step(MarkovChain.left_to_right(2), Silent(), np.zeros((3, 1)))
        assert excinfo.value.frame == 1


class TestChainUpdates:
    """Test closed-form updates of q and A."""

    def test_update_q_single_sequence(self):
        """Test q = gamma[0] for one sequence."""
        np.testing.assert_allclose(np.exp(update_q([_stats_with_gamma([1.0, 0.0])])), [1.0, 0.0])

    def test_update_q_averages_sequences(self):
        """Test q is the average first-frame posterior."""
        stats = [_stats_with_gamma([1.0, 0.0]), _stats_with_gamma([0.0, 1.0])]
        np.testing.assert_allclose(np.exp(update_q(stats)), [0.5, 0.5])

    def test_update_A_left_to_right_posteriors(self):
        """Test that deterministic left-to-right posteriors give an upper-bidiagonal A."""
        counts = np.array([[1.0, 1.0, 0.0], [0.0, 1.0, 1.0], [0.0, 0.0, 2.0]])
        with np.errstate(divide="ignore"):
            stats = PosteriorStats(
                log_gamma=np.zeros((5, 3)),
                log_xi_sum=np.log(counts),
                log_likelihood=0.0,
                comp_gamma=np.zeros((5, 3, 1)),
            )
        A = np.exp(update_A([stats]))
        np.testing.assert_allclose(A, [[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.0, 0.0, 1.0]])

    def test_update_A_single_state(self):
        """Test that one self-looping state keeps A = [[1]]."""
        stats = e_step(MarkovChain.left_to_right(1), GmmEmission.unit(1, 1), np.zeros((4, 1)))
        np.testing.assert_allclose(np.exp(update_A([stats])), [[1.0]])

    def test_update_A_keeps_previous_row_without_mass(self, caplog):
        """Test that rows with zero posterior mass keep their previous values and are logged."""
        counts = np.array([[2.0, 1.0], [0.0, 0.0]])
        with np.errstate(divide="ignore"):
            stats = PosteriorStats(
                log_gamma=np.zeros((4, 2)),
                log_xi_sum=np.log(counts),
                log_likelihood=0.0,
                comp_gamma=np.zeros((4, 2, 1)),
            )
        previous = np.log(np.array([[0.5, 0.5], [0.3, 0.7]]))
        A = np.exp(update_A([stats], previous))
        np.testing.assert_allclose(A[0], [2 / 3, 1 / 3])
        np.testing.assert_allclose(A[1], [0.3, 0.7])
        assert "transition rows" in caplog.text

    def test_update_A_needs_two_frames(self):
        """Test that only T = 1 sequences cannot update A."""
        with pytest.raises(DataError):
            update_A([_stats_with_gamma([1.0, 0.0])])

    def test_update_chain_skips_A_for_single_frames(self):
        """Test that A is kept when every sequence has one frame."""
        previous = MarkovChain.from_probs([0.5, 0.5], [[0.9, 0.1], [0.4, 0.6]])
        chain = update_chain([_stats_with_gamma([0.2, 0.8])], previous)
        np.testing.assert_allclose(chain.A, previous.A)
        np.testing.assert_allclose(chain.q, [0.2, 0.8])

    def test_em_does_not_decrease_likelihood(self):
        """Test one chain update never lowers the data likelihood with fixed emissions."""
        rng = derive_rng(8)
        model = random_gmm_model(rng, 3, 1, 2)
        seqs = [rng.standard_normal((10, 2)) for _ in range(4)]
        before = total_log_likelihood(model.chain, model.emission, seqs)
        stats = [e_step(model.chain, model.emission, s) for s in seqs]
        chain = update_chain(stats, model.chain)
        after = total_log_likelihood(chain, model.emission, seqs)
        assert after >= before - 1e-9


class TestHelpers:
    """Test segmentation and model wrappers."""

    def test_uniform_segmentation(self):
        """Test the flat-start alignment of 7 frames over 3 states."""
        np.testing.assert_array_equal(uniform_segmentation(7, 3), [0, 0, 0, 1, 1, 2, 2])

    def test_uniform_segmentation_empty(self):
        """Test that an empty sequence cannot be segmented."""
        with pytest.raises(DataError):
            uniform_segmentation(0, 3)

    def test_model_properties(self):
        """Test that HmmModel exposes the emission kind and dimension."""
        model = HmmModel(MarkovChain.left_to_right(2), GmmEmission.unit(2, 5))
        assert model.kind == "gmm"
        assert model.dim == 5
