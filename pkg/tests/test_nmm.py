"""
Tests for mixtures of flow densities as HMM emissions.
"""

import numpy as np
import pytest

from flowhmm.config import FlowConfig
from flowhmm.exceptions import ConfigurationError, NumericalError, ShapeError
from flowhmm.gmm import GmmEmission
from flowhmm.hmm import MarkovChain, e_step
from flowhmm.nmm import FLOW_KINDS, NmmEmission, build_flow, update_pi
from flowhmm.numerics import derive_rng

SMALL = FlowConfig(coupling_layers=2, flow_steps=2)


class TestIdentityAnchor:
    """Identity flows must reproduce the unit Gaussian exactly."""

    @pytest.mark.parametrize("kind", FLOW_KINDS)
    def test_matches_unit_gmm(self, kind):
        """Test component densities against a GMM of standard normals."""
        x = derive_rng(0).standard_normal((6, 3))
        emission = NmmEmission.identity(kind, 2, 2, 3, SMALL)
        expected = GmmEmission.unit(2, 3, 2).component_log_densities(x)
        np.testing.assert_allclose(emission.component_log_densities(x), expected, atol=1e-10)

    @pytest.mark.parametrize("kind", FLOW_KINDS)
    def test_unit_density_at_origin(self, kind):
        """Test the mixture density at x = 0 for D = 39."""
        emission = NmmEmission.identity(kind, 1, 1, 39, SMALL)
        assert emission.log_pdf(0, np.zeros(39)) == pytest.approx(-35.838603, abs=1e-6)

    def test_component_responsibilities_follow_weights(self):
        """Test that identical flows split responsibility by the mixture weights."""
        emission = NmmEmission.identity("nvp", 1, 2, 2, SMALL, log_weights=np.log([[0.25, 0.75]]))
        np.testing.assert_allclose(
            np.exp(emission.component_resp(0, np.ones(2))), [0.25, 0.75], atol=1e-12
        )


class TestConstruction:
    """Test validation and factories."""

    def test_create_is_seeded(self):
        """Test that the same seed builds identical components."""
        first = NmmEmission.create("nvp", 2, 2, 3, SMALL, seed=4)
        second = NmmEmission.create("nvp", 2, 2, 3, SMALL, seed=4)
        for (_, _, a), (_, _, b) in zip(first.iter_flows(), second.iter_flows()):
            np.testing.assert_array_equal(a.parameter_vector(), b.parameter_vector())

    def test_create_components_differ(self):
        """Test that components draw distinct hidden-layer weights."""
        emission = NmmEmission.create("nvp", 1, 2, 3, SMALL, seed=4)
        a, b = emission.flows[0]
        assert not np.array_equal(a.parameter_vector(), b.parameter_vector())

    def test_fresh_nvp_components_are_identity(self):
        """Test that zero output layers make a fresh mixture a unit Gaussian."""
        emission = NmmEmission.create("nvp", 1, 3, 2, SMALL, seed=1)
        assert emission.log_pdf(0, np.zeros(2)) == pytest.approx(-1.8378771, abs=1e-7)

    def test_mixed_flow_kinds(self):
        """Test that every component must be of the declared kind."""
        flows = [[build_flow("nvp", 2, SMALL), build_flow("glow", 2, SMALL, identity=True)]]
        with pytest.raises(ConfigurationError):
            NmmEmission(np.log([[0.5, 0.5]]), flows, "nvp")

    def test_wrong_component_count(self):
        """Test that the flow grid must match the weights."""
        with pytest.raises(ShapeError):
            NmmEmission(np.log([[0.5, 0.5]]), [[build_flow("nvp", 2, SMALL)]], "nvp")

    def test_unknown_kind(self):
        """Test rejection of unknown flow families."""
        with pytest.raises(ConfigurationError):
            build_flow("maf", 2, SMALL)

    def test_copy_is_deep(self):
        """Test that copies do not share flow parameters."""
        emission = NmmEmission.create("nvp", 1, 1, 2, SMALL, seed=2)
        clone = emission.copy()
        flow = clone.flows[0][0]
        flow.set_parameter_vector(flow.parameter_vector() + 1.0)
        assert not np.array_equal(
            flow.parameter_vector(), emission.flows[0][0].parameter_vector()
        )


class TestGlowInitialization:
    """Test data-dependent actnorm setup of Glow mixtures."""

    def test_initialize_actnorm_per_state(self):
        """Test that every component is initialized from its state's frames."""
        emission = NmmEmission.create("glow", 2, 1, 2, SMALL, seed=3)
        rng = derive_rng(5)
        batches = [rng.standard_normal((20, 2)), 5 + rng.standard_normal((20, 2))]
        emission.initialize_actnorm(batches)
        assert all(flow.is_initialized for _, _, flow in emission.iter_flows())
        assert emission.min_abs_det() == pytest.approx(1.0)

    def test_initialize_needs_one_batch_per_state(self):
        """Test rejection of a frame list of the wrong length."""
        emission = NmmEmission.create("glow", 2, 1, 2, SMALL, seed=3)
        with pytest.raises(ShapeError):
            emission.initialize_actnorm([np.zeros((4, 2))])

    def test_nvp_has_no_determinant(self):
        """Test that min_abs_det is only defined for Glow."""
        assert NmmEmission.identity("nvp", 1, 1, 2, SMALL).min_abs_det() is None

    def test_error_names_state_and_component(self):
        """Test that numerical failures carry the offending state and component."""
        emission = NmmEmission.identity("glow", 2, 2, 2, SMALL)
        emission.flows[1][0].params["step0.invconv.weight"] = np.zeros((2, 2))
        with pytest.raises(NumericalError) as excinfo:
            emission.component_log_densities(np.zeros((1, 2)))
        assert excinfo.value.state == 1
        assert excinfo.value.component == 0


class TestWeights:
    """Test the mixture weight update."""

    def test_update_pi_from_posteriors(self):
        """Test that weights follow the component responsibilities."""
        emission = NmmEmission.identity("nvp", 1, 2, 2, SMALL, log_weights=np.log([[0.3, 0.7]]))
        stats = [e_step(MarkovChain.left_to_right(1), emission, np.zeros((4, 2)))]
        np.testing.assert_allclose(np.exp(update_pi(stats)), [[0.3, 0.7]], atol=1e-12)

    def test_update_pi_sums_to_one(self):
        """Test normalization of the updated weights."""
        emission = NmmEmission.create("nvp", 2, 3, 2, SMALL, seed=6)
        seq = derive_rng(7).standard_normal((10, 2))
        chain = MarkovChain.from_probs([0.5, 0.5], [[0.5, 0.5], [0.5, 0.5]])
        weights = np.exp(update_pi([e_step(chain, emission, seq)]))
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)

    def test_sample_shape(self):
        """Test that sampling draws frames of the flow dimension."""
        emission = NmmEmission.identity("glow", 1, 2, 3, SMALL)
        assert emission.sample(0, derive_rng(8), size=4).shape == (4, 3)
