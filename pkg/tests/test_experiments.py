"""
Tests for the experiment drivers.
"""

import numpy as np
import pytest

from flowhmm.config import Config, FlowConfig, ModelConfig, TrainConfig
from flowhmm.experiments import (
    CLEAN,
    FUSED,
    RobustnessResult,
    accuracy_drop,
    config_for,
    heldout_log_likelihood,
    run_comparison,
    run_robustness,
    train_bank,
)
from flowhmm.exceptions import ConfigurationError
from flowhmm.numerics import derive_rng
from flowhmm.synth import DeskPreset, TonePreset, make_desk_corpus, make_tone_corpus

TINY_DESK = DeskPreset(num_classes=2, dim=3, train_per_class=6, test_per_class=3, max_length=25)
TINY_TONES = TonePreset(num_classes=2, train_per_class=3, test_per_class=2)


def _config(**model):
    return Config(
        model=ModelConfig(num_states=2, **model),
        flow=FlowConfig(coupling_layers=2, flow_steps=2),
        train=TrainConfig(outer_iters=2, max_inner_iters=2, batch_size=4),
    )


class TestHelpers:
    """Test experiment helpers."""

    def test_config_for(self):
        """Test switching the model kind leaves the rest untouched."""
        config = _config(kind="nvp")
        derived = config_for(config, "glow", 2)

        assert derived.model.kind == "glow"
        assert derived.model.num_mix == 2
        assert derived.model.num_states == 2
        assert derived.train == config.train
        assert config.model.kind == "nvp"

    def test_render_and_drop(self):
        """Test the robustness table and the accuracy drop."""
        result = RobustnessResult(
            [CLEAN, "10dB"],
            ["gmm", "nvp"],
            {
                CLEAN: {"gmm": 1.0, "nvp": 0.9, FUSED: 1.0},
                "10dB": {"gmm": 0.5, "nvp": 0.75, FUSED: 0.8},
            },
        )

        lines = result.render().splitlines()
        assert lines[0].split() == ["condition", "gmm", "nvp", "fused"]
        assert lines[1].split() == ["clean", "100.00", "90.00", "100.00"]
        assert lines[2].split() == ["10dB", "50.00", "75.00", "80.00"]
        assert result.column("nvp") == [0.9, 0.75]
        assert accuracy_drop(result, "gmm") == pytest.approx(0.5)

    def test_no_kinds(self):
        """Test an empty model family list."""
        with pytest.raises(ConfigurationError):
            run_robustness(_config(), kinds=[])

    def test_train_bank_and_heldout(self):
        """Test a bank per label and a finite per-frame log-likelihood."""
        corpus, _ = make_desk_corpus(0, TINY_DESK)
        train = [(u.features, u.label) for u in corpus.train]
        test = [(u.features, u.label) for u in corpus.test]

        bank, logs = train_bank(train, corpus.labels, _config(kind="gmm", num_mix=1))

        assert bank.class_labels == ["c0", "c1"]
        assert len(logs) == 2
        assert np.isfinite(heldout_log_likelihood(bank, test))


@pytest.mark.slow
class TestDrivers:
    """Test the experiment drivers on tiny corpora."""

    def test_comparison(self):
        """Test every kind reports accuracy and held-out likelihood."""
        results = run_comparison(_config(), kinds=("gmm", "nvp"), num_mix=1, preset=TINY_DESK)

        assert [r.kind for r in results] == ["gmm", "nvp"]
        assert all(0.0 <= r.accuracy <= 1.0 for r in results)
        assert all(np.isfinite(r.heldout_ll) for r in results)

    def test_robustness(self):
        """Test one row per condition with a fused column."""
        corpus = make_tone_corpus(0, TINY_TONES)
        result = run_robustness(
            _config(), kinds=("gmm", "nvp"), snrs=(20.0, 5.0), corpus=corpus
        )

        assert result.conditions == ["clean", "20dB", "5dB"]
        for condition in result.conditions:
            assert set(result.accuracy[condition]) == {"gmm", "nvp", FUSED}
            assert all(0.0 <= v <= 1.0 for v in result.accuracy[condition].values())

    def test_robustness_multi_condition_single_kind(self):
        """Test multi-condition training without fusion for one family."""
        corpus = make_tone_corpus(0, TINY_TONES)
        result = run_robustness(
            _config(), kinds=("gmm",), snrs=(10.0,), multi_condition=True, corpus=corpus
        )

        assert FUSED not in result.accuracy[CLEAN]
        assert result.render().splitlines()[0].split() == ["condition", "gmm"]


def _dependent_frames(rng, count, length=25):
    """Sequences whose second coordinate is a noisy linear function of the first."""
    sequences = []
    for _ in range(count):
        x1 = rng.standard_normal(length)
        x2 = 2.0 * x1 + 0.3 * rng.standard_normal(length)
        sequences.append(np.column_stack([x1, x2]))
    return sequences


@pytest.mark.slow
class TestModelQuality:
    """Test the direction of the headline comparisons, not only their ranges."""

    def test_flow_beats_diagonal_gaussian_on_dependent_features(self):
        """Test a trained coupling flow outscores a one-component GMM on held-out frames."""
        rng = derive_rng(5)
        train = [(seq, "a") for seq in _dependent_frames(rng, 16)]
        test = [(seq, "a") for seq in _dependent_frames(rng, 8)]
        train_config = TrainConfig(
            outer_iters=6,
            max_inner_iters=60,
            batch_size=4,
            learning_rate=5e-3,
            convergence_threshold=1e-12,
            stop_on_convergence=False,
        )

        scores = {}
        for kind in ("gmm", "nvp"):
            config = Config(
                model=ModelConfig(kind=kind, num_states=1, num_mix=1),
                flow=FlowConfig(coupling_layers=2, flow_steps=2, hidden_width=8),
                train=train_config,
            )
            bank, _ = train_bank(train, ["a"], config)
            scores[kind] = heldout_log_likelihood(bank, test)

        assert scores["nvp"] > scores["gmm"]

    def test_accuracy_falls_under_heavy_noise(self):
        """Test clean accuracy is at least the accuracy at -10 dB SNR."""
        corpus = make_tone_corpus(0, TonePreset(num_classes=2, train_per_class=4, test_per_class=4))
        result = run_robustness(_config(), kinds=("gmm",), snrs=(-10.0,), corpus=corpus)

        clean, noisy = result.column("gmm")
        assert result.conditions == [CLEAN, "-10dB"]
        assert clean >= noisy
