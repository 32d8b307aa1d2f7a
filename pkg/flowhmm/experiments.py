"""
Desk-scale experiment drivers: model comparison on a warped corpus and the noise
robustness protocol on the tone corpus.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from flowhmm.classify import ClassifierBank, Prediction, classify_all, evaluate, fuse
from flowhmm.config import Config
from flowhmm.exceptions import ConfigurationError
from flowhmm.features import Waveform, compute_features, gen_noise, mix_noise
from flowhmm.hmm import HmmModel
from flowhmm.logger import get_logger
from flowhmm.numerics import FloatArray, derive_rng
from flowhmm.synth import (
    CubicWarp,
    DeskPreset,
    TonePreset,
    WaveCorpus,
    make_desk_corpus,
    make_tone_corpus,
    make_warped_corpus,
)
from flowhmm.trainer import TrainLog, train_class_set

logger = get_logger("experiments")

CLEAN = "clean"
FUSED = "fused"


def config_for(config: Config, kind: str, num_mix: Optional[int] = None) -> Config:
    """Copy of ``config`` training models of ``kind``."""
    model = config.model.model_copy(update={"kind": kind, "num_mix": num_mix})
    return config.model_copy(update={"model": model})


def train_bank(
    train: Sequence[Tuple[FloatArray, str]], labels: Sequence[str], config: Config
) -> Tuple[ClassifierBank, List[TrainLog]]:
    """Train one model per label from ``(features, label)`` pairs."""
    datasets = [[feat for feat, label in train if label == c] for c in labels]
    results = train_class_set(datasets, list(labels), config)
    models: List[HmmModel] = [model for model, _ in results]
    return ClassifierBank(models, list(labels)), [log for _, log in results]


def heldout_log_likelihood(bank: ClassifierBank, test: Sequence[Tuple[FloatArray, str]]) -> float:
    """Average per-frame log-likelihood of test sequences under their own class model."""
    index = {label: i for i, label in enumerate(bank.class_labels)}
    total, frames = 0.0, 0
    for feat, label in test:
        total += bank.models[index[label]].log_likelihood(feat)
        frames += feat.shape[0]
    return total / frames


# ---------------------------------------------------------------------------
# Warped-corpus comparison


@dataclass
class ComparisonResult:
    kind: str
    accuracy: float
    heldout_ll: float


def run_comparison(
    config: Config,
    kinds: Sequence[str] = ("gmm", "nvp"),
    num_mix: int = 3,
    warp_strength: float = 0.3,
    preset: Optional[DeskPreset] = None,
) -> List[ComparisonResult]:
    """
    Train every model kind with the same mixture size on the warped desk corpus and report
    test accuracy and held-out log-likelihood.
    """
    corpus, _ = make_desk_corpus(config.seed, preset, jobs=config.jobs)
    warped = make_warped_corpus(corpus, CubicWarp(warp_strength).forward)
    train = [(u.features, u.label) for u in warped.train]
    test = [(u.features, u.label) for u in warped.test]

    results = []
    for kind in kinds:
        bank, _ = train_bank(train, warped.labels, config_for(config, kind, num_mix))
        predictions = classify_all(
            bank, [(u.utterance_id, u.features) for u in warped.test], jobs=config.jobs
        )
        report = evaluate([p.label for p in predictions], [u.label for u in warped.test])
        result = ComparisonResult(kind, report.accuracy, heldout_log_likelihood(bank, test))
        logger.info(
            f"{kind}: accuracy {100 * result.accuracy:.2f}%, "
            f"held-out log-likelihood {result.heldout_ll:.4f} per frame"
        )
        results.append(result)
    return results


# ---------------------------------------------------------------------------
# Noise robustness


@dataclass
class RobustnessResult:
    """Accuracy per test condition (``clean`` or an SNR in dB) and model kind."""

    conditions: List[str]
    kinds: List[str]
    accuracy: Dict[str, Dict[str, float]] = field(default_factory=dict)

    def column(self, kind: str) -> List[float]:
        return [self.accuracy[condition][kind] for condition in self.conditions]

    def render(self) -> str:
        columns = self.kinds + ([FUSED] if FUSED in self.accuracy.get(CLEAN, {}) else [])
        lines = ["condition " + " ".join(f"{kind:>8}" for kind in columns)]
        for condition in self.conditions:
            row = self.accuracy[condition]
            lines.append(
                f"{condition:<9} " + " ".join(f"{100 * row[kind]:8.2f}" for kind in columns)
            )
        return "\n".join(lines) + "\n"


def _features(waveforms: Sequence[Waveform], config: Config) -> List[FloatArray]:
    return [compute_features(w, config.mfcc) for w in waveforms]


def _noisy(
    waveforms: Sequence[Waveform], snr_db: float, noise_kind: str, seed: int, key: int
) -> List[Waveform]:
    rng = derive_rng(seed, key)
    noisy = []
    for waveform in waveforms:
        noise = gen_noise(noise_kind, waveform.samples.size, waveform.sample_rate, rng)
        noisy.append(mix_noise(waveform, noise, snr_db, rng))
    return noisy


def run_robustness(
    config: Config,
    kinds: Sequence[str] = ("gmm", "nvp", "glow"),
    snrs: Sequence[float] = (25.0, 20.0, 15.0, 10.0),
    noise_kind: str = "white",
    multi_condition: bool = False,
    mct_snr: float = 10.0,
    preset: Optional[TonePreset] = None,
    corpus: Optional[WaveCorpus] = None,
) -> RobustnessResult:
    """
    Train on clean (optionally also noise-corrupted) tone utterances, test on clean and on
    noisy copies at each SNR, and fuse the model families by voting.
    """
    if not kinds:
        raise ConfigurationError("At least one model kind is required")
    corpus = corpus if corpus is not None else make_tone_corpus(config.seed, preset, config.jobs)
    train_waves = [u.waveform for u in corpus.train]
    train_labels = [u.label for u in corpus.train]
    train = list(zip(_features(train_waves, config), train_labels))
    if multi_condition:
        corrupted = _noisy(train_waves, mct_snr, "white", config.seed, 1000)
        train += list(zip(_features(corrupted, config), train_labels))

    banks = {
        kind: train_bank(train, corpus.labels, config_for(config, kind))[0] for kind in kinds
    }

    test_waves = [u.waveform for u in corpus.test]
    truth = [u.label for u in corpus.test]
    ids = [u.utterance_id for u in corpus.test]
    conditions = [CLEAN] + [f"{snr:g}dB" for snr in snrs]
    result = RobustnessResult(conditions, list(kinds))
    for i, condition in enumerate(conditions):
        waves = test_waves
        if i > 0:
            waves = _noisy(test_waves, snrs[i - 1], noise_kind, config.seed, i)
        utterances = list(zip(ids, _features(waves, config)))
        row: Dict[str, float] = {}
        per_kind: List[List[Prediction]] = []
        for kind in kinds:
            predictions = classify_all(banks[kind], utterances, jobs=config.jobs)
            per_kind.append(predictions)
            row[kind] = evaluate([p.label for p in predictions], truth).accuracy
        if len(kinds) >= 2:
            fused = fuse(per_kind, derive_rng(config.seed, 2000 + i))
            row[FUSED] = evaluate([p.label for p in fused], truth).accuracy
        result.accuracy[condition] = row
        logger.info(
            f"{condition}: "
            + ", ".join(f"{kind} {100 * value:.2f}%" for kind, value in row.items())
        )
    return result


def accuracy_drop(result: RobustnessResult, kind: str) -> float:
    """Clean accuracy minus accuracy at the noisiest condition."""
    column = result.column(kind)
    return float(np.float64(column[0]) - np.float64(column[-1]))
