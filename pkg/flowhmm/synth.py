"""
Synthetic corpora for desk-scale experiments.

``desk`` draws feature sequences from well-separated Gaussian HMMs, one per class. A cubic
warp bends such a corpus frame by frame into a regime that diagonal Gaussians fit poorly.
``tones`` renders class HMMs as waveforms (state-dependent tone pairs) so the MFCC front end
and the noise protocol run end to end.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import numpy.typing as npt

from flowhmm.exceptions import DataError
from flowhmm.features import Waveform, write_wav
from flowhmm.gmm import GmmEmission
from flowhmm.hmm import HmmModel, MarkovChain
from flowhmm.logger import get_logger
from flowhmm.model_io import Manifest, ManifestEntry, write_features, write_manifest
from flowhmm.numerics import FloatArray, RngStream, derive_rng

logger = get_logger("synth")

ResultT = TypeVar("ResultT")


@dataclass
class Utterance:
    """One labeled feature sequence with its generating state path."""

    utterance_id: str
    features: FloatArray
    label: str
    states: Optional[npt.NDArray[np.int64]] = None


@dataclass
class Corpus:
    """Train and test utterances over a fixed label set."""

    labels: List[str]
    train: List[Utterance] = field(default_factory=list)
    test: List[Utterance] = field(default_factory=list)

    def sequences(self, split: str, label: str) -> List[FloatArray]:
        return [u.features for u in getattr(self, split) if u.label == label]

    @property
    def dim(self) -> int:
        return int(self.train[0].features.shape[1])


@dataclass
class WaveUtterance:
    utterance_id: str
    waveform: Waveform
    label: str


@dataclass
class WaveCorpus:
    labels: List[str]
    train: List[WaveUtterance] = field(default_factory=list)
    test: List[WaveUtterance] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Sampling


def sample_states(chain: MarkovChain, length: int, rng: RngStream) -> npt.NDArray[np.int64]:
    """State path of ``length`` steps: first state from ``q``, then rows of ``A``."""
    if length < 1:
        raise DataError(f"Sequence length must be >= 1, got {length}")
    q, A = chain.q, chain.A
    states = np.empty(length, dtype=np.int64)
    states[0] = rng.choice(chain.num_states, p=q / q.sum())
    for t in range(1, length):
        row = A[states[t - 1]]
        states[t] = rng.choice(chain.num_states, p=row / row.sum())
    return states


def sample_hmm(
    model: HmmModel, length: int, rng: RngStream
) -> Tuple[FloatArray, npt.NDArray[np.int64]]:
    """
    Draw a feature sequence and its state path from an HMM.

    Returns:
        ``(T x D frames, state path)``
    """
    states = sample_states(model.chain, length, rng)
    frames = np.empty((length, model.dim))
    for t, state in enumerate(states):
        frames[t] = model.emission.sample(int(state), rng)
    return frames, states


# ---------------------------------------------------------------------------
# Warps


@dataclass(frozen=True)
class CubicWarp:
    """Coordinate-wise ``y = x + a * x**3`` with ``a >= 0`` (strictly increasing)."""

    strength: float = 0.3

    def __post_init__(self) -> None:
        if self.strength < 0:
            raise ValueError(f"Warp strength must be non-negative, got {self.strength}")

    def forward(self, x: npt.ArrayLike) -> FloatArray:
        values = np.asarray(x, dtype=np.float64)
        return values + self.strength * values**3

    def inverse(self, y: npt.ArrayLike) -> FloatArray:
        """Real root of ``a t^3 + t - y = 0`` by Cardano's formula, polished by one Newton step."""
        values = np.asarray(y, dtype=np.float64)
        a = self.strength
        if a == 0:
            return values.copy()
        half_q = -values / (2.0 * a)
        root = np.sqrt(half_q * half_q + (1.0 / (3.0 * a)) ** 3)
        t = np.cbrt(-half_q + root) + np.cbrt(-half_q - root)
        return t - (t + a * t**3 - values) / (1.0 + 3.0 * a * t * t)


def make_warped_corpus(corpus: Corpus, warp: Callable[[FloatArray], FloatArray]) -> Corpus:
    """Apply ``warp`` to every frame; ids, labels and state paths are kept."""

    def bend(utterances: Sequence[Utterance]) -> List[Utterance]:
        return [replace(u, features=np.asarray(warp(u.features))) for u in utterances]

    return Corpus(list(corpus.labels), bend(corpus.train), bend(corpus.test))


# ---------------------------------------------------------------------------
# Desk benchmark


@dataclass(frozen=True)
class DeskPreset:
    """Sizes of the desk-scale benchmark."""

    num_classes: int = 5
    num_states: int = 3
    dim: int = 4
    train_per_class: int = 200
    test_per_class: int = 100
    min_length: int = 20
    max_length: int = 60
    mean_scale: float = 1.5
    stay_probability: float = 0.9


def generator_chain(num_states: int, stay: float) -> MarkovChain:
    """Left-to-right chain with self-loop probability ``stay``; the last state absorbs."""
    q = np.zeros(num_states)
    q[0] = 1.0
    A = np.zeros((num_states, num_states))
    for s in range(num_states - 1):
        A[s, s], A[s, s + 1] = stay, 1.0 - stay
    A[-1, -1] = 1.0
    return MarkovChain.from_probs(q, A)


def make_generator(preset: DeskPreset, rng: RngStream, label: str = "") -> HmmModel:
    """Random single-Gaussian HMM used to generate one class."""
    S, D = preset.num_states, preset.dim
    emission = GmmEmission(
        log_weights=np.zeros((S, 1)),
        means=preset.mean_scale * rng.standard_normal((S, 1, D)),
        log_variances=np.log(rng.uniform(0.5, 1.5, size=(S, 1, D))),
    )
    return HmmModel(generator_chain(S, preset.stay_probability), emission, label=label)


def _run_per_class(fn: Callable[[int], ResultT], count: int, jobs: int) -> List[ResultT]:
    if jobs <= 1:
        return [fn(c) for c in range(count)]
    with ThreadPoolExecutor(max_workers=jobs) as executor:
        futures = [executor.submit(fn, c) for c in range(count)]
        return [future.result() for future in futures]


def class_labels(count: int) -> List[str]:
    return [f"c{c}" for c in range(count)]


def make_desk_corpus(
    seed: int = 0, preset: Optional[DeskPreset] = None, jobs: int = 1
) -> Tuple[Corpus, List[HmmModel]]:
    """
    Desk benchmark corpus and its generating models.

    Class ``c`` draws its generator from ``(seed, c, 0)`` and its data from ``(seed, c, 1)``.
    """
    preset = preset if preset is not None else DeskPreset()
    labels = class_labels(preset.num_classes)

    def make_class(c: int) -> Tuple[HmmModel, List[Utterance], List[Utterance]]:
        generator = make_generator(preset, derive_rng(seed, c, 0), labels[c])
        rng = derive_rng(seed, c, 1)
        splits = []
        for split, count in (("train", preset.train_per_class), ("test", preset.test_per_class)):
            utterances = []
            for n in range(count):
                length = int(rng.integers(preset.min_length, preset.max_length + 1))
                frames, states = sample_hmm(generator, length, rng)
                utt_id = f"{split}-{labels[c]}-{n:04d}"
                utterances.append(Utterance(utt_id, frames, labels[c], states))
            splits.append(utterances)
        return generator, splits[0], splits[1]

    results = _run_per_class(make_class, preset.num_classes, jobs)
    corpus = Corpus(labels)
    generators = []
    for generator, train, test in results:
        generators.append(generator)
        corpus.train.extend(train)
        corpus.test.extend(test)
    logger.info(
        f"Desk corpus: {preset.num_classes} classes, {len(corpus.train)} train / "
        f"{len(corpus.test)} test sequences"
    )
    return corpus, generators


# ---------------------------------------------------------------------------
# Tone waveforms


@dataclass(frozen=True)
class TonePreset:
    """Sizes of the tone waveform corpus."""

    num_classes: int = 3
    num_states: int = 3
    train_per_class: int = 30
    test_per_class: int = 15
    sample_rate: int = 8000
    min_seconds: float = 0.3
    max_seconds: float = 0.6
    segment_ms: float = 10.0
    amplitude: float = 0.3
    floor_noise: float = 0.003
    stay_probability: float = 0.95


def render_tones(
    states: Sequence[int], frequencies: FloatArray, preset: TonePreset, rng: RngStream
) -> Waveform:
    """One segment per state step; each state sounds its pair of tones with continuous phase."""
    segment = int(round(preset.sample_rate * preset.segment_ms / 1000.0))
    samples = np.empty(len(states) * segment)
    phase = np.zeros(frequencies.shape[1])
    steps = np.arange(1, segment + 1)
    for i, state in enumerate(states):
        increments = 2.0 * np.pi * frequencies[state] / preset.sample_rate
        phases = phase[None, :] + steps[:, None] * increments[None, :]
        samples[i * segment : (i + 1) * segment] = np.sin(phases).mean(axis=1)
        phase = phases[-1] % (2.0 * np.pi)
    samples = preset.amplitude * samples + preset.floor_noise * rng.standard_normal(samples.size)
    return Waveform(np.clip(samples, -1.0, 1.0), preset.sample_rate)


def make_tone_corpus(
    seed: int = 0, preset: Optional[TonePreset] = None, jobs: int = 1
) -> WaveCorpus:
    """Waveform corpus whose classes differ in their state tone pairs."""
    preset = preset if preset is not None else TonePreset()
    labels = class_labels(preset.num_classes)
    segment_s = preset.segment_ms / 1000.0
    nyquist = preset.sample_rate / 2.0

    def make_class(c: int) -> Tuple[List[WaveUtterance], List[WaveUtterance]]:
        model_rng = derive_rng(seed, c, 0)
        frequencies = model_rng.uniform(150.0, 0.8 * nyquist, size=(preset.num_states, 2))
        chain = generator_chain(preset.num_states, preset.stay_probability)
        rng = derive_rng(seed, c, 1)
        splits = []
        for split, count in (("train", preset.train_per_class), ("test", preset.test_per_class)):
            utterances = []
            for n in range(count):
                seconds = rng.uniform(preset.min_seconds, preset.max_seconds)
                steps = max(1, int(seconds / segment_s))
                states = sample_states(chain, steps, rng)
                waveform = render_tones(states, frequencies, preset, rng)
                utt_id = f"{split}-{labels[c]}-{n:04d}"
                utterances.append(WaveUtterance(utt_id, waveform, labels[c]))
            splits.append(utterances)
        return splits[0], splits[1]

    corpus = WaveCorpus(labels)
    for train, test in _run_per_class(make_class, preset.num_classes, jobs):
        corpus.train.extend(train)
        corpus.test.extend(test)
    logger.info(
        f"Tone corpus: {preset.num_classes} classes, {len(corpus.train)} train / "
        f"{len(corpus.test)} test waveforms"
    )
    return corpus


# ---------------------------------------------------------------------------
# Writing


def write_corpus(directory: Union[str, Path], corpus: Corpus) -> None:
    """``train.arc``/``test.arc`` feature archives plus ``train.lst``/``test.lst`` manifests."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        utterances: List[Utterance] = getattr(corpus, split)
        archive = f"{split}.arc"
        write_features(root / archive, [(u.utterance_id, u.features) for u in utterances])
        entries = [ManifestEntry(u.utterance_id, archive, u.label) for u in utterances]
        write_manifest(root / f"{split}.lst", Manifest(list(corpus.labels), entries))
    logger.info(f"Wrote corpus to {root}")


def write_wave_corpus(directory: Union[str, Path], corpus: WaveCorpus) -> None:
    """WAV files under ``wav/`` plus ``train_wav.lst``/``test_wav.lst`` manifests."""
    root = Path(directory)
    (root / "wav").mkdir(parents=True, exist_ok=True)
    for split in ("train", "test"):
        utterances: List[WaveUtterance] = getattr(corpus, split)
        entries = []
        for u in utterances:
            relative = f"wav/{u.utterance_id}.wav"
            write_wav(root / relative, u.waveform)
            entries.append(ManifestEntry(u.utterance_id, relative, u.label))
        write_manifest(root / f"{split}_wav.lst", Manifest(list(corpus.labels), entries))
    logger.info(f"Wrote waveform corpus to {root}")
