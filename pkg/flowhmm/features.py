"""
MFCC front end and additive-noise corruption.

Pipeline per utterance: preemphasis, framing, symmetric Hamming window, power spectrum,
triangular HTK mel filterbank, log, orthonormal DCT-II, first ``num_ceps`` coefficients
(c0 kept). Dynamic coefficients and per-utterance mean/variance normalization are separate
steps so each can be checked on its own.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Union

import librosa
import numpy as np
import numpy.typing as npt
from scipy.fft import dct
from scipy.io import wavfile
from scipy.signal import get_window, lfilter

from flowhmm.config import MfccConfig
from flowhmm.exceptions import DataError, ShapeError
from flowhmm.logger import get_logger
from flowhmm.numerics import FloatArray, RngStream

logger = get_logger("features")

DELTA_WIDTH = 2
NOISE_RMS = 0.1
NoiseKind = Literal["white", "pink"]


@dataclass
class Waveform:
    """Single-channel signal with samples in [-1, 1]."""

    samples: FloatArray
    sample_rate: int

    def __post_init__(self) -> None:
        self.samples = np.ascontiguousarray(np.asarray(self.samples, dtype=np.float64))
        if self.samples.ndim != 1:
            raise ShapeError(f"Waveform must be one-dimensional, got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise DataError("Waveform has no samples")
        if self.sample_rate <= 0:
            raise DataError(f"Sample rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)) or np.max(np.abs(self.samples)) > 1.0:
            raise DataError("Waveform samples must be finite and within [-1, 1]")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def read_wav(path: Union[str, Path]) -> Waveform:
    """Read a single-channel 8/16/32-bit PCM or float WAV file."""
    sample_rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise DataError(f"{path}: expected a single channel, found {data.shape[1]}")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.floating):
        samples = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported sample format {data.dtype}")
    return Waveform(samples, int(sample_rate))


def write_wav(
    path: Union[str, Path], waveform: Waveform, sample_format: Literal["int16", "float32"] = "int16"
) -> None:
    """Write a waveform as 16-bit PCM or 32-bit float WAV."""
    if sample_format == "int16":
        data = np.round(np.clip(waveform.samples, -1.0, 32767 / 32768) * 32768.0).astype(np.int16)
    else:
        data = waveform.samples.astype(np.float32)
    wavfile.write(str(path), waveform.sample_rate, data)


def num_frames(num_samples: int, window: int, shift: int) -> int:
    """Frames that fit entirely inside the signal."""
    if num_samples < window:
        return 0
    return 1 + (num_samples - window) // shift


def extract_mfcc(waveform: Waveform, config: MfccConfig) -> FloatArray:
    """
    Static MFCCs of an utterance.

    Args:
        waveform: Input signal
        config: Front-end settings

    Returns:
        ``T x num_ceps`` array with ``T = 1 + (N - window) // shift``
    """
    sr = waveform.sample_rate
    window = config.window_samples(sr)
    shift = config.shift_samples(sr)
    if shift < 1:
        raise DataError(f"Frame shift of {config.shift_ms} ms is below one sample at {sr} Hz")
    if waveform.samples.size < window:
        raise DataError(
            f"Waveform of {waveform.samples.size} samples is shorter than one window ({window})"
        )

    emphasized = lfilter([1.0, -config.preemphasis], [1.0], waveform.samples)
    frames = librosa.util.frame(
        np.ascontiguousarray(emphasized), frame_length=window, hop_length=shift, axis=0
    )
    n_fft = config.fft_size
    while n_fft < window:
        n_fft *= 2

    windowed = frames * get_window("hamming", window, fftbins=False)[None, :]
    power = np.abs(np.fft.rfft(windowed, n=n_fft, axis=1)) ** 2 / n_fft

    high = config.high_freq if config.high_freq is not None else sr / 2.0
    filterbank = librosa.filters.mel(
        sr=sr,
        n_fft=n_fft,
        n_mels=config.num_mel_filters,
        fmin=config.low_freq,
        fmax=high,
        htk=True,
        norm=None,
    )
    energies = power @ filterbank.T
    log_energies = np.log(np.maximum(energies, config.log_floor))
    ceps = dct(log_energies, type=2, norm="ortho", axis=1)[:, : config.num_ceps]
    return np.ascontiguousarray(ceps, dtype=np.float64)


def _regression_deltas(feat: FloatArray, width: int = DELTA_WIDTH) -> FloatArray:
    T = feat.shape[0]
    padded = np.pad(feat, ((width, width), (0, 0)), mode="edge")
    denominator = 2.0 * sum(n * n for n in range(1, width + 1))
    delta = np.zeros_like(feat)
    for n in range(1, width + 1):
        delta += n * (padded[width + n : width + n + T] - padded[width - n : width - n + T])
    return delta / denominator


def append_deltas(feat: npt.ArrayLike) -> FloatArray:
    """Append regression deltas (window +-2, edge frames replicated) and delta-deltas."""
    static = np.atleast_2d(np.asarray(feat, dtype=np.float64))
    if static.shape[0] < 1:
        raise DataError("Cannot compute deltas of an empty sequence")
    delta = _regression_deltas(static)
    return np.concatenate([static, delta, _regression_deltas(delta)], axis=1)


def cmvn(feat: npt.ArrayLike) -> FloatArray:
    """
    Per-utterance mean and variance normalization.

    Dimensions with zero variance are only centered; they are reported.
    """
    frames = np.atleast_2d(np.asarray(feat, dtype=np.float64))
    if frames.shape[0] < 2:
        raise DataError(f"cmvn needs at least 2 frames, got {frames.shape[0]}")
    centered = frames - frames.mean(axis=0)
    std = frames.std(axis=0)
    flat = std == 0
    if np.any(flat):
        logger.warning(
            f"Zero-variance feature dimensions {np.flatnonzero(flat).tolist()}; centered only",
            extra={"error_type": "zero_variance"},
        )
    return centered / np.where(flat, 1.0, std)


def compute_features(
    waveform: Waveform, config: MfccConfig, deltas: bool = True, normalize: bool = True
) -> FloatArray:
    """MFCCs, optionally with deltas and normalization (39 dims by default)."""
    feat = extract_mfcc(waveform, config)
    if deltas:
        feat = append_deltas(feat)
    if normalize:
        feat = cmvn(feat)
    return feat


def signal_power(samples: npt.ArrayLike) -> float:
    values = np.asarray(samples, dtype=np.float64)
    return float(np.mean(values * values))


def mix_noise(speech: Waveform, noise: Waveform, snr_db: float, rng: RngStream) -> Waveform:
    """
    Add noise at a target signal-to-noise ratio over the whole utterance.

    The noise segment starts at a random offset and is tiled when shorter than the speech.
    The sum is clipped to [-1, 1]; the number of clipped samples is logged.
    """
    if speech.sample_rate != noise.sample_rate:
        raise DataError(
            f"Sample rates differ: speech {speech.sample_rate} Hz, noise {noise.sample_rate} Hz"
        )
    speech_power = signal_power(speech.samples)
    if speech_power == 0:
        raise DataError("Cannot set an SNR for silent speech")

    length = speech.samples.size
    if noise.samples.size >= length:
        offset = int(rng.integers(0, noise.samples.size - length + 1))
        segment = noise.samples[offset : offset + length]
    else:
        offset = int(rng.integers(0, noise.samples.size))
        segment = np.resize(np.roll(noise.samples, -offset), length)
    noise_power = signal_power(segment)
    if noise_power == 0:
        raise DataError("Noise segment is silent")

    gain = np.sqrt(speech_power / (noise_power * 10.0 ** (snr_db / 10.0)))
    mixed = speech.samples + gain * segment
    clipped = int(np.count_nonzero(np.abs(mixed) > 1.0))
    if clipped:
        logger.warning(f"Clipped {clipped} samples after mixing noise at {snr_db} dB SNR")
    return Waveform(np.clip(mixed, -1.0, 1.0), speech.sample_rate)


def gen_noise(kind: str, length: int, sample_rate: int, rng: RngStream) -> Waveform:
    """
    Generate white or pink noise scaled to an RMS of 0.1.

    Pink noise shapes a white spectrum by ``1/sqrt(f)`` (power falling 3 dB per octave).
    """
    if length <= 0:
        raise DataError(f"Noise length must be positive, got {length}")
    white = rng.standard_normal(length)
    if kind == "white":
        samples = white
    elif kind == "pink":
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(length, d=1.0 / sample_rate)
        shaping = np.zeros_like(freqs)
        shaping[1:] = 1.0 / np.sqrt(freqs[1:])
        samples = np.fft.irfft(spectrum * shaping, n=length)
    else:
        raise DataError(f"Unknown noise kind: {kind!r} (expected 'white' or 'pink')")
    rms = np.sqrt(signal_power(samples))
    if rms == 0:
        return Waveform(np.zeros(length), sample_rate)
    return Waveform(np.clip(samples * (NOISE_RMS / rms), -1.0, 1.0), sample_rate)
