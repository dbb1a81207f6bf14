"""Log-mel filterbank front end (80 bands, 25 ms frames, 10 ms shift).

The defaults follow the usual Kaldi-style filterbank recipe at 16 kHz: a
Hamming window, pre-emphasis 0.97, HTK mel scale between 20 Hz and 7600 Hz,
and an additive energy floor of 1e-10 before the log. Every one of these is a
field on :class:`FeatureConfig`.
"""

from __future__ import annotations

import hashlib
import io
import json
import wave
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, FormatError

__all__ = [
    "AudioSignal",
    "FeatureConfig",
    "FeatureMatrix",
    "frame_signal",
    "log_mel_filterbank",
    "featurize",
    "mel_filterbank",
    "mel_center_frequencies",
    "power_spectrum",
    "read_wav",
    "write_wav",
]


@dataclass(frozen=True)
class AudioSignal:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size < 1:
            raise DataError("audio must be a non-empty mono sample sequence")
        if int(self.sample_rate) <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    frame_len_ms: float = 25.0
    frame_shift_ms: float = 10.0
    n_mels: int = 80
    fft_size: int | None = None
    low_freq: float = 20.0
    high_freq: float = 7600.0
    preemphasis: float = 0.97
    dither: float = 0.0
    window: str = "hamming"
    energy_floor: float = 1e-10

    def __post_init__(self):
        if self.n_mels < 1:
            raise ConfigError("n_mels must be >= 1")
        if not 0.0 < self.low_freq < self.high_freq <= self.sample_rate / 2:
            raise ConfigError(
                f"need 0 < low_freq < high_freq <= {self.sample_rate / 2}, "
                f"got {self.low_freq}, {self.high_freq}"
            )
        if not 0.0 <= self.preemphasis < 1.0:
            raise ConfigError("preemphasis must lie in [0, 1)")
        if self.dither < 0:
            raise ConfigError("dither must be non-negative")
        if self.window not in _WINDOWS:
            raise ConfigError(f"unknown window {self.window!r}; choose from {sorted(_WINDOWS)}")
        if self.frame_shift_samples < 1:
            raise ConfigError("frame shift is shorter than one sample")
        n_fft = self.n_fft
        if n_fft & (n_fft - 1) or n_fft < self.frame_len_samples:
            raise ConfigError(
                f"fft_size must be a power of two >= {self.frame_len_samples}, got {n_fft}"
            )

    @property
    def frame_len_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_len_ms / 1000.0))

    @property
    def frame_shift_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_shift_ms / 1000.0))

    @property
    def n_fft(self) -> int:
        if self.fft_size is not None:
            return int(self.fft_size)
        return 1 << max(0, (self.frame_len_samples - 1).bit_length())

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class FeatureMatrix:
    """``frames`` is T x n_mels; rows are time."""

    frames: np.ndarray
    utterance_id: str = ""
    config_hash: str = ""

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def _povey(n):
    return (0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / (n - 1))) ** 0.85


_WINDOWS = {
    "hamming": lambda n: np.hamming(n),
    "hann": lambda n: np.hanning(n),
    "povey": _povey,
    "rectangular": lambda n: np.ones(n),
}


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(config: FeatureConfig) -> np.ndarray:
    """Center frequency in Hz of every mel band."""
    edges = np.linspace(_hz_to_mel(config.low_freq), _hz_to_mel(config.high_freq), config.n_mels + 2)
    return _mel_to_hz(edges[1:-1])


def mel_filterbank(config: FeatureConfig) -> np.ndarray:
    """Triangular filters, shape (n_mels, n_fft // 2 + 1).

    Triangles are linear on the mel axis with unit peak, so adjacent filters
    sum to at most one at every frequency.
    """
    n_bins = config.n_fft // 2 + 1
    bin_mel = _hz_to_mel(np.arange(n_bins) * config.sample_rate / config.n_fft)
    edges = np.linspace(_hz_to_mel(config.low_freq), _hz_to_mel(config.high_freq), config.n_mels + 2)
    left, center, right = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_mel - left) / (center - left)
    down = (right - bin_mel) / (right - center)
    return np.clip(np.minimum(up, down), 0.0, None)


def frame_signal(signal: AudioSignal, config: FeatureConfig, rng=None) -> np.ndarray:
    """Slice ``signal`` into windowed, pre-emphasized frames.

    Returns an array of shape (T, frame_len_samples) where
    ``T = 1 + (N - frame_len) // shift``; the trailing partial frame is dropped.
    ``rng`` is only consulted when ``config.dither > 0``.
    """
    if signal.sample_rate != config.sample_rate:
        raise ConfigError(
            f"signal sample rate {signal.sample_rate} != config sample rate {config.sample_rate}"
        )
    flen, shift = config.frame_len_samples, config.frame_shift_samples
    n = signal.samples.size
    if n < flen:
        raise DataError(f"utterance too short: need at least {flen} samples, got {n}")
    frames = np.lib.stride_tricks.sliding_window_view(signal.samples, flen)[::shift].copy()
    if config.dither > 0:
        rng = np.random.default_rng(rng)
        frames += config.dither * rng.standard_normal(frames.shape)
    if config.preemphasis:
        frames[:, 1:] -= config.preemphasis * frames[:, :-1].copy()
        frames[:, 0] -= config.preemphasis * frames[:, 0]
    return frames * _WINDOWS[config.window](flen)


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
    """One-sided power spectrum |X_k|^2, k = 0..n_fft/2, of zero-padded frames."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.shape[-1] > n_fft:
        raise ConfigError(f"frame length {frames.shape[-1]} exceeds fft size {n_fft}")
    spec = np.fft.rfft(frames, n=n_fft, axis=-1)
    return spec.real**2 + spec.imag**2


def log_mel_filterbank(frame: np.ndarray, config: FeatureConfig, filters=None) -> np.ndarray:
    """Log mel energies ``log(E_m + energy_floor)`` of one frame (or a stack of frames)."""
    if filters is None:
        filters = mel_filterbank(config)
    energies = power_spectrum(frame, config.n_fft) @ filters.T
    return np.log(energies + config.energy_floor)


def featurize(signal: AudioSignal, config: FeatureConfig = FeatureConfig(), utterance_id="", rng=None) -> FeatureMatrix:
    frames = frame_signal(signal, config, rng=rng)
    feats = log_mel_filterbank(frames, config)
    if not np.all(np.isfinite(feats)):
        raise DataError(f"non-finite filterbank output for {utterance_id or 'utterance'}")
    return FeatureMatrix(feats, utterance_id, config.digest())


def read_wav(source) -> AudioSignal:
    """Read a RIFF/WAVE file holding mono 16-bit signed PCM.

    ``source`` is a path or raw bytes. Samples are scaled by 1/32768.
    """
    fh = io.BytesIO(source) if isinstance(source, (bytes, bytearray)) else open(Path(source), "rb")
    name = "<bytes>" if isinstance(source, (bytes, bytearray)) else str(source)
    try:
        with wave.open(fh, "rb") as wf:
            channels, width, rate = wf.getnchannels(), wf.getsampwidth(), wf.getframerate()
            if channels != 1:
                raise FormatError(f"{name}: expected mono audio, found {channels} channels")
            if width != 2:
                raise FormatError(f"{name}: expected 16-bit PCM, found {8 * width}-bit samples")
            raw = wf.readframes(wf.getnframes())
    except (wave.Error, EOFError) as exc:
        raise FormatError(f"{name}: unsupported or malformed WAV ({exc}); need PCM 16-bit mono") from exc
    finally:
        fh.close()
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioSignal(data, rate)


def write_wav(path, signal: AudioSignal) -> None:
    pcm = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(signal.sample_rate)
        wf.writeframes(pcm.tobytes())
