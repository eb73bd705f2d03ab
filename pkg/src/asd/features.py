"""Log-mel front end: power STFT -> HTK mel filterbank -> dB -> P-frame stacks."""
from __future__ import annotations

import hashlib
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataset import SAMPLE_RATE, AudioClip


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = 1024      # 64 ms at 16 kHz
    hop: int = 512         # 50 % overlap
    n_mels: int = 128
    frames: int = 5
    fmin: float = 0.0
    fmax: float = 8000.0
    eps: float = 1e-12

    @property
    def dim(self) -> int:
        return self.n_mels * self.frames

    def fingerprint(self) -> str:
        text = ";".join(f"{k}={v!r}" for k, v in sorted(asdict(self).items()))
        return hashlib.sha256(text.encode()).hexdigest()


DEFAULT_FEATURES = FeatureConfig()


@dataclass(frozen=True)
class MelSpectrogram:
    frames: np.ndarray  # T x F
    frame_len: int
    hop: int

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_mels(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class MelFrameStack:
    vectors: np.ndarray  # K x D
    context: int

    @property
    def n_vectors(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]


def n_frames(length: int, frame_len: int = 1024, hop: int = 512) -> int:
    """Frame count with the trailing partial frame dropped."""
    if length < frame_len:
        return 0
    return (length - frame_len) // hop + 1


def hann(n: int) -> np.ndarray:
    # periodic form: a bin-centred sinusoid leaks into the two neighbouring bins only
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def power_spectrogram(clip: AudioClip | np.ndarray, frame_len: int = 1024, hop: int = 512) -> np.ndarray:
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if x.size < frame_len:
        raise FeatureError(f"clip of {x.size} samples is shorter than one {frame_len}-sample frame")
    t = n_frames(x.size, frame_len, hop)
    frames = sliding_window_view(x, frame_len)[::hop][:t]
    spec = np.fft.rfft(frames * hann(frame_len), axis=1)
    return spec.real ** 2 + spec.imag ** 2


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """The n_mels + 2 corner frequencies (Hz); filter i peaks at edge i + 1."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(n_mels: int = 128, n_fft: int = 1024, sr: int = SAMPLE_RATE,
                   fmin: float = 0.0, fmax: float = 8000.0) -> np.ndarray:
    """Triangular HTK-mel filters with unit peaks, shape (n_mels, n_fft // 2 + 1)."""
    if n_mels < 1:
        raise FeatureError("n_mels must be >= 1")
    if fmax > sr / 2:
        raise FeatureError(f"fmax {fmax} exceeds Nyquist {sr / 2}")
    if not 0 <= fmin < fmax:
        raise FeatureError("need 0 <= fmin < fmax")
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    edges = mel_band_edges(n_mels, fmin, fmax)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (freqs - lo) / (mid - lo)
    falling = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rising, falling))


_FB_CACHE: dict[tuple, np.ndarray] = {}


def _filterbank(cfg: FeatureConfig) -> np.ndarray:
    key = (cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.fmin, cfg.fmax)
    if key not in _FB_CACHE:
        _FB_CACHE[key] = mel_filterbank(*key)
    return _FB_CACHE[key]


def log_mel(clip: AudioClip | np.ndarray, cfg: FeatureConfig = DEFAULT_FEATURES) -> MelSpectrogram:
    power = power_spectrogram(clip, cfg.n_fft, cfg.hop)
    mel = power @ _filterbank(cfg).T
    return MelSpectrogram(10.0 * np.log10(mel + cfg.eps), cfg.n_fft, cfg.hop)


def stack_frames(spec: MelSpectrogram | np.ndarray, context: int = 5) -> MelFrameStack:
    X = spec.frames if isinstance(spec, MelSpectrogram) else np.asarray(spec)
    t, f = X.shape
    if t < context:
        raise FeatureError("clip too short for context window")
    # window view is (K, F, P); transpose so each row reads X_k, X_k+1, ..., X_k+P-1
    windows = sliding_window_view(X, context, axis=0)
    return MelFrameStack(np.ascontiguousarray(windows.transpose(0, 2, 1)).reshape(t - context + 1, f * context),
                         context)


def clip_features(clip: AudioClip, cfg: FeatureConfig = DEFAULT_FEATURES,
                  dtype=np.float32) -> np.ndarray:
    """Clip -> K x D feature matrix in one call."""
    return stack_frames(log_mel(clip, cfg), cfg.frames).vectors.astype(dtype)


# -- feature cache: "ASDF", version, K, D, then K*D float32 LE ------------

_CACHE_MAGIC = b"ASDF"
_CACHE_VERSION = 1


def save_feature_cache(path: str | Path, vectors: np.ndarray) -> None:
    k, d = vectors.shape
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC + struct.pack("<III", _CACHE_VERSION, k, d))
        fh.write(np.ascontiguousarray(vectors, dtype="<f4").tobytes())


def load_feature_cache(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != _CACHE_MAGIC:
        raise FeatureError(f"{path}: not a feature cache")
    version, k, d = struct.unpack_from("<III", data, 4)
    if version != _CACHE_VERSION:
        raise FeatureError(f"{path}: unsupported cache version {version}")
    body = np.frombuffer(data, dtype="<f4", offset=16)
    if body.size != k * d:
        raise FeatureError(f"{path}: expected {k * d} floats, found {body.size}")
    return body.reshape(k, d).astype(np.float32)
