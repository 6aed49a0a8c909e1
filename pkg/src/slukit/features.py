"""Acoustic front-end: waveform -> log-mel filterbank -> utterance CMVN
-> temporal downsampling with frame stacking.

Conventions not pinned elsewhere, frozen here and by the golden-file tests:
Hamming window, no pre-emphasis, power spectrum, mel scale
2595*log10(1 + f/700) spanning 0..8000 Hz, energy floor 1e-10 before the
natural log. Frames are computed in float64 and stored as float32.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError, InputError

ENERGY_FLOOR = 1e-10
VAR_FLOOR = 1e-8


@dataclass
class Waveform:
    samples: np.ndarray  # f32, mono
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class FeatureConfig:
    n_mels: int = 80
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    downsample_factor: int = 3
    stack_size: int = 4
    fft_size: int = 512
    sample_rate: int = 16000
    fmin: float = 0.0
    fmax: float = 8000.0
    # the stated pipeline order is downsample first; flipping this flag
    # stacks 4 consecutive frames first and downsamples the stacked rows
    stack_before_downsample: bool = False

    def __post_init__(self):
        if self.frame_shift_ms > self.frame_length_ms:
            raise ConfigError("frame shift must not exceed frame length")
        if self.downsample_factor < 1 or self.stack_size < 1:
            raise ConfigError("downsample_factor and stack_size must be >= 1")
        if self.fft_size < self.frame_samples:
            raise ConfigError(
                f"fft_size {self.fft_size} smaller than frame of {self.frame_samples} samples"
            )
        if self.fft_size & (self.fft_size - 1):
            raise ConfigError(f"fft_size must be a power of two, got {self.fft_size}")

    @property
    def frame_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_length_ms / 1000.0))

    @property
    def shift_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_shift_ms / 1000.0))

    @property
    def stacked_dim(self) -> int:
        return self.n_mels * self.stack_size


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # T x d, f32

    def __post_init__(self):
        frames = np.asarray(self.frames)
        if frames.ndim != 2:
            raise DimensionError(f"feature matrix must be 2-D, got shape {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise InputError("feature matrix contains non-finite entries")
        self.frames = np.ascontiguousarray(frames, dtype=np.float32)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """(n_mels, fft_size//2 + 1) triangular filters, f64."""
    n_bins = cfg.fft_size // 2 + 1
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_hz = np.arange(n_bins, dtype=np.float64) * cfg.sample_rate / cfg.fft_size
    weights = np.zeros((cfg.n_mels, n_bins), dtype=np.float64)
    for m in range(cfg.n_mels):
        left, center, right = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        rise = (bin_hz - left) / (center - left)
        fall = (right - bin_hz) / (right - center)
        weights[m] = np.maximum(0.0, np.minimum(rise, fall))
    return weights


def frame_count(n_samples: int, cfg: FeatureConfig) -> int:
    if n_samples < cfg.frame_samples:
        raise InputError(
            f"waveform of {n_samples} samples is shorter than one "
            f"{cfg.frame_samples}-sample frame"
        )
    return 1 + (n_samples - cfg.frame_samples) // cfg.shift_samples


def compute_fbank(w: Waveform, cfg: FeatureConfig) -> FeatureMatrix:
    """Log-mel filterbank energies, one row per frame."""
    if w.sample_rate != cfg.sample_rate:
        raise ConfigError(
            f"waveform sample rate {w.sample_rate} does not match configured {cfg.sample_rate}"
        )
    n = w.samples.size
    t = frame_count(n, cfg)
    flen, shift = cfg.frame_samples, cfg.shift_samples
    idx = np.arange(flen)[None, :] + shift * np.arange(t)[:, None]
    frames = w.samples.astype(np.float64)[idx]
    frames = frames * np.hamming(flen)
    spec = np.fft.rfft(frames, n=cfg.fft_size, axis=1)
    power = spec.real**2 + spec.imag**2
    energies = power @ mel_filterbank(cfg).T
    logmel = np.log(np.maximum(energies, ENERGY_FLOOR))
    return FeatureMatrix(logmel.astype(np.float32))


def cmvn_utterance(f: FeatureMatrix) -> FeatureMatrix:
    """Normalize each dimension to zero mean and unit variance over the
    utterance. Statistics are accumulated in float64; a (near-)constant
    dimension maps to zeros through the variance floor."""
    if f.num_frames < 2:
        raise InputError(f"CMVN needs at least 2 frames, got {f.num_frames}")
    x = f.frames.astype(np.float64)
    mu = x.mean(axis=0)
    var = x.var(axis=0)
    out = (x - mu) / np.sqrt(np.maximum(var, VAR_FLOOR))
    return FeatureMatrix(out.astype(np.float32))


def downsample_stack(f: FeatureMatrix, cfg: FeatureConfig) -> FeatureMatrix:
    """Keep every downsample_factor-th frame starting at 0, then widen each
    kept row by concatenating the next stack_size-1 kept rows, repeating the
    final row past the right edge. Output: ceil(T/factor) x (d*stack_size).

    With stack_before_downsample the same two steps run in the other order.
    """
    if f.num_frames < 1:
        raise InputError("downsample_stack on an empty feature matrix")
    if cfg.stack_before_downsample:
        stacked = _stack(f.frames, cfg.stack_size)
        return FeatureMatrix(stacked[:: cfg.downsample_factor])
    kept = f.frames[:: cfg.downsample_factor]
    return FeatureMatrix(_stack(kept, cfg.stack_size))


def _stack(rows: np.ndarray, k: int) -> np.ndarray:
    t = rows.shape[0]
    cols = []
    for off in range(k):
        sel = np.minimum(np.arange(t) + off, t - 1)
        cols.append(rows[sel])
    return np.concatenate(cols, axis=1)


def extract_features(w: Waveform, cfg: FeatureConfig) -> FeatureMatrix:
    """Full front-end: fbank -> CMVN -> downsample+stack."""
    return downsample_stack(cmvn_utterance(compute_fbank(w, cfg)), cfg)


# ---------------------------------------------------------------------------
# WAV I/O (16-bit signed little-endian PCM, mono)


def read_wav(path) -> Waveform:
    with wave.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1:
            raise InputError(f"{path}: expected mono audio, got {fh.getnchannels()} channels")
        if fh.getsampwidth() != 2:
            raise InputError(f"{path}: expected 16-bit PCM, got {8 * fh.getsampwidth()}-bit")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    ints = np.frombuffer(raw, dtype="<i2")
    return Waveform(ints.astype(np.float32) / 32768.0, sample_rate=rate)


def write_wav(path, w: Waveform):
    clipped = np.clip(w.samples, -1.0, 32767.0 / 32768.0)
    ints = np.round(clipped * 32768.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(w.sample_rate)
        fh.writeframes(ints.tobytes())


def save_features(path, f: FeatureMatrix, meta: dict | None = None):
    """Store a feature matrix in the named-tensor container format."""
    from . import transfer
    from .autodiff import Tensor

    md = {"kind": "features"}
    if meta:
        md.update({str(k): str(v) for k, v in meta.items()})
    transfer.save_checkpoint(path, {"frames": Tensor(f.frames)}, md)


def load_features(path) -> FeatureMatrix:
    from . import transfer

    ckpt = transfer.load_checkpoint(path)
    if "frames" not in ckpt.tensors:
        raise InputError(f"{path}: no 'frames' tensor in container")
    return FeatureMatrix(ckpt.tensors["frames"].data)
