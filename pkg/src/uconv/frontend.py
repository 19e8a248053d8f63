"""Log-mel features, masking augmentation, normalisation and the on-disk audio/feature formats."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
WIN_LENGTH = 400  # 25 ms
HOP_LENGTH = 160  # 10 ms
N_FFT = 512
N_MELS = 80
LOG_FLOOR = 1e-10
VAR_FLOOR = 1e-8

FEAT_MAGIC = b"FEAT"


class AudioError(ValueError):
    pass


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate != SAMPLE_RATE:
            raise AudioError(f"sample rate must be {SAMPLE_RATE} Hz, got {self.sample_rate}")
        if self.samples.ndim != 1:
            raise AudioError("audio must be mono")


def num_frames(num_samples: int) -> int:
    if num_samples < WIN_LENGTH:
        raise AudioError(f"audio too short: {num_samples} samples < one {WIN_LENGTH}-sample window")
    return (num_samples - WIN_LENGTH) // HOP_LENGTH + 1


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(n_mels: int = N_MELS, fmax: float = SAMPLE_RATE / 2) -> np.ndarray:
    """Hz positions of the n_mels + 2 filter edge points (index m+1 is filter m's centre)."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(fmax), n_mels + 2))


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, sr: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters on the HTK mel scale spanning 0 .. sr/2: ``[n_fft//2 + 1, n_mels]``."""
    edges = mel_center_frequencies(n_mels, sr / 2)
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2], edges[1:-1], edges[2:]
    up = (freqs[:, None] - lo) / (mid - lo)
    down = (hi - freqs[:, None]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


_HANN = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(WIN_LENGTH) / WIN_LENGTH)  # periodic
_FBANK = mel_filterbank()


def extract_logmel(audio: AudioBuffer) -> np.ndarray:
    """``[T, 80]`` natural-log mel energies (power spectrum, 25 ms Hann window, 10 ms hop)."""
    x = audio.samples
    T = num_frames(len(x))
    frames = np.lib.stride_tricks.sliding_window_view(x, WIN_LENGTH)[::HOP_LENGTH][:T]
    bins = np.fft.rfft(frames * _HANN, n=N_FFT, axis=-1)
    power = bins.real ** 2 + bins.imag ** 2
    return np.log(np.maximum(power @ _FBANK, LOG_FLOOR))


@dataclass(frozen=True)
class MaskDraw:
    axis: str  # "freq" or "time"
    start: int
    width: int


def draw_masks(T: int, F: int, seed: int, n_freq: int = 2, max_freq: int = 10,
               n_time: int = 2, time_ratio: float = 0.05) -> list[MaskDraw]:
    """The seeded draw sequence used by :func:`mask_augment`.

    Frequency masks first, then time masks; each draws a width uniformly in
    ``[0, max]`` and then a start uniformly among the positions where it fits.
    """
    rng = np.random.default_rng(seed)
    draws = []
    for _ in range(n_freq):
        w = int(rng.integers(0, min(max_freq, F) + 1))
        draws.append(MaskDraw("freq", int(rng.integers(0, F - w + 1)), w))
    max_t = int(time_ratio * T)
    for _ in range(n_time):
        w = int(rng.integers(0, max_t + 1))
        draws.append(MaskDraw("time", int(rng.integers(0, T - w + 1)), w))
    return draws


def mask_augment(feats: np.ndarray, seed: int, **kw) -> np.ndarray:
    """SpecAugment-style masking; masked cells take the utterance mean."""
    feats = np.asarray(feats)
    T, F = feats.shape
    out = feats.copy()
    fill = feats.mean()
    for m in draw_masks(T, F, seed, **kw):
        if m.axis == "freq":
            out[:, m.start:m.start + m.width] = fill
        else:
            out[m.start:m.start + m.width, :] = fill
    return out


def normalize(feats: np.ndarray, length: int | None = None) -> np.ndarray:
    """Per-dimension zero mean / unit variance over the first ``length`` frames."""
    feats = np.asarray(feats, dtype=np.float64)
    valid = feats[:length] if length is not None else feats
    mu = valid.mean(axis=0)
    var = np.maximum(valid.var(axis=0), VAR_FLOOR)
    return (feats - mu) / np.sqrt(var)


# -- file formats -----------------------------------------------------------------

def read_wav(path) -> AudioBuffer:
    """16-bit little-endian PCM, mono, 16 kHz."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1:
            raise AudioError(f"{path}: expected mono audio, got {w.getnchannels()} channels")
        if w.getsampwidth() != 2:
            raise AudioError(f"{path}: expected 16-bit PCM, got {8 * w.getsampwidth()}-bit")
        if w.getframerate() != SAMPLE_RATE:
            raise AudioError(f"{path}: expected {SAMPLE_RATE} Hz, got {w.getframerate()}")
        raw = w.readframes(w.getnframes())
    return AudioBuffer(np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0)


def write_wav(path, audio: AudioBuffer) -> None:
    pcm = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(SAMPLE_RATE)
        w.writeframes(pcm.tobytes())


def write_feat(path, feats: np.ndarray) -> None:
    feats = np.asarray(feats, dtype="<f4")
    T, dim = feats.shape
    Path(path).write_bytes(FEAT_MAGIC + struct.pack("<II", T, dim) + feats.tobytes())


def read_feat(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != FEAT_MAGIC:
        raise AudioError(f"{path}: bad magic, not a FEAT file")
    if len(data) < 12:
        raise AudioError(f"{path}: truncated header")
    T, dim = struct.unpack("<II", data[4:12])
    if dim != N_MELS:
        raise AudioError(f"{path}: feature dim {dim}, expected {N_MELS}")
    if len(data) != 12 + 4 * T * dim:
        raise AudioError(f"{path}: expected {T}x{dim} floats, got {len(data) - 12} bytes")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(T, dim).astype(np.float64)


def load_features(path) -> np.ndarray:
    """Features from a ``.wav`` (log-mel extracted) or a FEAT file, per-utterance normalised."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == b"RIFF":
        return normalize(extract_logmel(read_wav(path)))
    return read_feat(path)
