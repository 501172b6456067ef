"""Acoustic front-end: WAV decoding, log-Mel spectrograms and DSAF normalization.

Everything here is a pure function of its inputs. Features are stored as
``float64`` arrays shaped ``(n_mels, frames)``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LOG_FLOOR = 1e-10
DSF_MAGIC = b"DSF1"


class FrontEndError(ValueError):
    """Base class for front-end failures."""


class MalformedHeaderError(FrontEndError):
    pass


class UnsupportedEncodingError(FrontEndError):
    pass


class TruncatedDataError(FrontEndError):
    pass


class AudioTooShortError(FrontEndError):
    pass


@dataclass(frozen=True)
class RawAudio:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.size == 0:
            raise ValueError("audio is empty")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio contains non-finite samples")


@dataclass(frozen=True)
class FrontEndConfig:
    n_mels: int = 40
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int | None = None  # None: next power of two >= window
    fmin: float = 0.0
    fmax: float | None = None  # None: Nyquist
    frames: int = 100  # L
    eta0: float = 1e-5
    dsaf: bool = True

    def window_length(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.win_ms / 1000.0))

    def hop_length(self, sample_rate: int) -> int:
        return int(round(sample_rate * self.hop_ms / 1000.0))


# --------------------------------------------------------------------------
# WAV decoding


def decode_wav(data: bytes) -> RawAudio:
    """Decode a 16-bit PCM mono RIFF/WAVE byte string."""
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise MalformedHeaderError("not a RIFF/WAVE stream")

    fmt = None
    pcm = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            if len(body) < 16:
                raise MalformedHeaderError("fmt chunk too short")
            fmt = struct.unpack("<HHIIHH", body[:16])
        elif chunk_id == b"data":
            if fmt is None:
                raise MalformedHeaderError("data chunk before fmt chunk")
            if len(body) < size:
                raise TruncatedDataError(f"data chunk declares {size} bytes, found {len(body)}")
            pcm = body
            break
        pos += 8 + size + (size & 1)

    if fmt is None:
        raise MalformedHeaderError("missing fmt chunk")
    if pcm is None:
        raise TruncatedDataError("missing data chunk")

    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1 or bits != 16 or channels != 1:
        raise UnsupportedEncodingError(
            f"need 16-bit PCM mono, got format={audio_format} channels={channels} bits={bits}"
        )
    if len(pcm) % 2:
        raise TruncatedDataError("odd number of bytes in 16-bit data chunk")
    if sample_rate == 0:
        raise MalformedHeaderError("sample rate is zero")
    samples = np.frombuffer(pcm, dtype="<i2").astype(np.float64) / 32768.0
    if samples.size == 0:
        raise TruncatedDataError("no samples")
    return RawAudio(samples=samples, sample_rate=int(sample_rate))


def encode_wav(audio: RawAudio) -> bytes:
    """Inverse of :func:`decode_wav` (clips to the int16 range)."""
    ints = np.clip(np.round(audio.samples * 32768.0), -32768, 32767).astype("<i2")
    pcm = ints.tobytes()
    fmt = struct.pack("<HHIIHH", 1, 1, audio.sample_rate, audio.sample_rate * 2, 2, 16)
    body = b"WAVE" + b"fmt " + struct.pack("<I", 16) + fmt + b"data" + struct.pack("<I", len(pcm)) + pcm
    return b"RIFF" + struct.pack("<I", len(body)) + body


# --------------------------------------------------------------------------
# log-Mel


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """Center frequencies (Hz) of the triangular filters."""
    mels = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    return mel_to_hz(mels[1:-1])


def mel_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float = 0.0, fmax: float | None = None) -> np.ndarray:
    """Triangular HTK-scale filterbank of shape ``(n_mels, n_fft // 2 + 1)``."""
    fmax = sample_rate / 2.0 if fmax is None else fmax
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bins = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def log_mel(audio: RawAudio, cfg: FrontEndConfig = FrontEndConfig()) -> np.ndarray:
    """Log-Mel energies ``(n_mels, frames)`` of a mono signal.

    Power spectrum of a Hann-windowed STFT (no centering / padding), HTK Mel
    filters, then ``log(energy + 1e-10)``.
    """
    sr = audio.sample_rate
    win = cfg.window_length(sr)
    hop = cfg.hop_length(sr)
    if win < 1 or hop < 1:
        raise FrontEndError("window and hop must cover at least one sample")
    x = audio.samples
    if x.size < win:
        raise AudioTooShortError(f"{x.size} samples is shorter than one {win}-sample window")
    n_fft = cfg.n_fft or 1 << (win - 1).bit_length()
    if n_fft < win:
        raise FrontEndError("n_fft shorter than window")

    n_frames = (x.size - win) // hop + 1
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    # periodic Hann
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(win) / win)
    spec = np.fft.rfft(x[idx] * window, n=n_fft, axis=1)
    power = spec.real ** 2 + spec.imag ** 2
    fb = mel_filterbank(cfg.n_mels, n_fft, sr, cfg.fmin, cfg.fmax)
    return np.log(power @ fb.T + LOG_FLOOR).T


# --------------------------------------------------------------------------
# DSAF


def fix_len(values: np.ndarray, L: int) -> np.ndarray:
    """Truncate to the first ``L`` frames or right-pad with zero frames."""
    if L < 1:
        raise ValueError("L must be >= 1")
    n_mels, frames = values.shape
    if frames >= L:
        return np.array(values[:, :L], dtype=np.float64)
    out = np.zeros((n_mels, L), dtype=np.float64)
    out[:, :frames] = values
    return out


def dsaf(spec: np.ndarray, L: int = 100, eta0: float = 1e-5) -> np.ndarray:
    """Per-utterance standardization followed by fixed-length alignment.

    Mean and population std are scalars over the whole utterance matrix.
    """
    if eta0 <= 0:
        raise ValueError("eta0 must be positive")
    spec = np.asarray(spec, dtype=np.float64)
    if spec.size and spec.max() == spec.min():
        # exact zeros instead of summation round-off
        return fix_len(np.zeros_like(spec), L)
    mu = spec.mean()
    centered = spec - mu
    sd = np.sqrt(np.mean(centered ** 2))
    return fix_len(centered / (sd + eta0), L)


def front_end(spec: np.ndarray, cfg: FrontEndConfig) -> np.ndarray:
    """Apply DSAF when enabled, otherwise only fixed-length alignment."""
    if cfg.dsaf:
        return dsaf(spec, cfg.frames, cfg.eta0)
    return fix_len(np.asarray(spec, dtype=np.float64), cfg.frames)


# --------------------------------------------------------------------------
# DSF1 feature files


def write_features(path: str | Path, values: np.ndarray) -> None:
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    n_mels, frames = values.shape
    with open(path, "wb") as fh:
        fh.write(DSF_MAGIC + struct.pack("<II", n_mels, frames))
        fh.write(np.ascontiguousarray(values, dtype="<f4").tobytes())


def read_features(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != DSF_MAGIC:
        raise MalformedHeaderError(f"{path}: bad DSF1 magic")
    n_mels, frames = struct.unpack("<II", blob[4:12])
    need = 12 + 4 * n_mels * frames
    if len(blob) < need:
        raise TruncatedDataError(f"{path}: expected {need} bytes, found {len(blob)}")
    arr = np.frombuffer(blob[12:need], dtype="<f4").reshape(n_mels, frames)
    return arr.astype(np.float64)
