"""Audio front-end: WAV decoding, resampling, one-second segmentation, and
the 128x128 log-mel spectrogram every model in this package consumes.

The pipeline is pinned to 48 kHz input: with a 2048-sample window and a
376-sample hop, a centered STFT of one second gives floor(48000/376)+1 = 128
frames, which together with 128 mel bands yields the square input the
transformers expect. Other sample rates are resampled first.

Also hosts the synthetic mode-clip generator used by desk-scale tests and
demos in place of real machine recordings.
"""

from __future__ import annotations

import functools
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AudioFormatError,
    ConfigError,
    DomainError,
    EmptyInputError,
    UnsupportedFormatError,
)

SAMPLE_RATE = 48_000
N_FFT = 2048
HOP_LENGTH = 376
N_MELS = 128
TOP_DB = 80.0

# dB floor before the log, and the variance floor for per-clip standardization
AMIN = 1e-10
VAR_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass
class AudioBuffer:
    samples: np.ndarray  # float64 mono, roughly [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise DomainError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class AudioClip:
    """Exactly one second of mono audio."""

    samples: np.ndarray
    sample_rate: int
    origin: tuple = ("unknown", 0)  # (source id, clip index)

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if len(self.samples) != self.sample_rate:
            raise DomainError(
                f"clip must hold sample_rate samples: got {len(self.samples)} at "
                f"{self.sample_rate} Hz"
            )


@dataclass(frozen=True)
class StftConfig:
    n_fft: int = N_FFT
    win_length: int = N_FFT
    hop_length: int = HOP_LENGTH
    center: bool = True  # reflect padding by n_fft // 2

    def __post_init__(self):
        if self.win_length > self.n_fft:
            raise ConfigError(f"win_length {self.win_length} > n_fft {self.n_fft}")
        if self.hop_length <= 0:
            raise ConfigError(f"hop_length must be positive, got {self.hop_length}")


@dataclass(frozen=True)
class PreprocessConfig:
    """Everything inference needs to reproduce training-time preprocessing.

    Serialized into checkpoints so a deployed model is self-describing.
    """

    sample_rate: int = SAMPLE_RATE
    n_fft: int = N_FFT
    win_length: int = N_FFT
    hop_length: int = HOP_LENGTH
    n_mels: int = N_MELS
    top_db: float = TOP_DB
    standardize: bool = True

    def to_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "n_fft": self.n_fft,
            "win_length": self.win_length,
            "hop_length": self.hop_length,
            "n_mels": self.n_mels,
            "top_db": self.top_db,
            "standardize": self.standardize,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        return cls(**d)

    def stft(self) -> StftConfig:
        return StftConfig(self.n_fft, self.win_length, self.hop_length)


@dataclass
class LogMelSpectrogram:
    values: np.ndarray  # (n_mels, n_frames) float32
    origin: tuple = ("unknown", 0)


# ---------------------------------------------------------------------------
# WAV I/O (RIFF, PCM16/PCM24/float32)
# ---------------------------------------------------------------------------

_WAVE_PCM = 1
_WAVE_FLOAT = 3
_WAVE_EXTENSIBLE = 0xFFFE


def _parse_fmt(chunk: bytes):
    if len(chunk) < 16:
        raise AudioFormatError("fmt chunk too short")
    code, channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", chunk[:16])
    if code == _WAVE_EXTENSIBLE:
        # actual format code lives in the first two bytes of the SubFormat GUID
        if len(chunk) < 26:
            raise AudioFormatError("extensible fmt chunk too short")
        code = struct.unpack("<H", chunk[24:26])[0]
    return code, channels, rate, block_align, bits


def load_wav(path) -> AudioBuffer:
    """Read a RIFF WAV file into a mono AudioBuffer scaled to [-1, 1].

    PCM16 divides by 32768, PCM24 by 2^23; float32 is taken as stored.
    Multichannel input is averaged to mono.
    """
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    payload = None
    off = 12
    while off + 8 <= len(data):
        cid, size = data[off : off + 4], struct.unpack("<I", data[off + 4 : off + 8])[0]
        body = data[off + 8 : off + 8 + size]
        if len(body) < size:
            raise AudioFormatError(f"{path}: truncated {cid!r} chunk")
        if cid == b"fmt ":
            fmt = _parse_fmt(body)
        elif cid == b"data":
            payload = body
        off += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None or payload is None:
        raise AudioFormatError(f"{path}: missing fmt or data chunk")

    code, channels, rate, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise AudioFormatError(f"{path}: invalid fmt (channels={channels}, rate={rate})")

    if code == _WAVE_PCM and bits == 16:
        if len(payload) % 2:
            raise AudioFormatError(f"{path}: PCM16 data not sample-aligned")
        samples = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    elif code == _WAVE_PCM and bits == 24:
        if len(payload) % 3:
            raise AudioFormatError(f"{path}: PCM24 data not sample-aligned")
        b = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        raw = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        raw = np.where(raw & 0x800000, raw - (1 << 24), raw)
        samples = raw.astype(np.float64) / float(1 << 23)
    elif code == _WAVE_FLOAT and bits == 32:
        if len(payload) % 4:
            raise AudioFormatError(f"{path}: float32 data not sample-aligned")
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        raise UnsupportedFormatError(
            f"{path}: unsupported encoding (format code {code}, {bits}-bit); "
            "only PCM16, PCM24 and IEEE float32 are read"
        )

    if channels > 1:
        n = (len(samples) // channels) * channels
        samples = samples[:n].reshape(-1, channels).mean(axis=1)
    if not np.isfinite(samples).all():
        raise AudioFormatError(f"{path}: non-finite sample values")
    return AudioBuffer(samples, rate)


def save_wav(path, samples: np.ndarray, sample_rate: int, encoding: str = "pcm16"):
    """Write mono or multichannel audio; encoding is pcm16, pcm24 or float32."""
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    channels = x.shape[1]
    if encoding == "pcm16":
        code, bits = _WAVE_PCM, 16
        clipped = np.clip(x, -1.0, 32767.0 / 32768.0)
        raw = (clipped * 32768.0).round().astype("<i2").tobytes()
    elif encoding == "pcm24":
        code, bits = _WAVE_PCM, 24
        clipped = np.clip(x, -1.0, (2**23 - 1) / 2**23)
        ints = (clipped * 2**23).round().astype(np.int32).reshape(-1)
        b = np.empty((len(ints), 3), dtype=np.uint8)
        b[:, 0] = ints & 0xFF
        b[:, 1] = (ints >> 8) & 0xFF
        b[:, 2] = (ints >> 16) & 0xFF
        raw = b.tobytes()
    elif encoding == "float32":
        code, bits = _WAVE_FLOAT, 32
        raw = x.astype("<f4").tobytes()
    else:
        raise ConfigError(f"unknown encoding {encoding!r}")

    block_align = channels * bits // 8
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(raw), b"WAVE",
        b"fmt ", 16, code, channels, sample_rate,
        sample_rate * block_align, block_align, bits,
        b"data", len(raw),
    )
    Path(path).write_bytes(header + raw)


# ---------------------------------------------------------------------------
# resampling and segmentation
# ---------------------------------------------------------------------------

def resample(buf: AudioBuffer, target: int) -> AudioBuffer:
    """Linear-interpolation resample. Adequate for the content of interest
    but lossy above Nyquist of the coarser rate."""
    if target <= 0:
        raise DomainError(f"target rate must be positive, got {target}")
    if target == buf.sample_rate:
        return buf
    n_in = len(buf.samples)
    n_out = int(round(n_in * target / buf.sample_rate))
    positions = np.arange(n_out) * (buf.sample_rate / target)
    out = np.interp(positions, np.arange(n_in), buf.samples)
    return AudioBuffer(out, target)


def segment_clips(buf: AudioBuffer, source_id: str = "buffer") -> list[AudioClip]:
    """Non-overlapping consecutive one-second windows; the trailing remainder
    shorter than a second is discarded."""
    sr = buf.sample_rate
    n = len(buf.samples) // sr
    if n == 0:
        raise EmptyInputError(
            f"buffer is {len(buf.samples)} samples, shorter than 1 s at {sr} Hz"
        )
    return [
        AudioClip(buf.samples[i * sr : (i + 1) * sr], sr, origin=(source_id, i))
        for i in range(n)
    ]


# ---------------------------------------------------------------------------
# mel scale and filterbank (Slaney variant, area-normalized)
# ---------------------------------------------------------------------------

_MEL_BREAK_HZ = 1000.0
_MEL_BREAK = 15.0  # 3 * 1000 / 200
_LOGSTEP = math.log(6.4) / 27.0


def hz_to_mel(f):
    """Slaney mel scale: linear below 1 kHz, logarithmic above."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise DomainError("frequency must be non-negative")
    linear = 3.0 * f / 200.0
    with np.errstate(divide="ignore"):
        logpart = _MEL_BREAK + np.log(np.maximum(f, _MEL_BREAK_HZ) / _MEL_BREAK_HZ) / _LOGSTEP
    out = np.where(f < _MEL_BREAK_HZ, linear, logpart)
    return float(out) if out.ndim == 0 else out


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    linear = 200.0 * m / 3.0
    logpart = _MEL_BREAK_HZ * np.exp(_LOGSTEP * (m - _MEL_BREAK))
    out = np.where(m < _MEL_BREAK, linear, logpart)
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray  # (n_mels, n_fft // 2 + 1), non-negative
    sample_rate: int
    n_fft: int
    edges_hz: np.ndarray = field(repr=False)  # (n_mels + 2,)

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    @property
    def center_frequencies(self) -> np.ndarray:
        return self.edges_hz[1:-1]

    def band_support(self, index: int) -> tuple[float, float]:
        """(left, right) Hz edges of one triangular filter."""
        return float(self.edges_hz[index]), float(self.edges_hz[index + 2])


def build_filterbank(sample_rate: int, n_fft: int, n_mels: int,
                     f_min: float = 0.0, f_max: float | None = None) -> MelFilterbank:
    """Triangular mel filters on linear-frequency FFT bins, Slaney
    area-normalized (each row scaled by 2 / (right_edge - left_edge))."""
    if n_mels < 1:
        raise ConfigError(f"n_mels must be >= 1, got {n_mels}")
    if n_fft % 2:
        raise ConfigError(f"n_fft must be even, got {n_fft}")
    if f_max is None:
        f_max = sample_rate / 2.0

    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1) * (sample_rate / n_fft)

    lower = (bin_hz[None, :] - edges[:-2, None]) / (edges[1:-1] - edges[:-2])[:, None]
    upper = (edges[2:, None] - bin_hz[None, :]) / (edges[2:] - edges[1:-1])[:, None]
    weights = np.maximum(0.0, np.minimum(lower, upper))
    weights *= (2.0 / (edges[2:] - edges[:-2]))[:, None]

    if (weights.sum(axis=1) == 0).any():
        empty = int(np.flatnonzero(weights.sum(axis=1) == 0)[0])
        raise ConfigError(
            f"mel filter {empty} has empty support: n_mels={n_mels} too large for "
            f"n_fft={n_fft} at {sample_rate} Hz"
        )
    return MelFilterbank(weights, sample_rate, n_fft, edges)


@functools.lru_cache(maxsize=8)
def _cached_filterbank(sample_rate, n_fft, n_mels):
    return build_filterbank(sample_rate, n_fft, n_mels)


# ---------------------------------------------------------------------------
# spectrogram
# ---------------------------------------------------------------------------

def _periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def stft_power(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """|STFT|^2 with a periodic Hann window: (n_fft//2 + 1, n_frames)."""
    x = np.asarray(samples, dtype=np.float64)
    window = _periodic_hann(cfg.win_length)
    if cfg.win_length < cfg.n_fft:
        padded = np.zeros(cfg.n_fft)
        start = (cfg.n_fft - cfg.win_length) // 2
        padded[start : start + cfg.win_length] = window
        window = padded
    if cfg.center:
        x = np.pad(x, cfg.n_fft // 2, mode="reflect")
        n_frames = 1 + len(samples) // cfg.hop_length
    else:
        n_frames = 1 + (len(samples) - cfg.n_fft) // cfg.hop_length
    if n_frames < 1:
        raise EmptyInputError("input shorter than one analysis window")
    idx = np.arange(n_frames)[:, None] * cfg.hop_length + np.arange(cfg.n_fft)[None, :]
    frames = x[idx] * window
    spectrum = np.fft.rfft(frames, axis=1)
    return (spectrum.real**2 + spectrum.imag**2).T


def clip_to_spectrogram(clip: AudioClip, cfg: StftConfig | None = None,
                        fb: MelFilterbank | None = None, top_db: float = TOP_DB,
                        standardize: bool = True) -> LogMelSpectrogram:
    """One-second clip -> (n_mels, 128) dB-scaled mel image.

    Power STFT, mel projection, 10 log10 with a 1e-10 floor, clamp to the
    top `top_db` dB, then per-clip standardization (zero mean, unit
    variance with a 1e-8 variance floor, so silent clips come out all-zero).
    """
    cfg = cfg or StftConfig()
    fb = fb or _cached_filterbank(SAMPLE_RATE, cfg.n_fft, N_MELS)
    if clip.sample_rate != fb.sample_rate:
        raise ConfigError(
            f"clip at {clip.sample_rate} Hz but filterbank built for {fb.sample_rate} Hz; "
            "resample first"
        )
    power = stft_power(clip.samples, cfg)
    mel_power = fb.weights @ power
    db = 10.0 * np.log10(np.maximum(mel_power, AMIN))
    db = np.maximum(db, db.max() - top_db)
    if standardize:
        db = (db - db.mean()) / np.sqrt(max(db.var(), VAR_FLOOR))
    return LogMelSpectrogram(db.astype(np.float32), origin=clip.origin)


def spectrogram(clip: AudioClip, pre: PreprocessConfig | None = None) -> LogMelSpectrogram:
    """clip_to_spectrogram driven by a PreprocessConfig (checkpoint settings)."""
    pre = pre or PreprocessConfig()
    fb = _cached_filterbank(pre.sample_rate, pre.n_fft, pre.n_mels)
    return clip_to_spectrogram(clip, pre.stft(), fb, pre.top_db, pre.standardize)


def spectrogram_batch(clips, pre: PreprocessConfig | None = None) -> np.ndarray:
    """Stack of spectrogram values for a sequence of clips: (N, n_mels, frames)."""
    return np.stack([spectrogram(c, pre).values for c in clips])


# ---------------------------------------------------------------------------
# synthetic mode corpus
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ModeSpec:
    """Recipe for one synthetic operational-mode sound: a harmonic stack at
    base_freq plus band-limited noise at the given SNR. harmonics=0 gives a
    noise-only mode; snr_db=inf gives a noiseless tone."""

    mode_id: int
    base_freq: float
    harmonics: int
    noise_low: float
    noise_high: float
    snr_db: float

    # RMS of the tonal component; noise RMS is derived from it via the SNR
    tone_rms: float = 0.1

    def __post_init__(self):
        if self.base_freq < 0:
            raise DomainError(f"base_freq must be >= 0, got {self.base_freq}")
        if self.harmonics < 0:
            raise DomainError(f"harmonics must be >= 0, got {self.harmonics}")
        if not 0 <= self.noise_low <= self.noise_high:
            raise ConfigError(f"bad noise band ({self.noise_low}, {self.noise_high})")


def synth_mode_clip(spec: ModeSpec, rng: np.random.Generator,
                    sample_rate: int = SAMPLE_RATE, origin=None) -> AudioClip:
    """Deterministic given (spec, rng state): random phases and the noise
    realization are the only stochastic parts."""
    if spec.base_freq >= sample_rate / 2:
        raise DomainError(
            f"base_freq {spec.base_freq} at or above Nyquist for {sample_rate} Hz"
        )
    t = np.arange(sample_rate) / sample_rate
    signal = np.zeros(sample_rate)
    if spec.harmonics > 0 and spec.base_freq > 0:
        for k in range(1, spec.harmonics + 1):
            f = k * spec.base_freq
            if f >= sample_rate / 2:
                break
            phase = rng.uniform(0.0, 2.0 * np.pi)
            signal += np.sin(2.0 * np.pi * f * t + phase) / k
        rms = np.sqrt((signal**2).mean())
        if rms > 0:
            signal *= spec.tone_rms / rms

    noise_rms = spec.tone_rms / (10.0 ** (spec.snr_db / 20.0))
    if noise_rms > 0:
        white = rng.standard_normal(sample_rate)
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(sample_rate, 1.0 / sample_rate)
        spectrum[(freqs < spec.noise_low) | (freqs > spec.noise_high)] = 0.0
        noise = np.fft.irfft(spectrum, n=sample_rate)
        rms = np.sqrt((noise**2).mean())
        if rms > 0:
            signal = signal + noise * (noise_rms / rms)

    return AudioClip(signal, sample_rate, origin=origin or (f"synth-mode{spec.mode_id}", 0))


def default_mode_specs() -> list[ModeSpec]:
    """Ten desk-scale modes: off, idle, and eight cutting modes spanning two
    depths and four spindle speeds (2-flute tooth-passing fundamentals)."""
    specs = [
        ModeSpec(0, 0.0, 0, 100.0, 4000.0, 26.0),      # off: faint broadband hiss
        ModeSpec(1, 120.0, 2, 100.0, 2000.0, 20.0),    # idle hum, no cutting
    ]
    speeds = [6000, 8000, 10000, 12000]
    for j, rpm in enumerate(speeds):  # 1 mm axial depth
        f0 = rpm / 60.0 * 2
        specs.append(ModeSpec(2 + j, f0, 6, 2000.0, 6000.0, 14.0))
    for j, rpm in enumerate(speeds):  # 3 mm axial depth: richer, noisier
        f0 = rpm / 60.0 * 2
        specs.append(ModeSpec(6 + j, f0, 12, 2000.0, 10000.0, 6.0))
    return specs


def mode_clip_rng(seed, mode_id: int, index: int) -> np.random.Generator:
    """Independent deterministic stream for clip `index` of a mode."""
    return np.random.default_rng((seed, mode_id, index))


def make_mode_clips(spec: ModeSpec, count: int, seed,
                    sample_rate: int = SAMPLE_RATE) -> list[AudioClip]:
    return [
        synth_mode_clip(
            spec, mode_clip_rng(seed, spec.mode_id, i), sample_rate,
            origin=(f"synth-mode{spec.mode_id}", i),
        )
        for i in range(count)
    ]
