"""Audio ingestion: WAV decoding, mixdown, resampling and synthetic corpora."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
import scipy.io.wavfile
import scipy.signal

CANONICAL_RATE = 44100
N_FOLDS = 10

# half-width of the anti-alias filter, in units of the larger rate factor;
# gives 64 taps per polyphase branch
_HALF_TAPS_PER_PHASE = 32
_KAISER_BETA = 8.6


class AudioError(Exception):
    """Base class for audio ingestion failures."""


class AudioReadError(AudioError):
    """The file could not be opened or parsed as RIFF/WAVE."""


class UnsupportedEncodingError(AudioError):
    """The WAV file uses a sample encoding we do not decode."""


class EmptyAudioError(AudioError):
    """The file decoded to zero samples."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.shape[-1] / self.sample_rate

    def __len__(self):
        return self.samples.shape[-1]


def to_float(data: np.ndarray) -> np.ndarray:
    """Scale raw PCM data to [-1, 1] by the format's full-scale value."""
    if data.dtype == np.uint8:
        return (data.astype(np.float64) - 128.0) / 128.0
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.int32:
        # 24-bit PCM arrives left-justified in int32, so one scale covers both
        return data.astype(np.float64) / 2147483648.0
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float64)
    raise UnsupportedEncodingError(f"unsupported sample type {data.dtype}")


def mixdown(samples: np.ndarray) -> np.ndarray:
    """Average channels (samples x channels) into one channel."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim == 1:
        return samples
    if samples.ndim != 2:
        raise ValueError("expected (samples,) or (samples, channels)")
    return samples.mean(axis=1)


def _antialias_filter(up: int, down: int) -> np.ndarray:
    max_rate = max(up, down)
    half_len = _HALF_TAPS_PER_PHASE * max_rate
    return scipy.signal.firwin(2 * half_len + 1, 1.0 / max_rate,
                               window=("kaiser", _KAISER_BETA))


def resample(samples: np.ndarray, rate: int, target: int = CANONICAL_RATE) -> np.ndarray:
    """Polyphase windowed-sinc resampling of a mono signal.

    The output length is ``round(len(samples) * target / rate)`` so the
    duration is preserved to within one output sample.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if rate == target:
        return samples.copy()
    ratio = Fraction(target, rate)
    up, down = ratio.numerator, ratio.denominator
    out = scipy.signal.resample_poly(samples, up, down,
                                     window=_antialias_filter(up, down))
    n_out = int(math.floor(len(samples) * target / rate + 0.5))
    if len(out) >= n_out:
        return out[:n_out]
    return np.concatenate([out, np.zeros(n_out - len(out))])


def canonicalize(samples: np.ndarray, rate: int) -> Waveform:
    """Mix down to mono and resample to the canonical rate."""
    mono = mixdown(samples)
    return Waveform(resample(mono, rate), CANONICAL_RATE)


def load_clip(path) -> Waveform:
    """Read a PCM WAV file as a mono waveform at 44.1 kHz.

    Raises:
        AudioReadError: if the file is missing or not a parseable WAV.
        UnsupportedEncodingError: for non-PCM / unknown sample formats.
        EmptyAudioError: if the file holds no samples.
    """
    try:
        rate, data = scipy.io.wavfile.read(os.fspath(path))
    except FileNotFoundError as e:
        raise AudioReadError(f"{path}: {e}") from e
    except ValueError as e:
        msg = str(e)
        if "format" in msg.lower() and "not supported" in msg.lower() or "Unknown wave file format" in msg:
            raise UnsupportedEncodingError(f"{path}: {msg}") from e
        raise AudioReadError(f"{path}: {msg}") from e
    except (OSError, EOFError) as e:
        raise AudioReadError(f"{path}: {e}") from e
    if data.shape[0] == 0:
        raise EmptyAudioError(f"{path}: zero-length audio")
    return canonicalize(to_float(data), rate)


def write_clip(path, w: Waveform):
    """Write a waveform as 16-bit PCM (values clipped to full scale)."""
    pcm = np.clip(np.round(w.samples * 32767.0), -32768, 32767).astype(np.int16)
    scipy.io.wavfile.write(os.fspath(path), w.sample_rate, pcm)


# ---------------------------------------------------------------------------
# synthetic corpora

@dataclass
class SynthClass:
    """One synthetic event class.

    kind is ``tone`` (freq), ``noise`` (band-limited noise between low and
    high) or ``chirp`` (linear sweep from low to high). ``amplitude`` is the
    peak level of tones and chirps and the RMS level of band noise; each clip
    scales it by a gain drawn from ``[1 - gain_jitter, 1]``.
    """
    name: str
    kind: str
    freq: float = 1000.0
    low: float = 500.0
    high: float = 4000.0
    amplitude: float = 0.5
    gain_jitter: float = 0.3
    category: str | None = None

    def __post_init__(self):
        if self.kind not in ("tone", "noise", "chirp"):
            raise ValueError(f"unknown synthetic class kind {self.kind!r}")
        if not 0 <= self.gain_jitter < 1:
            raise ValueError("gain_jitter must lie in [0, 1)")


# Benchmark corpus: faint events over a shared white noise bed. Every class
# is still perfectly separable, but all clips share the bed's Gaussians, so
# the events show up as shifts of adapted means as well as in posterior mass.
DEFAULT_CLASSES = (
    SynthClass("tone", "tone", freq=1000.0, amplitude=0.014),
    SynthClass("noise", "noise", low=4000.0, high=8000.0, amplitude=0.02),
    SynthClass("chirp", "chirp", low=200.0, high=12000.0, amplitude=0.012),
)
DEFAULT_BACKGROUND = 0.05
DEFAULT_SECONDS = 4.0


def synth_clip(cls: SynthClass, seconds: float, rng: np.random.Generator,
               rate: int = CANONICAL_RATE, background: float = 0.0) -> np.ndarray:
    """Generate one clip of a synthetic class with mild random variation.

    ``background`` is the RMS level of a white Gaussian bed added to every
    clip at the same level.
    """
    n = int(round(seconds * rate))
    t = np.arange(n) / rate
    gain = cls.amplitude * rng.uniform(1.0 - cls.gain_jitter, 1.0)
    if cls.kind == "tone":
        phase = rng.uniform(0, 2 * np.pi)
        x = np.sin(2 * np.pi * cls.freq * t + phase)
    elif cls.kind == "chirp":
        x = scipy.signal.chirp(t, f0=cls.low, t1=max(seconds, 1e-9), f1=cls.high,
                               phi=rng.uniform(0, 360))
    else:
        sos = scipy.signal.butter(6, [cls.low, cls.high], btype="bandpass",
                                  fs=rate, output="sos")
        x = scipy.signal.sosfilt(sos, rng.standard_normal(n))
        x /= max(np.sqrt(np.mean(x ** 2)), 1e-12)
    x = gain * x
    if background > 0:
        x += background * rng.standard_normal(n)
    else:
        # keep silence out of the log filterbank
        x += 1e-3 * rng.standard_normal(n)
    return np.clip(x, -1.0, 1.0)


def synth_dataset(out_dir, classes=DEFAULT_CLASSES, n_clips_per_class: int = 20,
                  clip_seconds: float = DEFAULT_SECONDS, seed: int = 0,
                  manifest_name: str = "manifest.csv",
                  background: float = DEFAULT_BACKGROUND) -> Path:
    """Write a labelled synthetic corpus plus a generic manifest CSV.

    The j-th clip of every class goes to fold ``j % 10 + 1``.

    Returns:
        path of the written manifest.
    """
    if n_clips_per_class < 1:
        raise ValueError("n_clips_per_class must be >= 1")
    out_dir = Path(out_dir)
    try:
        (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise AudioError(f"cannot create output directory {out_dir}: {e}") from e

    rows = []
    for ci, cls in enumerate(classes):
        # per-class stream so adding a class does not perturb the others
        rng = np.random.default_rng([seed, ci])
        for j in range(n_clips_per_class):
            clip_id = f"{cls.name}_{j:04d}"
            rel = Path("audio") / f"{clip_id}.wav"
            x = synth_clip(cls, clip_seconds, rng, background=background)
            try:
                write_clip(out_dir / rel, Waveform(x))
            except OSError as e:
                raise AudioError(f"cannot write {out_dir / rel}: {e}") from e
            rows.append((clip_id, rel.as_posix(), cls.name, j % N_FOLDS + 1, cls.category))

    manifest = out_dir / manifest_name
    has_cat = any(r[4] for r in rows)
    with open(manifest, "w", newline="") as f:
        wr = csv.writer(f, lineterminator="\n")
        wr.writerow(["clip_id", "path", "label", "fold"] + (["category"] if has_cat else []))
        for r in rows:
            wr.writerow(list(r[:4]) + ([r[4] or ""] if has_cat else []))
    return manifest
