"""MFCC front-end: framing, Hamming window, power spectrum, mel filterbank, log, DCT-II."""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import scipy.fft

from .audio_io import CANONICAL_RATE, Waveform

LOG_FLOOR = 1e-10


class ClipTooShortError(ValueError):
    """The waveform is shorter than one analysis window."""


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MfccConfig:
    window_ms: float = 30.0
    hop_ms: float = 15.0
    n_coeffs: int = 20
    n_mel_filters: int = 40
    fft_size: int = 2048
    fmin: float = 0.0
    fmax: float = CANONICAL_RATE / 2
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        if not (self.window_ms > self.hop_ms > 0):
            raise ValueError("need window_ms > hop_ms > 0")
        if self.n_coeffs > self.n_mel_filters:
            raise ValueError("n_coeffs must not exceed n_mel_filters")
        if self.fft_size < self.win_len:
            raise ValueError("fft_size must cover one window")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError("need 0 <= fmin < fmax <= Nyquist")

    @property
    def win_len(self) -> int:
        return _round_half_up(self.window_ms * 1e-3 * self.sample_rate)

    @property
    def hop_len(self) -> int:
        return _round_half_up(self.hop_ms * 1e-3 * self.sample_rate)

    def hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:16]


def n_frames(n_samples: int, win_len: int, hop_len: int) -> int:
    if n_samples < win_len:
        return 0
    return (n_samples - win_len) // hop_len + 1


def frame_signal(x: np.ndarray, win_len: int, hop_len: int) -> np.ndarray:
    """Slice a 1-D signal into overlapping frames (T x win_len, a copy)."""
    T = n_frames(len(x), win_len, hop_len)
    if T == 0:
        raise ClipTooShortError(f"{len(x)} samples < one window of {win_len}")
    view = np.lib.stride_tricks.sliding_window_view(x, win_len)[::hop_len]
    return np.array(view[:T])


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MfccConfig) -> np.ndarray:
    """Triangular filters on the mel scale, shape (n_mel_filters, fft_size//2 + 1).

    Filter edges are equally spaced in mel between fmin and fmax; each
    triangle peaks at 1 on its centre frequency.
    """
    n_bins = cfg.fft_size // 2 + 1
    bin_freqs = np.arange(n_bins) * cfg.sample_rate / cfg.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax),
                                  cfg.n_mel_filters + 2))
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (bin_freqs - lo) / (mid - lo)
    down = (hi - bin_freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def power_spectrum(frames: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    win = np.hamming(cfg.win_len)
    spec = np.fft.rfft(frames * win, n=cfg.fft_size, axis=-1)
    return spec.real ** 2 + spec.imag ** 2


def mel_energies(w: Waveform | np.ndarray, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Per-frame mel filterbank energies (T x n_mel_filters), before the log."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    frames = frame_signal(x, cfg.win_len, cfg.hop_len)
    return power_spectrum(frames, cfg) @ mel_filterbank(cfg).T


def extract_mfcc(w: Waveform | np.ndarray, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """MFCC matrix (T x n_coeffs) of a canonical-rate mono waveform.

    Coefficient 0 is kept. No liftering, deltas or mean normalisation.

    Raises:
        ClipTooShortError: when the signal is shorter than one window.
    """
    if isinstance(w, Waveform) and w.sample_rate != cfg.sample_rate:
        raise ValueError(f"waveform at {w.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
    logmel = np.log(np.maximum(mel_energies(w, cfg), LOG_FLOOR))
    return scipy.fft.dct(logmel, type=2, norm="ortho", axis=-1)[:, :cfg.n_coeffs]


def pad_to_window(x: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    """Zero-pad a signal at the end so that it holds at least one window."""
    if len(x) >= cfg.win_len:
        return x
    return np.concatenate([x, np.zeros(cfg.win_len - len(x))])


# ---------------------------------------------------------------------------
# per-clip cache
#
# One ``.npz`` per clip with arrays ``mfcc`` (float64, T x D, row-major),
# ``shape`` (int64 [T, D]) and ``config_hash`` (unicode scalar).  A file whose
# hash differs from the requested config is treated as missing.

def cache_path(cache_dir, clip_id: str, cfg: MfccConfig) -> Path:
    return Path(cache_dir) / "mfcc" / cfg.hash() / f"{clip_id}.npz"


def save_cached(path, m: np.ndarray, cfg: MfccConfig):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp.npz")
    np.savez(tmp, mfcc=np.ascontiguousarray(m, dtype=np.float64),
             shape=np.array(m.shape, dtype=np.int64), config_hash=np.array(cfg.hash()))
    os.replace(tmp, path)


def load_cached(path, cfg: MfccConfig) -> np.ndarray | None:
    path = Path(path)
    if not path.exists():
        return None
    with np.load(path) as z:
        if str(z["config_hash"]) != cfg.hash():
            return None
        m = z["mfcc"]
        if tuple(z["shape"]) != m.shape:
            return None
        return m.copy()
