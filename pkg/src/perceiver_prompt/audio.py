"""WAV I/O and log-mel features (16 kHz, 25 ms Hann window, 10 ms hop, HTK mel scale)."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 16000
LOG_FLOOR_POWER = 1e-10
LOG_FLOOR = float(np.log10(LOG_FLOOR_POWER))


class WavReadError(IOError):
    pass


class ChannelCountError(ValueError):
    pass


class UnsupportedEncodingError(ValueError):
    pass


class TooShortError(ValueError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("waveform must be a non-empty 1-d array")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = SAMPLE_RATE
    n_fft: int = 400
    hop: int = 160
    n_mels: int = 80
    f_min: float = 0.0
    f_max: float = 8000.0
    dynamic_range: float = 8.0
    normalize: bool = True


def resample_linear(x: np.ndarray, sr_in: int, sr_out: int) -> np.ndarray:
    if sr_in == sr_out:
        return x
    n_out = max(1, int(round(x.size * sr_out / sr_in)))
    t_out = np.arange(n_out) * (sr_in / sr_out)
    return np.interp(t_out, np.arange(x.size), x).astype(np.float32)


def load_wav(path) -> Waveform:
    """Read a mono PCM16 or float32 WAV, scaled to [-1, 1] and resampled to 16 kHz."""
    try:
        sr, data = wavfile.read(str(path))
    except FileNotFoundError as e:
        raise WavReadError(f"cannot open {path}: {e}") from e
    except ValueError as e:
        raise WavReadError(f"cannot parse {path} as WAV: {e}") from e
    if data.ndim != 1:
        raise ChannelCountError(f"{path}: expected mono, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float32) / 32768.0
    elif data.dtype == np.float32:
        x = np.clip(data, -1.0, 1.0)
    else:
        raise UnsupportedEncodingError(f"{path}: unsupported sample encoding {data.dtype} (need PCM16 or float32)")
    if x.size == 0:
        raise WavReadError(f"{path}: no samples")
    return Waveform(resample_linear(x, sr, SAMPLE_RATE), SAMPLE_RATE)


def write_wav(path, w: Waveform, encoding: str = "pcm16") -> None:
    x = np.clip(w.samples, -1.0, 1.0)
    if encoding == "pcm16":
        data = np.round(x * 32767.0).astype(np.int16)
    elif encoding == "float32":
        data = x.astype(np.float32)
    else:
        raise UnsupportedEncodingError(encoding)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), w.sample_rate, data)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_center_frequencies(cfg: MelConfig = MelConfig()) -> np.ndarray:
    pts = np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2)
    return mel_to_hz(pts[1:-1])


@lru_cache(maxsize=8)
def mel_filterbank(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """Triangular filters [n_mels x (n_fft//2 + 1)] with unit peaks on the HTK mel scale."""
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    lo, ctr, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (ctr - lo)
    down = (hi - freqs[None, :]) / (hi - ctr)
    return np.maximum(0.0, np.minimum(up, down))


def num_frames(n_samples: int, cfg: MelConfig = MelConfig()) -> int:
    return 1 + (n_samples - cfg.n_fft) // cfg.hop


def power_spectrogram(x: np.ndarray, cfg: MelConfig = MelConfig()) -> np.ndarray:
    if x.size < cfg.n_fft:
        raise TooShortError(f"waveform has {x.size} samples, shorter than one {cfg.n_fft}-sample window")
    n = num_frames(x.size, cfg)
    frames = np.lib.stride_tricks.sliding_window_view(x.astype(np.float64), cfg.n_fft)[:: cfg.hop][:n]
    spec = np.fft.rfft(frames * np.hanning(cfg.n_fft + 1)[:-1], axis=1)
    return spec.real**2 + spec.imag**2


def log_mel(w: Waveform, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """[frames x n_mels] log10 mel power, floored at 1e-10.

    With ``cfg.normalize`` the result is clamped to ``max - dynamic_range`` and
    mapped by ``(v + 4) / 4``.
    """
    x = w.samples if isinstance(w, Waveform) else np.asarray(w)
    mel = power_spectrogram(x, cfg) @ mel_filterbank(cfg).T
    out = np.log10(np.maximum(mel, LOG_FLOOR_POWER))
    if cfg.normalize:
        out = np.maximum(out, out.max() - cfg.dynamic_range)
        out = (out + 4.0) / 4.0
    return out.astype(np.float32)
