"""Log-mel features and waveform/spectrogram augmentation.

Everything here is a pure function of its inputs; randomness comes only from
the integer seed carried by the augmentation specs.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import get_window

from .errors import ConfigError

LOG_FLOOR = math.log(1e-10)


@dataclass(frozen=True)
class MelProfile:
    sample_rate: int = 16000
    n_mels: int = 128
    frame_length_ms: float = 25.0
    frame_shift_ms: float = 10.0
    n_fft: int = 512
    f_min: float = 0.0
    f_max: float | None = None

    @property
    def win_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_length_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.sample_rate * self.frame_shift_ms / 1000.0))


@dataclass
class MelFeatures:
    data: np.ndarray  # [n_frames, n_mels]
    n_mels: int
    frame_shift: float
    frame_length: float
    sample_rate: int

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]


def expected_frames(n_samples: int, profile: MelProfile) -> int:
    return 1 + (n_samples - profile.win_samples) // profile.hop_samples


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(profile: MelProfile) -> np.ndarray:
    """Triangular HTK-scale filters, shape [n_mels, n_fft // 2 + 1]."""
    f_max = profile.f_max if profile.f_max is not None else profile.sample_rate / 2
    edges = _mel_to_hz(np.linspace(_hz_to_mel(profile.f_min), _hz_to_mel(f_max), profile.n_mels + 2))
    bins = np.fft.rfftfreq(profile.n_fft, d=1.0 / profile.sample_rate)
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins[None, :] - lower) / (center - lower)
    falling = (upper - bins[None, :]) / (upper - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def compute_log_mel(waveform, sample_rate: int, profile: MelProfile | None = None) -> MelFeatures:
    profile = profile or MelProfile()
    if sample_rate != profile.sample_rate:
        raise ValueError(f"sample rate {sample_rate} does not match profile rate {profile.sample_rate}")
    x = np.asarray(waveform, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise ValueError("waveform must be a non-empty 1-D array")
    win, hop = profile.win_samples, profile.hop_samples
    if x.size < win:
        raise ValueError(f"waveform too short: {x.size} samples < one {win}-sample window")
    if profile.n_fft < win:
        raise ConfigError("n_fft must be >= window length")
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop]
    spec = np.fft.rfft(frames * get_window("hann", win, fftbins=True), n=profile.n_fft, axis=1)
    energy = (spec.real**2 + spec.imag**2) @ mel_filterbank(profile).T
    data = np.log(np.maximum(energy, 1e-10)).astype(np.float32)
    return MelFeatures(
        data=data,
        n_mels=profile.n_mels,
        frame_shift=profile.frame_shift_ms,
        frame_length=profile.frame_length_ms,
        sample_rate=sample_rate,
    )


# --- SpecAugment ------------------------------------------------------------


@dataclass(frozen=True)
class SpecAugmentSpec:
    # defaults unverified against any particular recipe
    n_freq_masks: int = 2
    max_freq_width: int = 10
    n_time_masks: int = 2
    max_time_width: int = 50
    fill: str = "zero"
    seed: int = 0


def spec_augment(mel: MelFeatures, spec: SpecAugmentSpec) -> MelFeatures:
    """Mask random frequency bands and time spans with a constant fill."""
    n_frames, n_mels = mel.data.shape
    if spec.n_freq_masks < 0 or spec.n_time_masks < 0:
        raise ValueError("mask counts must be >= 0")
    if not 0 <= spec.max_freq_width <= n_mels:
        raise ValueError(f"max_freq_width {spec.max_freq_width} exceeds {n_mels} mel bins")
    if not 0 <= spec.max_time_width <= n_frames:
        raise ValueError(f"max_time_width {spec.max_time_width} exceeds {n_frames} frames")
    if spec.fill not in ("zero", "mean"):
        raise ValueError(f"unknown fill {spec.fill!r}")
    rng = np.random.default_rng(spec.seed)
    out = mel.data.copy()
    value = 0.0 if spec.fill == "zero" else float(mel.data.mean())
    for _ in range(spec.n_freq_masks):
        width = int(rng.integers(0, spec.max_freq_width + 1))
        start = int(rng.integers(0, n_mels - width + 1))
        out[:, start : start + width] = value
    for _ in range(spec.n_time_masks):
        width = int(rng.integers(0, spec.max_time_width + 1))
        start = int(rng.integers(0, n_frames - width + 1))
        out[start : start + width, :] = value
    return MelFeatures(out, mel.n_mels, mel.frame_shift, mel.frame_length, mel.sample_rate)


# --- waveform augmentation --------------------------------------------------


def _resample_to(x: np.ndarray, n_out: int) -> np.ndarray:
    # linear interpolation onto a uniformly stretched time grid
    n = x.shape[0]
    if n_out == n:
        return x.copy()
    pos = np.arange(n_out) * (n / n_out)
    return np.interp(pos, np.arange(n), x)


def speed_perturb(waveform, factor: float) -> np.ndarray:
    """Resample so playback is ``factor`` times faster; tempo and pitch both change."""
    if not factor > 0:
        raise ValueError(f"speed factor must be > 0, got {factor}")
    x = np.asarray(waveform, dtype=np.float64)
    if factor == 1.0:
        return x.copy()
    n_out = max(1, int(round(x.shape[0] / factor)))
    pos = np.arange(n_out) * factor
    return np.interp(pos, np.arange(x.shape[0]), x)


def _stft(x: np.ndarray, n_fft: int, hop: int, window: np.ndarray) -> np.ndarray:
    n_frames = 1 + (x.shape[0] - n_fft) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, n_fft)[: n_frames * hop : hop]
    return np.fft.rfft(frames * window, axis=1).T  # [bins, frames]


def _istft(spec: np.ndarray, n_fft: int, hop: int, window: np.ndarray) -> np.ndarray:
    n_frames = spec.shape[1]
    length = n_fft + hop * (n_frames - 1)
    out = np.zeros(length)
    norm = np.zeros(length)
    frames = np.fft.irfft(spec.T, n=n_fft, axis=1) * window
    for i in range(n_frames):
        out[i * hop : i * hop + n_fft] += frames[i]
        norm[i * hop : i * hop + n_fft] += window**2
    return out / np.where(norm > 1e-8, norm, 1.0)


def time_stretch(waveform, rate: float, n_fft: int = 512, hop: int = 128) -> np.ndarray:
    """Phase-vocoder tempo change; output has round(n / rate) samples, pitch kept."""
    if not rate > 0:
        raise ValueError(f"stretch rate must be > 0, got {rate}")
    x = np.asarray(waveform, dtype=np.float64)
    n = x.shape[0]
    n_out = max(1, int(round(n / rate)))
    if rate == 1.0:
        return x.copy()
    window = get_window("hann", n_fft, fftbins=True)
    pad = n_fft // 2
    padded = np.pad(x, (pad, pad + n_fft))
    stft = _stft(padded, n_fft, hop, window)
    stft = np.concatenate([stft, np.zeros((stft.shape[0], 1), dtype=stft.dtype)], axis=1)
    steps = np.arange(0, stft.shape[1] - 1, rate)
    advance = 2 * np.pi * hop * np.arange(stft.shape[0]) / n_fft
    phase = np.angle(stft[:, 0])
    out = np.empty((stft.shape[0], steps.shape[0]), dtype=np.complex128)
    for i, step in enumerate(steps):
        t0 = int(step)
        frac = step - t0
        c0, c1 = stft[:, t0], stft[:, t0 + 1]
        out[:, i] = ((1 - frac) * np.abs(c0) + frac * np.abs(c1)) * np.exp(1j * phase)
        dphase = np.angle(c1) - np.angle(c0) - advance
        dphase -= 2 * np.pi * np.round(dphase / (2 * np.pi))
        phase = phase + advance + dphase
    y = _istft(out, n_fft, hop, window)[pad:]
    if y.shape[0] >= n_out:
        return y[:n_out]
    return np.pad(y, (0, n_out - y.shape[0]))


def pitch_shift(waveform, sample_rate: int, semitones: float) -> np.ndarray:
    """Shift pitch by ``semitones`` keeping the sample count unchanged."""
    x = np.asarray(waveform, dtype=np.float64)
    if semitones == 0:
        return x.copy()
    ratio = 2.0 ** (semitones / 12.0)
    stretched = time_stretch(x, 1.0 / ratio)
    return _resample_to(stretched, x.shape[0])


def gaussian_noise(waveform, snr_db: float, rng: np.random.Generator) -> np.ndarray:
    """Add white noise scaled so the realised signal-to-noise ratio is exactly ``snr_db``."""
    x = np.asarray(waveform, dtype=np.float64)
    signal_power = float(np.mean(x**2))
    if signal_power == 0.0:
        return x.copy()
    noise = rng.standard_normal(x.shape[0])
    noise *= math.sqrt(signal_power / 10.0 ** (snr_db / 10.0) / float(np.mean(noise**2)))
    return x + noise


def clip_distortion(waveform, threshold_fraction: float) -> np.ndarray:
    if not 0 < threshold_fraction <= 1:
        raise ValueError("threshold_fraction must lie in (0, 1]")
    x = np.asarray(waveform, dtype=np.float64)
    limit = threshold_fraction * float(np.max(np.abs(x))) if x.size else 0.0
    return np.clip(x, -limit, limit)


AUGMENT_OPS = ("time_stretch", "pitch_shift", "gaussian_noise", "clip_distortion", "speed_perturb")


@dataclass(frozen=True)
class AugmentSpec:
    """Ordered waveform augmentations, e.g. ``(("time_stretch", 1.1), ("gaussian_noise", 20.0))``."""

    ops: tuple[tuple[str, float], ...] = field(default_factory=tuple)
    seed: int = 0

    def validate(self) -> None:
        for name, value in self.ops:
            if name not in AUGMENT_OPS:
                raise ConfigError(f"unknown augmentation {name!r}; expected one of {AUGMENT_OPS}")
            if name in ("time_stretch", "speed_perturb") and not value > 0:
                raise ConfigError(f"{name} requires a positive factor, got {value}")
            if name == "clip_distortion" and not 0 < value <= 1:
                raise ConfigError("clip_distortion threshold_fraction must lie in (0, 1]")

    @classmethod
    def from_config(cls, ops, seed: int = 0) -> "AugmentSpec":
        """Accept ``[{"time_stretch": 1.1}, ...]`` or ``[["time_stretch", 1.1], ...]``."""
        parsed = []
        for item in ops or ():
            if isinstance(item, dict):
                if len(item) != 1:
                    raise ConfigError(f"augmentation entry must have one key: {item}")
                ((name, value),) = item.items()
            else:
                name, value = item
            parsed.append((str(name), float(value)))
        spec = cls(tuple(parsed), int(seed))
        spec.validate()
        return spec


def augment(waveform, sample_rate: int, spec: AugmentSpec) -> np.ndarray:
    spec.validate()
    x = np.asarray(waveform, dtype=np.float64).copy()
    rng = np.random.default_rng(spec.seed)
    for name, value in spec.ops:
        if name == "time_stretch":
            x = time_stretch(x, value)
        elif name == "pitch_shift":
            x = pitch_shift(x, sample_rate, value)
        elif name == "gaussian_noise":
            x = gaussian_noise(x, value, rng)
        elif name == "clip_distortion":
            x = clip_distortion(x, value)
        else:
            x = speed_perturb(x, value)
    return x


def derive_seed(global_seed: int, *keys) -> int:
    """Stable per-item seed so parallel processing order never changes results."""
    text = "\x1f".join([str(global_seed), *map(str, keys)])
    return int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little") >> 1
