"""Signal-processing primitives shared by the simulator, models, loss and metrics.

All framing is strictly causal: the first frame starts at sample 0, there is
no left padding, and a trailing partial frame is dropped. Functions accept
either numpy arrays or torch tensors; numpy in gives numpy out.
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.io import wavfile

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class StftParams:
    win_length: int = 320
    hop_length: int = 160
    fft_size: int = 320

    def __post_init__(self):
        if self.win_length <= 0 or self.hop_length <= 0:
            raise ValueError("win_length and hop_length must be positive")
        if self.hop_length > self.win_length:
            raise ValueError(f"hop_length {self.hop_length} > win_length {self.win_length}")
        if self.fft_size < self.win_length:
            raise ValueError(f"fft_size {self.fft_size} < win_length {self.win_length}")

    @property
    def n_bins(self):
        return self.fft_size // 2 + 1

    def window(self, dtype=torch.float32):
        return sqrt_hann(self.win_length, dtype=dtype)


@dataclass
class ComplexSpectrogram:
    values: torch.Tensor  # complex, [..., frames, bins]
    params: StftParams


def sqrt_hann(n, dtype=torch.float32):
    # periodic Hann: w^2[k] + w^2[k + n/2] == 1, so the analysis/synthesis pair is COLA at hop n/2
    return torch.hann_window(n, periodic=True, dtype=torch.float64).sqrt().to(dtype)


def cola_error(params):
    """Max deviation from a flat overlap-add envelope of the squared window."""
    w2 = sqrt_hann(params.win_length, dtype=torch.float64).numpy() ** 2
    hop = params.hop_length
    n = params.win_length * 4
    env = np.zeros(n + params.win_length)
    for start in range(0, n, hop):
        env[start:start + params.win_length] += w2
    interior = env[params.win_length:n]
    return float(np.max(np.abs(interior - interior.mean())) / interior.mean())


def num_frames(length, win, hop):
    if length < win:
        return 0
    return (length - win) // hop + 1


def _as_tensor(x):
    if isinstance(x, torch.Tensor):
        return x, False
    return torch.as_tensor(np.asarray(x)), True


def frame_signal(wave, win, hop):
    """Slice a waveform into rows ``wave[t*hop : t*hop + win]``.

    Works on the last axis, so batched input ``[..., L]`` gives ``[..., T, win]``.
    """
    if win <= 0 or hop <= 0:
        raise ValueError("win and hop must be positive")
    x, was_numpy = _as_tensor(wave)
    if x.shape[-1] < win:
        raise ValueError(f"signal of {x.shape[-1]} samples is shorter than one frame ({win})")
    frames = x.unfold(-1, win, hop)
    if was_numpy:
        return frames.numpy().copy()
    return frames


def overlap_add(frames, hop, length=None):
    """Inverse of :func:`frame_signal` by summation; ``frames`` is ``[..., T, win]``.

    The result has ``(T - 1) * hop + win`` samples, then is zero-filled or cut
    to ``length`` when given.
    """
    x, was_numpy = _as_tensor(frames)
    lead = x.shape[:-2]
    n_frames, win = x.shape[-2], x.shape[-1]
    ola_len = (n_frames - 1) * hop + win if n_frames else 0
    flat = x.reshape(-1, n_frames, win)
    if n_frames:
        out = F.fold(flat.transpose(1, 2), output_size=(1, ola_len),
                     kernel_size=(1, win), stride=(1, hop)).reshape(flat.shape[0], ola_len)
    else:
        out = flat.new_zeros(flat.shape[0], 0)
    if length is not None:
        if length >= ola_len:
            out = F.pad(out, (0, length - ola_len))
        else:
            out = out[:, :length]
    out = out.reshape(*lead, out.shape[-1])
    if was_numpy:
        return out.numpy()
    return out


def stft(wave, params=StftParams()):
    """Causal STFT with a sqrt-Hann analysis window; returns ``[..., T, bins]``."""
    x, was_numpy = _as_tensor(wave)
    if x.shape[-1] < params.win_length:
        raise ValueError(
            f"signal of {x.shape[-1]} samples too short for STFT; need at least {params.win_length}")
    if not x.is_floating_point():
        x = x.double()
    frames = frame_signal(x, params.win_length, params.hop_length)
    spec = torch.fft.rfft(frames * params.window(x.dtype), n=params.fft_size, dim=-1)
    if was_numpy:
        return ComplexSpectrogram(spec.numpy(), params)
    return ComplexSpectrogram(spec, params)


def istft(spec, params=None, length=None):
    """Weighted overlap-add inverse of :func:`stft`.

    The squared sqrt-Hann window sums to one at hop = win/2, so no envelope
    normalisation is applied. The first and last ``win - hop`` samples are
    only partially covered and are not reconstructed exactly.
    """
    if params is not None and params != spec.params:
        raise ValueError(f"spectrogram was computed with {spec.params}, not {params}")
    params = spec.params
    values, was_numpy = _as_tensor(spec.values)
    if values.shape[-1] != params.n_bins:
        raise ValueError(f"expected {params.n_bins} bins, got {values.shape[-1]}")
    frames = torch.fft.irfft(values, n=params.fft_size, dim=-1)[..., :params.win_length]
    frames = frames * params.window(frames.dtype)
    out = overlap_add(frames, params.hop_length, length)
    if was_numpy:
        return out.numpy()
    return out


def safe_abs(z):
    """Complex magnitude whose gradient at exactly zero is zero instead of NaN."""
    sq = z.real ** 2 + z.imag ** 2
    nz = sq > 0
    return torch.where(nz, torch.where(nz, sq, torch.ones_like(sq)).sqrt(), torch.zeros_like(sq))


def safe_pow(x, p):
    """``x ** p`` for ``x >= 0`` with a zero (sub)gradient at ``x == 0``."""
    nz = x > 0
    return torch.where(nz, torch.where(nz, x, torch.ones_like(x)) ** p, torch.zeros_like(x))


def power_law_compress(magnitude, p=0.3):
    if not 0 < p <= 1:
        raise ValueError(f"compression exponent must be in (0, 1], got {p}")
    x, was_numpy = _as_tensor(magnitude)
    if bool((x < 0).any()):
        raise ValueError("power-law compression needs a nonnegative magnitude")
    out = safe_pow(x, p)
    if was_numpy:
        return out.numpy()
    return out


def read_wav(path):
    """Read a mono 16 kHz WAV (PCM16 or float32) as float64 in [-1, 1]."""
    rate, data = wavfile.read(path)
    if rate != SAMPLE_RATE:
        raise ValueError(f"{path}: sample rate {rate} Hz, expected {SAMPLE_RATE} (no resampling)")
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        return data.astype(np.float64) / 32768.0
    if data.dtype == np.float32:
        return data.astype(np.float64)
    raise ValueError(f"{path}: unsupported sample format {data.dtype}")


def write_wav(path, samples, subtype="float32"):
    samples = np.asarray(samples, dtype=np.float64)
    if not np.all(np.isfinite(samples)):
        raise ValueError("refusing to write non-finite samples")
    if subtype == "float32":
        data = samples.astype("<f4")
    elif subtype == "pcm16":
        data = np.clip(np.round(samples * 32768.0), -32768, 32767).astype("<i2")
    else:
        raise ValueError(f"unknown WAV subtype {subtype!r}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(path, SAMPLE_RATE, data)
    return path
