"""Audio clips, Hann-window STFT/ISTFT and WAV file I/O."""
import logging
from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

log = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 44100
# 92.9 ms window / 23.2 ms hop at 44.1 kHz
DEFAULT_WINDOW = 4096
DEFAULT_HOP = 1024


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio samples must be finite")

    def __len__(self):
        return self.samples.size

    @property
    def duration(self):
        return self.samples.size / self.sample_rate


@dataclass
class ComplexSpectrogram:
    """One-sided STFT with ``window_len // 2 + 1`` rows and one column per frame.

    Frame ``n`` is centred on sample ``n * hop`` of the original signal.
    """

    re: np.ndarray
    im: np.ndarray
    window_len: int
    hop: int
    sample_rate: int
    original_length: int

    @classmethod
    def from_complex(cls, Z, window_len, hop, sample_rate, original_length):
        Z = np.asarray(Z)
        return cls(np.ascontiguousarray(Z.real, dtype=np.float64),
                   np.ascontiguousarray(Z.imag, dtype=np.float64),
                   window_len, hop, sample_rate, original_length)

    @property
    def complex(self):
        return self.re + 1j * self.im

    @property
    def shape(self):
        return self.re.shape

    @property
    def hop_seconds(self):
        return self.hop / self.sample_rate

    def with_values(self, Z):
        """Same framing, new complex values."""
        return ComplexSpectrogram.from_complex(Z, self.window_len, self.hop,
                                               self.sample_rate, self.original_length)


def hann(n):
    """Periodic Hann window (COLA at hops of n/2, n/4, ...)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def n_frames(length, window_len, hop):
    return -(-(length + window_len) // hop)


def stft(clip, window_len=DEFAULT_WINDOW, hop=DEFAULT_HOP):
    x = clip.samples
    if x.size == 0:
        raise ValueError("cannot transform an empty clip")
    if window_len < 2 or window_len & (window_len - 1):
        raise ValueError(f"window_len must be a power of two, got {window_len}")
    if not 0 < hop <= window_len:
        raise ValueError(f"hop must be in (0, window_len], got {hop}")

    N = n_frames(x.size, window_len, hop)
    half = window_len // 2
    padded = np.zeros((N - 1) * hop + window_len)
    padded[half:half + x.size] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, window_len)[::hop]
    Z = np.fft.rfft(frames * hann(window_len), axis=1).T
    return ComplexSpectrogram.from_complex(Z, window_len, hop, clip.sample_rate, x.size)


def istft(spec):
    """Weighted overlap-add inverse of :func:`stft`, trimmed to the original length."""
    M, N = spec.shape
    W, hop = spec.window_len, spec.hop
    if M != W // 2 + 1 or spec.im.shape != (M, N):
        raise ValueError(
            f"spectrogram has {M} bins, inconsistent with window_len {W} "
            f"(expected {W // 2 + 1})"
        )
    win = hann(W)
    frames = np.fft.irfft(spec.complex.T, n=W, axis=1) * win
    total = (N - 1) * hop + W
    out = np.zeros(total)
    norm = np.zeros(total)
    for n in range(N):
        out[n * hop:n * hop + W] += frames[n]
        norm[n * hop:n * hop + W] += win * win
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    half = W // 2
    y = out[half:half + spec.original_length]
    if y.size < spec.original_length:
        y = np.pad(y, (0, spec.original_length - y.size))
    return AudioClip(y, spec.sample_rate)


def magnitude(spec):
    return np.hypot(spec.re, spec.im)


def read_wav(path):
    """Read 16-bit PCM or 32-bit float WAV; stereo is averaged to mono."""
    sr, data = wavfile.read(path)
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported WAV sample format {data.dtype} "
                         "(need 16-bit PCM or 32-bit float)")
    if x.ndim == 2:
        x = x.mean(axis=1)
    return AudioClip(x, int(sr))


def write_wav(path, clip):
    """Write 16-bit PCM mono. Returns the number of samples that saturated."""
    scaled = np.round(clip.samples * 32768.0)
    clipped = int(np.count_nonzero(np.abs(clip.samples) > 1.0))
    if clipped:
        log.warning("%s: %d samples clipped", path, clipped)
    pcm = np.clip(scaled, -32768, 32767).astype(np.int16)
    wavfile.write(path, clip.sample_rate, pcm)
    return clipped
