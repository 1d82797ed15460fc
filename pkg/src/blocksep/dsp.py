"""Time-frequency analysis/synthesis, the two-channel phase feature, masking,
and 16-bit PCM WAV I/O.

Everything here is a pure function over immutable arrays; there is no shared
state, so all of it is safe to call from parallel workers.
"""

import wave
from dataclasses import dataclass

import numpy as np

DEFAULT_SAMPLE_RATE = 8000

# Bins with magnitude below this are treated as phaseless when computing the
# inter-channel phase feature.
_PHASE_EPS = 1e-12


@dataclass
class AudioSignal:
    """Multi-channel waveform. ``samples`` has shape (channels, n)."""

    sample_rate: int
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=np.float64))
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.ndim != 2:
            raise ValueError("samples must be 1-D (mono) or 2-D (channels, n)")

    @property
    def n_channels(self):
        return self.samples.shape[0]

    @property
    def n_samples(self):
        return self.samples.shape[1]

    @property
    def duration(self):
        return self.n_samples / self.sample_rate

    def channel(self, idx: int) -> np.ndarray:
        return self.samples[idx]


def make_window(name: str, length: int) -> np.ndarray:
    """Return a periodic analysis window by name."""
    n = np.arange(length)
    if name == "sqrt_hann":
        return np.sqrt(0.5 - 0.5 * np.cos(2.0 * np.pi * n / length))
    if name == "hann":
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)
    if name == "rect":
        return np.ones(length)
    raise ValueError(f"unknown window type: {name!r}")


@dataclass(frozen=True)
class StftConfig:
    window_len: int = 256
    hop: int = 64
    window: str = "sqrt_hann"

    def __post_init__(self):
        if not (0 < self.hop <= self.window_len):
            raise ValueError("hop must satisfy 0 < hop <= window_len")
        make_window(self.window, self.window_len)  # validates the name

    @property
    def n_bins(self):
        return self.window_len // 2 + 1

    def window_array(self) -> np.ndarray:
        return make_window(self.window, self.window_len)

    def cola_ok(self, tol: float = 1e-8) -> bool:
        """Check that the squared window overlap-adds to a constant at ``hop``.

        Synthesis divides by the overlap-added squared window, so a constant
        interior sum is what guarantees exact reconstruction.
        """
        w2 = self.window_array() ** 2
        n_frames = 8 * (self.window_len // self.hop) + 8
        total = self.window_len + (n_frames - 1) * self.hop
        acc = np.zeros(total)
        for i in range(n_frames):
            acc[i * self.hop : i * self.hop + self.window_len] += w2
        interior = acc[self.window_len : total - self.window_len]
        if interior.size == 0 or interior.min() <= 0:
            return False
        return (interior.max() - interior.min()) <= tol * interior.max()


def frame_count(n_samples: int, cfg: StftConfig) -> int:
    return (n_samples - cfg.window_len) // cfg.hop + 1


def stft(samples: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Short-time Fourier transform of one channel.

    Returns a (T, F) complex array with T = floor((n - window)/hop) + 1 and
    F = window_len/2 + 1.  No padding or centering is applied.
    """
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("stft expects a single channel")
    if x.size < cfg.window_len:
        raise ValueError("input too short")
    n_frames = frame_count(x.size, cfg)
    stride = x.strides[0]
    frames = np.lib.stride_tricks.as_strided(
        x, shape=(n_frames, cfg.window_len), strides=(stride * cfg.hop, stride)
    )
    return np.fft.rfft(frames * cfg.window_array(), axis=1)


def istft(spec: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`.

    Output length is (T-1)*hop + window_len.  Requires a config whose squared
    window overlap-adds to a constant, which makes interior reconstruction
    exact up to floating point.
    """
    if not cfg.cola_ok():
        raise ValueError("window/hop violates overlap-add")
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != cfg.n_bins:
        raise ValueError("spectrogram bins inconsistent with config")
    n_frames = spec.shape[0]
    win = cfg.window_array()
    frames = np.fft.irfft(spec, n=cfg.window_len, axis=1) * win
    total = (n_frames - 1) * cfg.hop + cfg.window_len
    out = np.zeros(total)
    wsum = np.zeros(total)
    for i in range(n_frames):
        sl = slice(i * cfg.hop, i * cfg.hop + cfg.window_len)
        out[sl] += frames[i]
        wsum[sl] += win * win
    good = wsum > 1e-10
    out[good] /= wsum[good]
    out[~good] = 0.0
    return out


@dataclass
class IpdFeature:
    """Cosine/sine planes of the inter-channel phase difference, (T, F) each."""

    cos: np.ndarray
    sin: np.ndarray

    def stacked(self) -> np.ndarray:
        return np.stack([self.cos, self.sin], axis=-1)


def ipd(spec_ch1: np.ndarray, spec_ch2: np.ndarray) -> IpdFeature:
    """Inter-channel phase difference encoded as (cos, sin) planes.

    Bins where either channel has magnitude below 1e-12 are mapped to zero
    phase difference (cos=1, sin=0) so the feature stays finite everywhere.
    """
    a = np.asarray(spec_ch1)
    b = np.asarray(spec_ch2)
    if a.shape != b.shape:
        raise ValueError("spectrogram dimensions do not match")
    cross = a * np.conj(b)
    mag = np.abs(cross)
    degenerate = (np.abs(a) < _PHASE_EPS) | (np.abs(b) < _PHASE_EPS)
    safe = np.where(degenerate | (mag < _PHASE_EPS * _PHASE_EPS), 1.0, mag)
    cos = np.where(degenerate, 1.0, np.real(cross) / safe)
    sin = np.where(degenerate, 0.0, np.imag(cross) / safe)
    return IpdFeature(cos=cos, sin=sin)


def apply_mask(mask: np.ndarray, mix: np.ndarray) -> np.ndarray:
    """Scale mixture magnitudes by a [0, 1] mask, keeping the mixture phase."""
    mask = np.asarray(mask)
    mix = np.asarray(mix)
    if mask.shape != mix.shape:
        raise ValueError("mask/spectrogram dimensions do not match")
    if mask.min() < -1e-9 or mask.max() > 1.0 + 1e-9:
        raise ValueError("mask values must lie in [0, 1]")
    return mask * mix


def read_wav(path) -> AudioSignal:
    """Read a 16-bit PCM WAV file (mono or 2-channel)."""
    with wave.open(str(path), "rb") as fh:
        if fh.getcomptype() != "NONE":
            raise ValueError(f"unsupported WAV encoding in {path}: compressed data")
        if fh.getsampwidth() != 2:
            raise ValueError(
                f"unsupported WAV encoding in {path}: expected 16-bit PCM, "
                f"got sample width {fh.getsampwidth()}"
            )
        n_ch = fh.getnchannels()
        if n_ch not in (1, 2):
            raise ValueError(f"unsupported channel count {n_ch} in {path}")
        rate = fh.getframerate()
        raw = fh.readframes(fh.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioSignal(rate, data.reshape(-1, n_ch).T)


def write_wav(path, signal: AudioSignal) -> None:
    """Write a signal as 16-bit PCM little-endian WAV."""
    if signal.n_channels not in (1, 2):
        raise ValueError("only mono or 2-channel WAV output is supported")
    clipped = np.clip(signal.samples, -1.0, 1.0)
    pcm = np.round(clipped * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(signal.n_channels)
        fh.setsampwidth(2)
        fh.setframerate(signal.sample_rate)
        fh.writeframes(pcm.T.reshape(-1).tobytes())
