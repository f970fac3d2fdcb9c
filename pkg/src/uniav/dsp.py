"""Time-frequency front end.

Forward STFT with reflect padding, an exact weighted-overlap-add inverse,
log-magnitude features, dominance masks for supervised separation targets,
and masked resynthesis that reuses the mixture phase. Everything here is
float64 numpy; the training stack converts to float32 at its own boundary.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.io.wavfile
import scipy.signal

from .errors import ConfigurationError, InputError

log = logging.getLogger(__name__)

# Synthetic stems are unit-amplitude sines plus headroom for sums of sources,
# so exported PCM maps +/-4.0 in float land to full scale int16.
WAV_FULL_SCALE = 4.0

_DENOM_EPS = 1e-12


@dataclass(frozen=True)
class DspConfig:
    """Parameters of the analysis/synthesis chain.

    Defaults give a 50 ms window and 25 ms hop at 8 kHz, i.e. 400/200
    samples, and a 201 x 121 complex grid for a 3 s clip.
    """

    sample_rate: int = 8000
    clip_seconds: float = 3.0
    win_length: int = 400
    hop_length: int = 200
    fft_size: int = 400
    window: str = "hann"
    log_epsilon: float = 1e-7
    mask_rule: str = "dominant"

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ConfigurationError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.clip_seconds <= 0:
            raise ConfigurationError(f"clip_seconds must be positive, got {self.clip_seconds}")
        if not (0 < self.hop_length <= self.win_length <= self.fft_size):
            raise ConfigurationError(
                "need 0 < hop <= win <= fft, got "
                f"hop={self.hop_length} win={self.win_length} fft={self.fft_size}"
            )
        if self.window not in ("hann", "hamming"):
            raise ConfigurationError(f"unsupported window {self.window!r}")
        if self.log_epsilon <= 0:
            raise ConfigurationError("log_epsilon must be positive")
        if self.mask_rule not in ("dominant", "paper_strict"):
            raise ConfigurationError(f"unknown mask_rule {self.mask_rule!r}")
        w = self.window_array()
        # weighted OLA divides by sum of squared windows; NOLA guarantees
        # that denominator stays bounded away from zero in the interior
        if not scipy.signal.check_NOLA(w, self.win_length, self.win_length - self.hop_length):
            raise ConfigurationError("window/hop pair violates the nonzero-overlap-add condition")

    @property
    def clip_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    @property
    def n_freq(self) -> int:
        return self.fft_size // 2 + 1

    def window_array(self) -> np.ndarray:
        # periodic (DFT-even) variant, the usual choice for STFT analysis
        return scipy.signal.get_window(self.window, self.win_length, fftbins=True).astype(np.float64)


@dataclass
class Waveform:
    """Mono audio: 1-D float samples plus their sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise InputError(f"waveform must be 1-D, got shape {self.samples.shape}")
        if self.samples.size == 0:
            raise InputError("waveform is empty")
        if not np.all(np.isfinite(self.samples)):
            raise InputError("waveform contains NaN or Inf")
        if self.sample_rate <= 0:
            raise InputError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class ComplexSpectrogram:
    """(n_freq, n_frames) complex64/128 grid tied to the config that made it."""

    values: np.ndarray
    config: DspConfig

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise InputError(f"spectrogram must be 2-D, got shape {self.values.shape}")
        if not np.iscomplexobj(self.values):
            self.values = self.values.astype(np.complex128)
        if self.values.shape[0] != self.config.n_freq:
            raise InputError(
                f"spectrogram has {self.values.shape[0]} frequency bins, "
                f"config expects {self.config.n_freq}"
            )
        if not np.all(np.isfinite(self.values)):
            raise InputError("spectrogram contains NaN or Inf")

    @property
    def shape(self):
        return self.values.shape

    def magnitude(self) -> np.ndarray:
        return np.abs(self.values)


@dataclass
class BinaryMask:
    """Hard 0/1 time-frequency mask."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InputError(f"mask must be 2-D, got shape {self.values.shape}")
        bad = ~np.isin(self.values, (0.0, 1.0))
        if bad.any():
            raise InputError(f"binary mask has {int(bad.sum())} entries outside {{0, 1}}")

    def complement(self) -> "BinaryMask":
        return BinaryMask(1.0 - self.values)


@dataclass
class SoftMask:
    """Mask with entries in [0, 1], e.g. sigmoid outputs of the separator."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise InputError(f"mask must be 2-D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise InputError("mask contains NaN or Inf")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise InputError(
                f"soft mask values must lie in [0, 1], got range "
                f"[{self.values.min():.4g}, {self.values.max():.4g}]"
            )


def n_frames(n_samples: int, config: DspConfig) -> int:
    """Frame count of the centered STFT: 1 + ceil(n_samples / hop)."""
    if n_samples <= 0:
        raise InputError(f"n_samples must be positive, got {n_samples}")
    return 1 + int(np.ceil(n_samples / config.hop_length))


def stft(wave: Waveform, config: DspConfig) -> ComplexSpectrogram:
    """Centered short-time Fourier transform.

    The signal is reflect-padded by win//2 on the left and by whatever the
    last frame needs on the right, so frame t is centered at t * hop and the
    frame count matches n_frames(). Linear in the input by construction.
    """
    if wave.sample_rate != config.sample_rate:
        raise ConfigurationError(
            f"waveform rate {wave.sample_rate} != config rate {config.sample_rate}; "
            "resample before analysis"
        )
    x = wave.samples
    if x.size < config.win_length:
        raise InputError(f"need at least win_length={config.win_length} samples, got {x.size}")

    hop, win = config.hop_length, config.win_length
    frames = n_frames(x.size, config)
    pad_left = win // 2
    total = (frames - 1) * hop + win
    pad_right = total - x.size - pad_left
    # reflect keeps the transform linear and avoids edge discontinuities;
    # pad_right < win <= len(x) so numpy reflect padding is always legal
    xp = np.pad(x, (pad_left, pad_right), mode="reflect")

    strided = np.lib.stride_tricks.sliding_window_view(xp, win)[::hop]
    assert strided.shape[0] == frames
    windowed = strided * config.window_array()[None, :]
    spec = np.fft.rfft(windowed, n=config.fft_size, axis=1)
    return ComplexSpectrogram(spec.T.copy(), config)


def istft(spec: ComplexSpectrogram, config: DspConfig, out_len: int) -> Waveform:
    """Weighted overlap-add inverse of stft().

    Reconstruction is sum_t w[n - t*hop] * frame_t[n - t*hop] divided by
    sum_t w[n - t*hop]^2, which inverts the forward transform exactly on the
    padded support. Linear in the spectrogram because the denominator only
    depends on the window.
    """
    if spec.config.win_length != config.win_length or \
            spec.config.hop_length != config.hop_length or \
            spec.config.fft_size != config.fft_size or \
            spec.config.window != config.window:
        raise ConfigurationError("spectrogram was produced under a different analysis config")
    if spec.values.shape[0] != config.n_freq:
        raise ConfigurationError(
            f"grid has {spec.values.shape[0]} bins, config expects {config.n_freq}"
        )
    if out_len <= 0:
        raise InputError(f"out_len must be positive, got {out_len}")

    hop, win = config.hop_length, config.win_length
    w = config.window_array()
    frames = spec.values.shape[1]
    total = (frames - 1) * hop + win

    segs = np.fft.irfft(spec.values.T, n=config.fft_size, axis=1)[:, :win]
    segs = segs * w[None, :]

    num = np.zeros(total, dtype=np.float64)
    den = np.zeros(total, dtype=np.float64)
    w2 = w * w
    for t in range(frames):
        sl = slice(t * hop, t * hop + win)
        num[sl] += segs[t]
        den[sl] += w2
    good = den > _DENOM_EPS
    y = np.zeros(total, dtype=np.float64)
    y[good] = num[good] / den[good]

    pad_left = win // 2
    out = y[pad_left:pad_left + out_len]
    if out.size < out_len:
        out = np.pad(out, (0, out_len - out.size))
    return Waveform(out, config.sample_rate)


def log_magnitude(spec: ComplexSpectrogram, config: DspConfig | None = None) -> np.ndarray:
    """log(|S| + eps) feature grid, float64, same shape as the spectrogram."""
    cfg = config if config is not None else spec.config
    return np.log(np.abs(spec.values) + cfg.log_epsilon)


def target_binary_mask(
    source: ComplexSpectrogram,
    mixture: ComplexSpectrogram,
    rule: str | None = None,
) -> BinaryMask:
    """Supervision target for separation.

    dominant:     1 where |source| >= |mixture - source|, i.e. the source is
                  at least as strong as everything else in the cell.
    paper_strict: 1 where |source| > |mixture|, a stricter criterion that a
                  cell is dominated outright (phase cancellation makes the
                  mixture smaller than the source there).
    """
    if source.values.shape != mixture.values.shape:
        raise InputError(
            f"source grid {source.values.shape} != mixture grid {mixture.values.shape}"
        )
    use = rule if rule is not None else source.config.mask_rule
    if use == "dominant":
        rest = np.abs(mixture.values - source.values)
        m = (np.abs(source.values) >= rest).astype(np.float64)
    elif use == "paper_strict":
        m = (np.abs(source.values) > np.abs(mixture.values)).astype(np.float64)
    else:
        raise ConfigurationError(f"unknown mask rule {use!r}")
    return BinaryMask(m)


def apply_mask(
    mixture: ComplexSpectrogram,
    mask: BinaryMask | SoftMask,
    config: DspConfig,
    out_len: int,
) -> Waveform:
    """Resynthesize mask * mixture with the mixture's own phase.

    A mask on a coarser grid (e.g. a model output) is bilinearly resized to
    the mixture grid first. Linear in the mask for a fixed mixture, so
    complementary masks reconstruct to signals summing to the plain inverse.
    """
    mv = mask.values
    if mv.shape != mixture.values.shape:
        mv = resize_bilinear(mv, mixture.values.shape)
        mv = np.clip(mv, 0.0, 1.0)
    masked = ComplexSpectrogram(mixture.values * mv, mixture.config)
    return istft(masked, config, out_len)


def resize_bilinear(grid: np.ndarray, out_shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of a 2-D real grid with half-pixel corner convention.

    Matches the align_corners=False behavior of the training stack closely
    enough that masks survive the round trip between grid sizes.
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2:
        raise InputError(f"expected a 2-D grid, got shape {grid.shape}")
    h_in, w_in = grid.shape
    h_out, w_out = out_shape
    if h_out <= 0 or w_out <= 0:
        raise InputError(f"output shape must be positive, got {out_shape}")

    def axis_coords(n_out, n_in):
        c = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        c = np.clip(c, 0.0, n_in - 1.0)
        lo = np.floor(c).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = c - lo
        return lo, hi, frac

    r0, r1, rf = axis_coords(h_out, h_in)
    c0, c1, cf = axis_coords(w_out, w_in)
    top = grid[r0][:, c0] * (1 - cf)[None, :] + grid[r0][:, c1] * cf[None, :]
    bot = grid[r1][:, c0] * (1 - cf)[None, :] + grid[r1][:, c1] * cf[None, :]
    return top * (1 - rf)[:, None] + bot * rf[:, None]


def write_wav(path, wave: Waveform) -> None:
    """Export as mono 16-bit PCM. Float samples are scaled so that
    +/-WAV_FULL_SCALE maps to int16 full scale; anything outside is clipped."""
    x = np.clip(wave.samples / WAV_FULL_SCALE, -1.0, 1.0)
    pcm = np.round(x * 32767.0).astype(np.int16)
    scipy.io.wavfile.write(str(path), wave.sample_rate, pcm)


def read_wav(path) -> Waveform:
    """Load a WAV written by write_wav (or any PCM/float mono WAV).

    Integer PCM is mapped back onto the +/-WAV_FULL_SCALE float range;
    float WAVs pass through unscaled.
    """
    rate, data = scipy.io.wavfile.read(str(path))
    data = np.asarray(data)
    if data.ndim == 2:
        if data.shape[1] != 1:
            raise InputError(f"expected mono audio, got {data.shape[1]} channels")
        data = data[:, 0]
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32767.0 * WAV_FULL_SCALE
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483647.0 * WAV_FULL_SCALE
    elif data.dtype in (np.float32, np.float64):
        x = data.astype(np.float64)
    else:
        raise InputError(f"unsupported WAV sample format {data.dtype}")
    return Waveform(x, int(rate))


def save_spectrogram(path, spec: ComplexSpectrogram) -> None:
    """Dump the complex grid as .npy (self-describing shape + dtype header)."""
    np.save(str(path), spec.values)


def load_spectrogram(path, config: DspConfig) -> ComplexSpectrogram:
    values = np.load(str(path))
    return ComplexSpectrogram(values, config)
