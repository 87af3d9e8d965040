"""Anti-alias filtering, decimation, STFT and spectrogram images."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .audio_io import AudioBuffer
from .errors import (
    CutoffTooHigh,
    EmptySpectrogram,
    InvalidFilterSpec,
    SignalTooShort,
)

LOG_EPS = 1e-10


@dataclass(frozen=True)
class FirFilter:
    taps: np.ndarray
    cutoff_norm: float

    @property
    def num_taps(self) -> int:
        return len(self.taps)

    def response(self, freq_norm) -> np.ndarray:
        """Complex frequency response at normalized frequencies (cycles/sample)."""
        f = np.atleast_1d(np.asarray(freq_norm, dtype=np.float64))
        n = np.arange(self.num_taps)
        return np.exp(-2j * np.pi * np.outer(f, n)) @ self.taps


@dataclass(frozen=True)
class SpectrogramConfig:
    fft_size: int = 512
    hop: int = 128
    window_fn: str = "hann"
    db_floor: float = -80.0

    def __post_init__(self):
        n = self.fft_size
        if n <= 0 or n & (n - 1):
            raise ValueError(f"fft_size must be a power of two, got {n}")
        if not 0 < self.hop <= n:
            raise ValueError(f"hop must be in (0, fft_size], got {self.hop}")
        if self.window_fn != "hann":
            raise ValueError(f"unsupported window {self.window_fn!r}")


@dataclass
class Spectrogram:
    values: np.ndarray  # [n_frames, n_bins] in dB
    bin_hz: float
    frame_s: float

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


@dataclass
class ImageTensor:
    pixels: np.ndarray  # [H, W, 3] in [0, 1]

    def __post_init__(self):
        p = np.asarray(self.pixels)
        if p.ndim != 3 or p.shape[2] != 3:
            raise ValueError(f"ImageTensor needs shape (H, W, 3), got {p.shape}")
        self.pixels = p

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def chw(self, dtype=np.float32) -> np.ndarray:
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1), dtype=dtype)


@dataclass(frozen=True)
class ColormapSpec:
    """``lut`` is a (256, 3) uint8 table; ``None`` means grayscale."""

    lut: np.ndarray | None = None

    def apply(self, scalar: np.ndarray) -> np.ndarray:
        if self.lut is None:
            return np.repeat(scalar[:, :, None], 3, axis=2)
        idx = np.clip(np.round(scalar * 255.0), 0, 255).astype(np.intp)
        return self.lut[idx].astype(np.float64) / 255.0


GRAYSCALE = ColormapSpec()


def load_colormap(path) -> ColormapSpec:
    """Read a 256-line ``r g b`` lookup table (integers 0-255)."""
    lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(lines) != 256:
        raise ValueError(f"{path}: colormap needs 256 entries, found {len(lines)}")
    lut = np.zeros((256, 3), dtype=np.uint8)
    for i, ln in enumerate(lines):
        parts = ln.split()
        if len(parts) != 3:
            raise ValueError(f"{path}:{i + 1}: expected 'r g b'")
        vals = [int(p) for p in parts]
        if any(v < 0 or v > 255 for v in vals):
            raise ValueError(f"{path}:{i + 1}: component outside 0-255")
        lut[i] = vals
    return ColormapSpec(lut)


# -- filtering ---------------------------------------------------------------


def design_lowpass(cutoff_norm: float, num_taps: int = 63) -> FirFilter:
    """Hamming-windowed sinc low-pass, DC gain normalized to one.

    ``cutoff_norm`` is a fraction of the input sample rate, in (0, 0.5).
    """
    if not 0.0 < cutoff_norm < 0.5:
        raise InvalidFilterSpec(f"cutoff {cutoff_norm} outside (0, 0.5)")
    if num_taps < 11 or num_taps % 2 == 0:
        raise InvalidFilterSpec(f"num_taps must be odd and >= 11, got {num_taps}")
    m = num_taps - 1
    n = np.arange(num_taps) - m / 2
    ideal = 2.0 * cutoff_norm * np.sinc(2.0 * cutoff_norm * n)
    window = 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(num_taps) / m)
    taps = ideal * window
    taps /= taps.sum()
    # enforce exact symmetry after the division
    taps = 0.5 * (taps + taps[::-1])
    return FirFilter(taps, float(cutoff_norm))


def decimate(buffer: AudioBuffer, factor: int, fir: FirFilter) -> AudioBuffer:
    """Low-pass ``buffer`` with ``fir`` then keep every ``factor``-th sample.

    Convolution is zero-padded and centered on the filter's midpoint, so the
    output is not delayed. Output length is ``ceil(len / factor)``.
    """
    if factor < 1:
        raise ValueError(f"decimation factor must be >= 1, got {factor}")
    limit = 0.5 / factor * 0.9
    if fir.cutoff_norm > limit + 1e-12:
        raise CutoffTooHigh(
            f"cutoff {fir.cutoff_norm} exceeds {limit:.4f} for decimation by {factor}"
        )
    if buffer.sample_rate_hz % factor:
        raise ValueError(
            f"{buffer.sample_rate_hz} Hz is not divisible by decimation factor {factor}"
        )
    out = kernels.fir_decimate(buffer.samples, fir.taps, factor)
    return AudioBuffer(out, buffer.sample_rate_hz // factor, buffer.source_id)


# -- spectral analysis -------------------------------------------------------


def hann(n: int) -> np.ndarray:
    """Periodic Hann window (coherent gain exactly 0.5)."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_signal(samples: np.ndarray, fft_size: int, hop: int) -> np.ndarray:
    n_frames = (len(samples) - fft_size) // hop + 1
    idx = np.arange(fft_size)[None, :] + hop * np.arange(n_frames)[:, None]
    return samples[idx]


def stft(buffer: AudioBuffer, config: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Complex one-sided STFT, shape ``(n_frames, fft_size // 2 + 1)``."""
    if len(buffer) < config.fft_size:
        raise SignalTooShort(
            f"{len(buffer)} samples is shorter than one {config.fft_size}-point frame"
        )
    frames = frame_signal(buffer.samples, config.fft_size, config.hop)
    return np.fft.rfft(frames * hann(config.fft_size), axis=1)


def spectrogram(buffer: AudioBuffer, config: SpectrogramConfig = SpectrogramConfig()) -> Spectrogram:
    mag = np.abs(stft(buffer, config))
    db = 20.0 * np.log10(mag + LOG_EPS)
    np.maximum(db, config.db_floor, out=db)
    return Spectrogram(
        values=db,
        bin_hz=buffer.sample_rate_hz / config.fft_size,
        frame_s=config.hop / buffer.sample_rate_hz,
    )


# -- rendering ---------------------------------------------------------------


def minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi <= lo:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def render_image(
    spec: Spectrogram, out_size: int = 224, colormap: ColormapSpec = GRAYSCALE
) -> ImageTensor:
    """Min-max scale, orient (time right, low frequency at the bottom), resize."""
    if spec.values.size == 0:
        raise EmptySpectrogram("spectrogram has no cells")
    if out_size < 16:
        raise ValueError(f"out_size must be >= 16, got {out_size}")
    scalar = minmax(spec.values.T[::-1])
    scalar = kernels.resize_bilinear(scalar, out_size, out_size)
    np.clip(scalar, 0.0, 1.0, out=scalar)
    return ImageTensor(colormap.apply(scalar))


def preprocess_segment(
    buffer: AudioBuffer,
    factor: int = 2,
    fir: FirFilter | None = None,
    config: SpectrogramConfig = SpectrogramConfig(),
    out_size: int = 224,
    colormap: ColormapSpec = GRAYSCALE,
) -> ImageTensor:
    """Audio segment to CNN input: decimate, spectrogram, render."""
    if factor > 1:
        if fir is None:
            fir = design_lowpass(0.45 / factor, 63)
        buffer = decimate(buffer, factor, fir)
    return render_image(spectrogram(buffer, config), out_size, colormap)


def save_png(image: ImageTensor, path) -> None:
    from PIL import Image

    px = np.clip(np.round(np.asarray(image.pixels, dtype=np.float64) * 255.0), 0, 255)
    Image.fromarray(px.astype(np.uint8)).save(path, format="PNG")


def load_png(path, dtype=np.float32) -> ImageTensor:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=dtype)
    return ImageTensor(arr / dtype(255.0))
