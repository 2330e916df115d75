"""FIR filtering and frequency-domain analysis.

Every value is 64-bit float and immutable once built, so signals and
coefficient vectors can be shared between threads freely.
"""
from dataclasses import dataclass, field
from typing import Tuple, Union

import numpy as np
from scipy import signal as sps

from ..errors import ConfigurationError, DataError

# Bins whose magnitude falls below this have no meaningful phase
MAGNITUDE_FLOOR = 1e-8


def _frozen(values, name: str) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{name} contains NaN or Inf")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Signal:
    samples: np.ndarray
    sample_rate_hz: float

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ConfigurationError(f"sample rate must be positive, got {self.sample_rate_hz}")
        object.__setattr__(self, "samples", _frozen(self.samples, "signal"))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class FirCoefficients:
    h: np.ndarray

    def __post_init__(self):
        taps = _frozen(self.h, "FIR taps")
        if taps.size < 1:
            raise ConfigurationError("an FIR filter needs at least one tap")
        object.__setattr__(self, "h", taps)

    def __len__(self) -> int:
        return self.h.size

    @property
    def order(self) -> int:
        return self.h.size - 1

    @classmethod
    def delta(cls, length: int, position: int = None) -> "FirCoefficients":
        taps = np.zeros(length)
        taps[(length - 1) // 2 if position is None else position] = 1.0
        return cls(taps)


@dataclass(frozen=True)
class FrequencyResponse:
    n_fft: int
    magnitude: np.ndarray
    phase_rad: np.ndarray
    group_delay_samples: np.ndarray
    valid: np.ndarray = field(repr=False)

    @property
    def omega(self) -> np.ndarray:
        return 2 * np.pi * np.arange(self.magnitude.size) / self.n_fft

    def freq_hz(self, sample_rate_hz: float) -> np.ndarray:
        return np.arange(self.magnitude.size) * sample_rate_hz / self.n_fft


def _as_taps(h: Union[FirCoefficients, np.ndarray]) -> np.ndarray:
    return h.h if isinstance(h, FirCoefficients) else np.asarray(h, dtype=np.float64)


def fir_filter(x: Signal, h: FirCoefficients) -> Signal:
    """Causal direct-form filtering, y(n) = sum_i h(i) x(n - i), same length as x."""
    if len(x) == 0:
        raise DataError("cannot filter an empty signal")
    y = sps.lfilter(_as_taps(h), [1.0], x.samples)
    return Signal(y, x.sample_rate_hz)


def centered_offset(length: int) -> int:
    # even lengths centre at floor((K-1)/2)
    return (length - 1) // 2


def centered_conv(x: Signal, h: FirCoefficients, offset: int = None) -> Signal:
    """Same-length convolution y(n) = sum_i h(i) x(n + c - i), zero padded at both ends."""
    if len(x) == 0:
        raise DataError("cannot filter an empty signal")
    taps = _as_taps(h)
    c = centered_offset(taps.size) if offset is None else offset
    full = np.convolve(x.samples, taps, mode="full")
    return Signal(full[c:c + len(x)], x.sample_rate_hz)


def _unwrap_valid(phase: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Unwrap modulo pi across valid bins and fill masked bins linearly.

    A real amplitude function changes sign at its zeros, which shows up as a pi
    jump in the raw angle; unwrapping with period pi removes it.
    """
    idx = np.flatnonzero(valid)
    out = np.zeros_like(phase)
    if idx.size == 0:
        return out
    unwrapped = np.unwrap(phase[idx], period=np.pi)
    bins = np.arange(phase.size)
    out[:] = np.interp(bins, idx, unwrapped)
    if idx.size >= 2:
        head = bins < idx[0]
        tail = bins > idx[-1]
        slope_head = (unwrapped[1] - unwrapped[0]) / (idx[1] - idx[0])
        slope_tail = (unwrapped[-1] - unwrapped[-2]) / (idx[-1] - idx[-2])
        out[head] = unwrapped[0] + slope_head * (bins[head] - idx[0])
        out[tail] = unwrapped[-1] + slope_tail * (bins[tail] - idx[-1])
    return out


def freq_response(h: FirCoefficients, n_fft: int = 1024) -> FrequencyResponse:
    taps = _as_taps(h)
    if n_fft < 2 * taps.size:
        raise ConfigurationError(f"n_fft={n_fft} too small for {taps.size} taps (need >= {2 * taps.size})")
    spectrum = np.fft.rfft(taps, n_fft)
    magnitude = np.abs(spectrum)
    valid = magnitude > MAGNITUDE_FLOOR
    phase = _unwrap_valid(np.angle(spectrum), valid)
    omega = 2 * np.pi * np.arange(magnitude.size) / n_fft
    group_delay = -np.gradient(phase, omega)
    for arr in (magnitude, phase, group_delay, valid):
        arr.setflags(write=False)
    return FrequencyResponse(n_fft, magnitude, phase, group_delay, valid)


def linear_phase_fit(response: FrequencyResponse) -> Tuple[float, float, float]:
    """Least-squares fit phase = -a*w + B over valid bins.

    Returns (a, B, max absolute residual in radians).
    """
    omega = response.omega[response.valid]
    phase = response.phase_rad[response.valid]
    if omega.size < 2:
        return 0.0, float(phase[0]) if phase.size else 0.0, 0.0
    slope, intercept = np.polyfit(omega, phase, 1)
    residual = np.max(np.abs(phase - (slope * omega + intercept)))
    return float(-slope), float(intercept), float(residual)


def phase_linearity_residual(response: FrequencyResponse) -> float:
    return linear_phase_fit(response)[2]
