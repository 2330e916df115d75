"""Windows, Welch spectral estimation and band-limited resampling."""
from fractions import Fraction
from typing import Tuple

import numpy as np
from scipy import signal as sps

from ..errors import ConfigurationError, DataError
from .fir import Signal


def blackman_window(n: int) -> np.ndarray:
    if n < 1:
        raise ConfigurationError(f"window length must be >= 1, got {n}")
    return sps.windows.blackman(n, sym=True)


def kaiser_window(n: int, beta: float) -> np.ndarray:
    if n < 1:
        raise ConfigurationError(f"window length must be >= 1, got {n}")
    return sps.windows.kaiser(n, beta, sym=True)


def welch_psd(x: Signal, window_len: int = 1024, kaiser_beta: float = 5.0) -> Tuple[np.ndarray, np.ndarray]:
    """Averaged periodogram over 50%-overlapping Kaiser-windowed segments.

    Returns (freq_hz, psd), both with window_len // 2 + 1 bins.
    """
    if len(x) < window_len:
        raise DataError(f"signal of {len(x)} samples is shorter than one {window_len}-sample window")
    freqs, psd = sps.welch(
        x.samples,
        fs=x.sample_rate_hz,
        window=kaiser_window(window_len, kaiser_beta),
        nperseg=window_len,
        noverlap=window_len // 2,
        detrend=False,
        scaling="density",
    )
    return freqs, psd


def band_power_db(x: Signal, band_hz: Tuple[float, float], window_len: int = 128) -> float:
    """Welch power inside band_hz in dB; short excerpts shrink the window to fit."""
    n = min(window_len, len(x))
    freqs, psd = welch_psd(x, n, 5.0)
    mask = (freqs >= band_hz[0]) & (freqs <= band_hz[1])
    return float(10 * np.log10(np.sum(psd[mask]) + 1e-20))


def resample(x: Signal, target_hz: float) -> Signal:
    """Polyphase resampling with an anti-aliasing low-pass ahead of decimation."""
    if not target_hz > 0:
        raise ConfigurationError(f"target rate must be positive, got {target_hz}")
    if target_hz == x.sample_rate_hz:
        return x
    ratio = Fraction(target_hz / x.sample_rate_hz).limit_denominator(10000)
    # 'line' padding keeps DC and slow trends intact at the edges
    y = sps.resample_poly(x.samples, ratio.numerator, ratio.denominator, padtype="line")
    return Signal(y, target_hz)
