"""Synthetic multi-domain phonocardiogram cycles.

Each domain stands for one stethoscope: a smooth FIR colouring plus its own
noise floor. Every cycle draws from a generator seeded by (seed, cycle index),
so serial and threaded generation produce the same samples.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal as sps

from ..dsp.fir import FirCoefficients, Signal, centered_conv
from ..dsp.spectral import band_power_db
from ..errors import ConfigurationError, DataError
from ..observability.langfuse_client import observe
from .cycles import CYCLE_LEN, SAMPLE_RATE_HZ, CardiacCycle, Label

logger = logging.getLogger(__name__)

HEART_SOUND_LEN = 60  # samples at 1 kHz
MIN_MURMUR_ELEVATION_DB = 3.0
_MURMUR_GUARD = 10
_BAND_TAPS = 101


class MurmurPhase(str, Enum):
    SYSTOLIC = "systolic"
    DIASTOLIC = "diastolic"


class MurmurEnvelope(str, Enum):
    CRESCENDO = "crescendo"
    DECRESCENDO = "decrescendo"
    CRESCENDO_DECRESCENDO = "crescendo-decrescendo"
    UNIFORM = "uniform"


@dataclass(frozen=True)
class MurmurSpec:
    phase: MurmurPhase
    envelope: MurmurEnvelope
    band_hz: Tuple[float, float] = (80.0, 250.0)
    amplitude: float = 0.3

    def __post_init__(self):
        object.__setattr__(self, "phase", MurmurPhase(self.phase))
        object.__setattr__(self, "envelope", MurmurEnvelope(self.envelope))
        lo, hi = self.band_hz
        if not 0 < lo < hi < SAMPLE_RATE_HZ / 2:
            raise ConfigurationError(f"murmur band {self.band_hz} must lie inside (0, 500) Hz")
        if not self.amplitude > 0:
            raise ConfigurationError(f"murmur amplitude must be positive, got {self.amplitude}")


@dataclass(frozen=True)
class DomainProfile:
    domain_id: int
    transfer_fir: FirCoefficients
    noise_sigma: float
    count_normal: int
    count_abnormal: int

    def __post_init__(self):
        if not np.any(self.transfer_fir.h != 0):
            raise ConfigurationError(f"domain {self.domain_id}: transfer FIR is all zeros")
        if self.noise_sigma < 0:
            raise ConfigurationError(f"domain {self.domain_id}: noise sigma must be >= 0")
        if self.count_normal < 0 or self.count_abnormal < 0:
            raise ConfigurationError(f"domain {self.domain_id}: counts must be >= 0")


def random_transfer_fir(domain_id: int, n_taps: int = 9) -> FirCoefficients:
    """Smooth low-order colouring, fixed per domain id, peak gain normalised to 1."""
    rng = np.random.default_rng(10_000 + domain_id)
    taps = sps.firwin(n_taps, rng.uniform(200.0, 450.0), fs=SAMPLE_RATE_HZ)
    taps = taps + 0.1 * rng.standard_normal(n_taps) * sps.windows.hamming(n_taps)
    taps /= np.max(np.abs(np.fft.rfft(taps, 256)))
    return FirCoefficients(taps)


def make_domain_profile(
    domain_id: int,
    count_normal: int,
    count_abnormal: int,
    noise_sigma: Optional[float] = None,
    identity: bool = False,
) -> DomainProfile:
    if noise_sigma is None:
        noise_sigma = 0.005 + 0.015 * np.random.default_rng(20_000 + domain_id).random()
    transfer = FirCoefficients([1.0]) if identity else random_transfer_fir(domain_id)
    return DomainProfile(domain_id, transfer, float(noise_sigma), count_normal, count_abnormal)


# ---------------------------------------------------------------- single cycle

def _envelope(kind: MurmurEnvelope, n: int) -> np.ndarray:
    if kind is MurmurEnvelope.CRESCENDO:
        return np.linspace(0.0, 1.0, n)
    if kind is MurmurEnvelope.DECRESCENDO:
        return np.linspace(1.0, 0.0, n)
    if kind is MurmurEnvelope.CRESCENDO_DECRESCENDO:
        return 1.0 - np.abs(np.linspace(-1.0, 1.0, n))
    return np.ones(n)


def _band_noise(rng: np.random.Generator, n: int, band_hz) -> np.ndarray:
    taps = sps.firwin(_BAND_TAPS, list(band_hz), pass_zero=False, fs=SAMPLE_RATE_HZ)
    white = rng.standard_normal(n + _BAND_TAPS - 1)
    noise = np.convolve(white, taps, mode="valid")
    rms = np.sqrt(np.mean(noise ** 2))
    return noise / rms if rms > 0 else noise


def _heart_sound(rng: np.random.Generator, band_hz, amplitude: float) -> np.ndarray:
    t = np.arange(HEART_SOUND_LEN) / SAMPLE_RATE_HZ
    f = rng.uniform(*band_hz)
    damping = np.exp(-t / 0.025)
    return amplitude * sps.windows.hann(HEART_SOUND_LEN, sym=True) * damping * np.sin(
        2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)
    )


def _add_shaped_noise(x, rng, window, envelope, band_hz, amplitude):
    start, stop = window[0] + _MURMUR_GUARD, window[1] - _MURMUR_GUARD
    n = stop - start
    if n <= 0:
        return
    x[start:stop] += amplitude * _envelope(envelope, n) * _band_noise(rng, n, band_hz)


def murmur_elevation_db(cycle: CardiacCycle, murmur: MurmurSpec) -> float:
    """Band power of the murmur's phase window over the opposite phase window, in dB."""
    if cycle.systole_window is None or cycle.diastole_window is None:
        raise DataError(f"cycle {cycle.recording_id} has no phase annotations")
    own, other = cycle.systole_window, cycle.diastole_window
    if murmur.phase is MurmurPhase.DIASTOLIC:
        own, other = other, own

    def power(window):
        return band_power_db(Signal(cycle.samples[window[0]:window[1]], SAMPLE_RATE_HZ), murmur.band_hz)

    return power(own) - power(other)


def synth_cycle(
    label,
    murmur: Optional[MurmurSpec],
    domain: DomainProfile,
    seed,
    breathing: bool = False,
    recording_id: str = None,
) -> CardiacCycle:
    """One cycle: S1/S2 bursts, an optional murmur, device colouring and noise, padded to 2500.

    ``breathing`` adds a diastolic noise burst that mimics a murmur on a Normal cycle.
    """
    label = Label.parse(label)
    if label is Label.ABNORMAL and murmur is None:
        raise DataError("an Abnormal cycle needs a murmur")
    boost = 1.0
    for _ in range(4):
        cycle = _render(label, murmur, domain, seed, breathing, boost, recording_id)
        if label is Label.NORMAL or murmur_elevation_db(cycle, murmur) >= MIN_MURMUR_ELEVATION_DB:
            return cycle
        boost *= 2.0
    raise DataError(f"domain {domain.domain_id}: murmur stays below {MIN_MURMUR_ELEVATION_DB} dB over the noise floor")


def _render(label, murmur, domain, seed, breathing, boost, recording_id) -> CardiacCycle:
    rng = np.random.default_rng(seed)
    period = rng.uniform(700.0, 1000.0)

    def jitter():
        return 1.0 + rng.uniform(-0.05, 0.05)

    s1 = int(round(50 * jitter()))
    s2 = s1 + int(round(0.35 * period * jitter()))
    end = min(s1 + int(round(period)), CYCLE_LEN)
    systole = (s1 + HEART_SOUND_LEN, s2)
    diastole = (s2 + HEART_SOUND_LEN, end)

    x = np.zeros(CYCLE_LEN)
    x[s1:s1 + HEART_SOUND_LEN] += _heart_sound(rng, (30.0, 60.0), rng.uniform(0.8, 1.2))
    x[s2:s2 + HEART_SOUND_LEN] += _heart_sound(rng, (50.0, 100.0), rng.uniform(0.5, 0.9))
    if label is Label.ABNORMAL:
        window = systole if murmur.phase is MurmurPhase.SYSTOLIC else diastole
        _add_shaped_noise(x, rng, window, murmur.envelope, murmur.band_hz, murmur.amplitude * boost)
    if breathing:
        _add_shaped_noise(x, rng, diastole, MurmurEnvelope.CRESCENDO_DECRESCENDO, (150.0, 400.0), 0.25)

    x = centered_conv(Signal(x, SAMPLE_RATE_HZ), domain.transfer_fir).samples.copy()
    if domain.noise_sigma > 0:
        x[:end] += domain.noise_sigma * rng.standard_normal(end)
    x[end:] = 0.0
    # float32-representable so WAV export round-trips bit-exactly
    x = x.astype(np.float32).astype(np.float64)
    return CardiacCycle(
        samples=x,
        label=label,
        domain_id=domain.domain_id,
        recording_id=recording_id or f"d{domain.domain_id}_synthetic",
        systole_window=systole,
        diastole_window=diastole,
    )


# ---------------------------------------------------------------- datasets

DEFAULT_MURMUR_MIX = (
    MurmurSpec(MurmurPhase.SYSTOLIC, MurmurEnvelope.UNIFORM),
    MurmurSpec(MurmurPhase.SYSTOLIC, MurmurEnvelope.CRESCENDO_DECRESCENDO),
    MurmurSpec(MurmurPhase.SYSTOLIC, MurmurEnvelope.CRESCENDO),
    MurmurSpec(MurmurPhase.SYSTOLIC, MurmurEnvelope.DECRESCENDO),
    MurmurSpec(MurmurPhase.DIASTOLIC, MurmurEnvelope.DECRESCENDO, band_hz=(60.0, 200.0)),
)


@observe(name="synth_dataset")
def synth_dataset(
    profiles: Sequence[DomainProfile],
    murmur_mix: Sequence[MurmurSpec] = DEFAULT_MURMUR_MIX,
    seed: int = 0,
    cycles_per_recording: int = 1,
    confuser_fraction: float = 0.0,
    workers: int = 1,
) -> List[CardiacCycle]:
    if not profiles:
        raise ConfigurationError("synth_dataset needs at least one domain profile")
    if len(profiles) < 2:
        raise ConfigurationError("a multi-domain dataset needs at least 2 domain profiles")
    if not murmur_mix:
        raise ConfigurationError("murmur mix is empty")
    if cycles_per_recording < 1:
        raise ConfigurationError("cycles_per_recording must be >= 1")

    jobs = []
    for profile in profiles:
        for label, count in ((Label.NORMAL, profile.count_normal), (Label.ABNORMAL, profile.count_abnormal)):
            for k in range(count):
                rec = f"d{profile.domain_id}_{label.value[0].lower()}{k // cycles_per_recording:05d}"
                jobs.append((len(jobs), profile, label, rec))

    def run(job):
        i, profile, label, rec = job
        rng = np.random.default_rng([seed, i])
        murmur = murmur_mix[int(rng.integers(len(murmur_mix)))] if label is Label.ABNORMAL else None
        breathing = label is Label.NORMAL and rng.random() < confuser_fraction
        return synth_cycle(label, murmur, profile, [seed, i, 1], breathing=breathing, recording_id=rec)

    logger.info("Generating %d cycles over %d domains (seed=%d)", len(jobs), len(profiles), seed)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, jobs))
    return [run(job) for job in jobs]


@dataclass(frozen=True)
class DatasetPreset:
    name: str
    profiles: Tuple[DomainProfile, ...]
    murmur_mix: Tuple[MurmurSpec, ...] = DEFAULT_MURMUR_MIX
    confuser_fraction: float = 0.0


PRESETS = ("balanced", "imbalanced", "confuser")


def build_preset(name: str, n_domains: int = 2, n_normal: int = 100, n_abnormal: int = 100) -> DatasetPreset:
    """Per-domain counts for a named preset.

    ``imbalanced`` gives domain 0 three times as many Normal cycles as all other
    domains together (75% of every Normal cycle), like one dominant data source.
    """
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; expected one of {', '.join(PRESETS)}")
    if n_domains < 2:
        raise ConfigurationError("presets need at least 2 domains")
    profiles = []
    for d in range(n_domains):
        normal = n_normal
        if name == "imbalanced" and d == 0:
            normal = 3 * (n_domains - 1) * n_normal
        profiles.append(make_domain_profile(d, normal, n_abnormal))
    confuser = 0.5 if name == "confuser" else 0.0
    return DatasetPreset(name, tuple(profiles), DEFAULT_MURMUR_MIX, confuser)


def generate_preset(preset: DatasetPreset, seed: int = 0, cycles_per_recording: int = 1, workers: int = 1):
    return synth_dataset(
        preset.profiles,
        preset.murmur_mix,
        seed=seed,
        cycles_per_recording=cycles_per_recording,
        confuser_fraction=preset.confuser_fraction,
        workers=workers,
    )
