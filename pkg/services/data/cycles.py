from collections import OrderedDict
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from ..errors import DataError

CYCLE_LEN = 2500
SAMPLE_RATE_HZ = 1000.0

Window = Optional[Tuple[int, int]]


class Label(str, Enum):
    NORMAL = "Normal"
    ABNORMAL = "Abnormal"

    @property
    def index(self) -> int:
        return 1 if self is Label.ABNORMAL else 0

    @classmethod
    def from_index(cls, value: int) -> "Label":
        return cls.ABNORMAL if int(value) == 1 else cls.NORMAL

    @classmethod
    def parse(cls, value) -> "Label":
        """Accepts Normal/Abnormal names and the -1/1 or 0/1 numeric codings."""
        if isinstance(value, cls):
            return value
        text = str(value).strip().lower()
        if text in ("normal", "-1", "0", "-1.0", "0.0"):
            return cls.NORMAL
        if text in ("abnormal", "1", "1.0"):
            return cls.ABNORMAL
        raise DataError(f"unrecognised label {value!r}")


def fit_length(samples: np.ndarray, length: int = CYCLE_LEN) -> np.ndarray:
    """Zero-pad or truncate to exactly ``length`` samples."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.size >= length:
        return samples[:length].copy()
    return np.pad(samples, (0, length - samples.size))


@dataclass(frozen=True, eq=False)
class CardiacCycle:
    samples: np.ndarray
    label: Label
    domain_id: int
    recording_id: str
    systole_window: Window = None
    diastole_window: Window = None

    def __post_init__(self):
        samples = np.array(self.samples, dtype=np.float64)
        if samples.shape != (CYCLE_LEN,):
            raise DataError(f"a cardiac cycle has exactly {CYCLE_LEN} samples, got {samples.shape}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "label", Label.parse(self.label))
        object.__setattr__(self, "domain_id", int(self.domain_id))
        for name in ("systole_window", "diastole_window"):
            window = getattr(self, name)
            if window is None:
                continue
            start, stop = int(window[0]), int(window[1])
            if not 0 <= start < stop <= CYCLE_LEN:
                raise DataError(f"{name} {window} outside [0, {CYCLE_LEN})")
            object.__setattr__(self, name, (start, stop))
        s, d = self.systole_window, self.diastole_window
        if s is not None and d is not None and s[0] < d[1] and d[0] < s[1]:
            raise DataError(f"systole {s} and diastole {d} windows overlap")

    def identical(self, other: "CardiacCycle") -> bool:
        return (
            np.array_equal(self.samples, other.samples)
            and self.label == other.label
            and self.domain_id == other.domain_id
            and self.recording_id == other.recording_id
            and self.systole_window == other.systole_window
            and self.diastole_window == other.diastole_window
        )


def group_by_recording(cycles: Iterable[CardiacCycle]) -> Dict[str, List[CardiacCycle]]:
    groups: Dict[str, List[CardiacCycle]] = OrderedDict()
    for c in cycles:
        groups.setdefault(c.recording_id, []).append(c)
    return groups


def stack_samples(cycles: List[CardiacCycle]) -> np.ndarray:
    return np.stack([c.samples for c in cycles]) if cycles else np.zeros((0, CYCLE_LEN))


def split_by_recording(
    cycles: List[CardiacCycle], test_fraction: float = 0.2, seed: int = 0
) -> Tuple[List[CardiacCycle], List[CardiacCycle]]:
    """Recording-level split, stratified by (domain, label); no recording straddles both sides."""
    if not 0 < test_fraction < 1:
        raise DataError(f"test fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.default_rng(seed)
    strata: Dict[Tuple[int, Label], List[str]] = OrderedDict()
    for rec_id, group in group_by_recording(cycles).items():
        strata.setdefault((group[0].domain_id, group[0].label), []).append(rec_id)
    test_ids = set()
    for rec_ids in strata.values():
        n_test = int(round(len(rec_ids) * test_fraction))
        if len(rec_ids) > 1:
            n_test = min(max(n_test, 1), len(rec_ids) - 1)
        order = rng.permutation(len(rec_ids))
        test_ids.update(rec_ids[i] for i in order[:n_test])
    train = [c for c in cycles if c.recording_id not in test_ids]
    test = [c for c in cycles if c.recording_id in test_ids]
    return train, test
