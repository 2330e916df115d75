"""Learnable FIR kernel parameterisations.

Symmetry constraints live in the parameterisation: a Type I-IV kernel only owns
half of its taps and materialises the other half by (anti-)mirroring, so the
linear-phase property survives any optimiser step bit-exactly.
"""
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Tuple

import numpy as np

from ..autodiff import ops
from ..autodiff.tensor import Tensor
from ..dsp.fir import FirCoefficients
from ..errors import ConfigurationError

# Keeps the gammatone formula and its gradients well defined
GAMMATONE_BOUNDS = {
    "alpha": (1e-12, np.inf),
    "eta": (1.01, np.inf),
    "beta": (1e-6, np.inf),
    "f": (1e-4, 0.4999),
}


class FrontendKind(str, Enum):
    FREE = "free"
    TYPE_I = "type1"
    TYPE_II = "type2"
    TYPE_III = "type3"
    TYPE_IV = "type4"
    ZERO_PHASE = "zerophase"
    GAMMATONE = "gammatone"

    @classmethod
    def parse(cls, value) -> "FrontendKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "").replace("-", "").replace(" ", "")
        aliases = {
            "typei": "type1", "typeii": "type2", "typeiii": "type3", "typeiv": "type4",
            "i": "type1", "ii": "type2", "iii": "type3", "iv": "type4",
            "zp": "zerophase", "gamma": "gammatone",
        }
        key = aliases.get(key, key)
        try:
            return cls(key)
        except ValueError:
            names = ", ".join(k.value for k in cls)
            raise ConfigurationError(f"unknown frontend kind {value!r}; expected one of {names}") from None

    @property
    def symmetric(self) -> bool:
        return self in (FrontendKind.TYPE_I, FrontendKind.TYPE_II)

    @property
    def antisymmetric(self) -> bool:
        return self in (FrontendKind.TYPE_III, FrontendKind.TYPE_IV)

    @property
    def linear_phase(self) -> bool:
        return self.symmetric or self.antisymmetric

    @property
    def required_parity(self):
        """'odd', 'even' or None when any length is allowed."""
        if self in (FrontendKind.TYPE_I, FrontendKind.TYPE_III):
            return "odd"
        if self in (FrontendKind.TYPE_II, FrontendKind.TYPE_IV):
            return "even"
        return None


def check_parity(kind: FrontendKind, length: int) -> None:
    if length < 1:
        raise ConfigurationError(f"kernel length must be positive, got {length}")
    parity = kind.required_parity
    if parity == "odd" and length % 2 == 0:
        raise ConfigurationError(f"{kind.value} requires an odd kernel length, got K={length}")
    if parity == "even" and length % 2 == 1:
        raise ConfigurationError(f"{kind.value} requires an even kernel length, got K={length}")


def default_kernel_length(kind: FrontendKind) -> int:
    return 60 if kind.required_parity == "even" else 61


@dataclass(frozen=True)
class GammatoneParams:
    alpha: float
    eta: float
    beta: float
    f: float
    phi: float = 0.0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigurationError(f"gammatone alpha must be positive, got {self.alpha}")
        if not self.eta > 1:
            raise ConfigurationError(f"gammatone eta must exceed 1, got {self.eta}")
        if not self.beta > 0:
            raise ConfigurationError(f"gammatone beta must be positive, got {self.beta}")
        if not 0 < self.f < 0.5:
            raise ConfigurationError(f"gammatone f must lie in (0, 0.5) cycles/sample, got {self.f}")
        if self.phi != 0.0:
            raise ConfigurationError("gammatone phase is fixed at 0")

    def as_array(self) -> np.ndarray:
        return np.array([self.alpha, self.eta, self.beta, self.f])


def symmetry_map(kind: FrontendKind, length: int) -> Tuple[np.ndarray, np.ndarray, int]:
    """Index/sign map from half parameters to full taps, plus the half length."""
    idx = np.arange(length)
    mirror = length - 1 - idx
    if kind is FrontendKind.TYPE_I:
        n_half = (length + 1) // 2
    elif kind is FrontendKind.TYPE_III:
        n_half = (length - 1) // 2
    else:
        n_half = length // 2
    index = np.where(idx < n_half, idx, mirror)
    sign = np.ones(length)
    if kind.antisymmetric:
        sign[idx >= n_half] = -1.0
        if kind is FrontendKind.TYPE_III:
            centre = (length - 1) // 2
            sign[centre] = 0.0
            index[centre] = 0
    return index, sign, n_half


class FrontendKernel:
    """One learnable tConv kernel: a kind, a length and its free parameters."""

    def __init__(self, kind, length: int, free_params: np.ndarray):
        self.kind = FrontendKind.parse(kind)
        check_parity(self.kind, length)
        self.length = int(length)
        free_params = np.array(free_params, dtype=np.float64).reshape(-1)
        expected = self.param_count(self.kind, self.length)
        if free_params.size != expected:
            raise ConfigurationError(
                f"{self.kind.value} kernel of length {length} needs {expected} parameters, got {free_params.size}"
            )
        self.params = Tensor(free_params, requires_grad=True, name=f"{self.kind.value}_params")
        if self.kind is FrontendKind.GAMMATONE:
            GammatoneParams(*free_params)

    @staticmethod
    def param_count(kind: FrontendKind, length: int) -> int:
        if kind is FrontendKind.GAMMATONE:
            return 4
        if kind.linear_phase:
            return symmetry_map(kind, length)[2]
        return length

    @classmethod
    def from_taps(cls, kind, taps) -> "FrontendKernel":
        """Project full taps onto the kind's constraint (mirror-average or anti-average)."""
        kind = FrontendKind.parse(kind)
        if kind is FrontendKind.GAMMATONE:
            raise ConfigurationError("gammatone kernels are built from GammatoneParams, not taps")
        h = np.asarray(taps, dtype=np.float64)
        if kind.symmetric:
            h = (h + h[::-1]) / 2
        elif kind.antisymmetric:
            h = (h - h[::-1]) / 2
        n_half = cls.param_count(kind, h.size)
        return cls(kind, h.size, h[:n_half] if kind.linear_phase else h)

    @classmethod
    def from_gammatone(cls, params: GammatoneParams, length: int) -> "FrontendKernel":
        return cls(FrontendKind.GAMMATONE, length, params.as_array())

    @property
    def free_params(self) -> np.ndarray:
        return self.params.data

    def gammatone_params(self) -> GammatoneParams:
        if self.kind is not FrontendKind.GAMMATONE:
            raise ConfigurationError(f"{self.kind.value} kernel has no gammatone parameters")
        return GammatoneParams(*self.params.data)

    def taps_tensor(self) -> Tensor:
        """Full taps as a graph-tracked tensor of shape (K,)."""
        if self.kind is FrontendKind.GAMMATONE:
            return ops.gammatone(self.params, self.length)
        if self.kind.linear_phase:
            index, sign, _ = symmetry_map(self.kind, self.length)
            return ops.gather(self.params, index, sign)
        return self.params

    def materialize(self) -> FirCoefficients:
        # Build outside any recording graph; the result is a plain value
        if self.kind is FrontendKind.GAMMATONE:
            alpha, eta, beta, f = self.params.data
            t = np.arange(1, self.length + 1, dtype=np.float64)
            return FirCoefficients(alpha * t ** (eta - 1) * np.exp(-2 * np.pi * beta * t) * np.cos(2 * np.pi * f * t))
        if self.kind.linear_phase:
            index, sign, _ = symmetry_map(self.kind, self.length)
            return FirCoefficients(sign * self.params.data[index])
        return FirCoefficients(self.params.data.copy())

    def clamp(self) -> None:
        """Pull gammatone parameters back inside their valid domain after an update."""
        if self.kind is not FrontendKind.GAMMATONE:
            return
        for i, (lo, hi) in enumerate(GAMMATONE_BOUNDS.values()):
            self.params.data[i] = min(max(self.params.data[i], lo), hi)

    def describe_params(self, sample_rate_hz: float = 1000.0) -> Dict:
        if self.kind is FrontendKind.GAMMATONE:
            alpha, eta, beta, f = (float(v) for v in self.params.data)
            return {
                "alpha": alpha, "eta": eta, "beta": beta, "f": f, "phi": 0.0,
                "f_hz": f * sample_rate_hz, "beta_hz": beta * sample_rate_hz,
            }
        return {"free_params": self.params.data.tolist()}

    def __repr__(self):
        return f"FrontendKernel(kind={self.kind.value}, length={self.length})"


def materialize(kernel: FrontendKernel) -> FirCoefficients:
    return kernel.materialize()
