"""The four-kernel learnable filterbank that feeds the CNN branches."""
import json
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal as sps

from ..autodiff import ops
from ..autodiff.tensor import Graph, Tensor, backward_from
from ..dsp.fir import FirCoefficients, freq_response
from ..errors import ConfigurationError, GraphError, ShapeError
from .kernels import FrontendKernel, FrontendKind, GammatoneParams, check_parity

N_KERNELS = 4
DEFAULT_BANDS_HZ: Tuple[Tuple[float, float], ...] = ((25, 45), (45, 80), (80, 200), (200, 400))
DEFAULT_SAMPLE_RATE_HZ = 1000.0


@dataclass
class Filterbank:
    kernels: List[FrontendKernel]

    def __post_init__(self):
        if len(self.kernels) != N_KERNELS:
            raise ConfigurationError(f"a filterbank has exactly {N_KERNELS} kernels, got {len(self.kernels)}")
        kinds = {k.kind for k in self.kernels}
        lengths = {k.length for k in self.kernels}
        if len(kinds) != 1 or len(lengths) != 1:
            raise ConfigurationError("all filterbank kernels must share one kind and one length")

    @property
    def kind(self) -> FrontendKind:
        return self.kernels[0].kind

    @property
    def length(self) -> int:
        return self.kernels[0].length

    def parameters(self) -> List[Tensor]:
        return [k.params for k in self.kernels]

    def clamp(self) -> None:
        for k in self.kernels:
            k.clamp()


def zero_phase_offsets(length: int) -> Tuple[int, int]:
    """Centring offsets of the forward pass and of its time-reversed adjoint pass."""
    first = (length - 1) // 2
    return first, length - 1 - first


def frontend_forward(x: Tensor, bank: Filterbank) -> Tensor:
    """(B, 1, N) or (1, N) input to (B, 4, N) / (4, N) branch outputs.

    ZeroPhase applies the kernel, then its time reverse; with the second pass
    centred on the adjoint offset the composite is exactly zero-phase for any K.
    """
    unbatched = x.ndim == 2
    if x.shape[-2] != 1:
        raise ShapeError(f"the front-end takes a single-channel input, got shape {x.shape}")
    xb = ops.reshape(x, (1,) + x.shape) if unbatched else x
    K = bank.length
    taps = [ops.reshape(k.taps_tensor(), (1, 1, K)) for k in bank.kernels]
    weights = ops.concat(taps, axis=0)  # (4, 1, K)
    if bank.kind is FrontendKind.ZERO_PHASE:
        first, second = zero_phase_offsets(K)
        y = ops.conv1d(xb, weights, offset=first)
        reversed_taps = ops.flip(ops.reshape(weights, (N_KERNELS, K)), axis=-1)
        out = ops.depthwise_conv1d(y, reversed_taps, offset=second)
    else:
        out = ops.conv1d(xb, weights)
    return ops.reshape(out, out.shape[1:]) if unbatched else out


@dataclass
class FrontendPass:
    """Saved state of a standalone front-end forward pass."""
    graph: Graph
    x: Tensor
    output: Tensor


@dataclass
class FrontendGradients:
    kernel_grads: List[np.ndarray]
    input_grad: np.ndarray


def run_frontend(x: Tensor, bank: Filterbank) -> FrontendPass:
    x.requires_grad = True
    with Graph() as graph:
        out = frontend_forward(x, bank)
    return FrontendPass(graph, x, out)


def frontend_backward(upstream_grad, saved: Optional[FrontendPass], bank: Filterbank) -> FrontendGradients:
    if saved is None or not saved.graph.produced(saved.output):
        raise GraphError("front-end backward needs the state saved by run_frontend")
    params = bank.parameters()
    for p in params + [saved.x]:
        p.grad = None
    backward_from(saved.graph, saved.output, upstream_grad)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    input_grad = saved.x.grad if saved.x.grad is not None else np.zeros_like(saved.x.data)
    return FrontendGradients(grads, input_grad)


# ---------------------------------------------------------------- initialisation

def _antisymmetric_bandpass(length: int, band_hz, fs: float) -> np.ndarray:
    """Windowed ideal band-pass with an odd (anti-symmetric) impulse response."""
    m = np.arange(length) - (length - 1) / 2
    w1, w2 = (2 * np.pi * b / fs for b in band_hz)
    taps = np.zeros(length)
    nz = m != 0
    taps[nz] = (np.cos(w1 * m[nz]) - np.cos(w2 * m[nz])) / (np.pi * m[nz])
    return taps * sps.windows.hamming(length, sym=True)


def static_band_taps(kind: FrontendKind, length: int, band_hz, fs: float = DEFAULT_SAMPLE_RATE_HZ) -> np.ndarray:
    if kind.antisymmetric:
        return _antisymmetric_bandpass(length, band_hz, fs)
    return sps.firwin(length, list(band_hz), pass_zero=False, fs=fs, window="hamming")


def init_filterbank(
    kind,
    length: int,
    seed: int = 0,
    bands_hz: Sequence[Tuple[float, float]] = DEFAULT_BANDS_HZ,
    sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ,
) -> Filterbank:
    kind = FrontendKind.parse(kind)
    check_parity(kind, length)
    if kind is FrontendKind.GAMMATONE:
        rng = np.random.default_rng(seed)
        f_hz = rng.uniform(10.0, 400.0, N_KERNELS)
        beta_hz = rng.normal(30.0, 6.0, N_KERNELS)
        kernels = []
        for f, b in zip(f_hz, beta_hz):
            params = GammatoneParams(alpha=1e5, eta=4.0, beta=max(b / sample_rate_hz, 1e-6), f=f / sample_rate_hz)
            kernels.append(FrontendKernel.from_gammatone(params, length))
        return Filterbank(kernels)

    if len(bands_hz) != N_KERNELS:
        raise ConfigurationError(f"need {N_KERNELS} initialisation bands, got {len(bands_hz)}")
    return Filterbank([
        FrontendKernel.from_taps(kind, static_band_taps(kind, length, band, sample_rate_hz))
        for band in bands_hz
    ])


def delta_filterbank(kind, length: int) -> Filterbank:
    """Identity kernels; handy for isolating the CNN branches."""
    kind = FrontendKind.parse(kind)
    return Filterbank([FrontendKernel.from_taps(kind, FirCoefficients.delta(length).h) for _ in range(N_KERNELS)])


# ---------------------------------------------------------------- export

def effective_taps(kernel: FrontendKernel) -> FirCoefficients:
    """Impulse response a branch applies; the autocorrelation for ZeroPhase."""
    h = kernel.materialize().h
    if kernel.kind is FrontendKind.ZERO_PHASE:
        return FirCoefficients(np.correlate(h, h, mode="full"))
    return FirCoefficients(h)


def export_kernel(kernel: FrontendKernel, n_fft: int = 1024, sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ) -> Dict:
    taps = kernel.materialize()
    resp = freq_response(taps, n_fft)
    if kernel.kind is FrontendKind.ZERO_PHASE:
        magnitude = resp.magnitude ** 2
        phase = np.zeros_like(magnitude)
        group_delay = np.zeros_like(magnitude)
    else:
        magnitude, phase, group_delay = resp.magnitude, resp.phase_rad, resp.group_delay_samples
    return {
        "kind": kernel.kind.value,
        "K": kernel.length,
        "taps": taps.h.tolist(),
        "params": kernel.describe_params(sample_rate_hz),
        "response": {
            "freq_hz": resp.freq_hz(sample_rate_hz).tolist(),
            "magnitude": magnitude.tolist(),
            "phase_rad": phase.tolist(),
            "group_delay": group_delay.tolist(),
        },
    }


def export_kernels(bank: Filterbank, n_fft: int = 1024, sample_rate_hz: float = DEFAULT_SAMPLE_RATE_HZ) -> List[Dict]:
    return [export_kernel(k, n_fft, sample_rate_hz) for k in bank.kernels]


def write_kernel_export(bank: Filterbank, path: str, n_fft: int = 1024) -> str:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w") as f:
        json.dump(export_kernels(bank, n_fft), f, indent=2)
    return path
