"""Gradient-weighted class activation maps over the concatenated branch activations."""
import numpy as np

from ..autodiff.tensor import Graph, Tensor, backward_from
from ..data.cycles import CardiacCycle
from ..dsp.fir import FirCoefficients, Signal, centered_conv
from ..dsp.spectral import blackman_window
from ..errors import ShapeError
from ..observability.langfuse_client import observe
from .branched_cnn import BranchedCnn, _as_batch

SMOOTHING_LEN = 51
FLAT_TOLERANCE = 1e-12


def _smooth(cam: np.ndarray, fs: float) -> np.ndarray:
    window = blackman_window(SMOOTHING_LEN)
    return centered_conv(Signal(cam, fs), FirCoefficients(window / window.sum())).samples


@observe(name="grad_cam")
def grad_cam(model: BranchedCnn, cycle, target_class: int = None) -> np.ndarray:
    """CAM in [0, 1] with one value per input sample.

    Channels of the (16, N/4) activation are weighted by the mean gradient of the
    target logit, summed, rectified, repeated x4, Blackman-smoothed and min-max scaled.
    A flat map (for instance, all gradients zero) comes back as zeros.
    """
    if target_class is None:
        if not isinstance(cycle, CardiacCycle):
            raise ShapeError("target_class is required unless a labelled CardiacCycle is given")
        target_class = cycle.label.index
    if not 0 <= target_class < model.config.classes:
        raise ShapeError(f"target_class {target_class} outside [0, {model.config.classes})")
    x = Tensor(_as_batch(cycle, model.config.input_len)[:1, None, :])

    params = list(model.named_parameters().values())
    saved = [(p.grad, p.requires_grad) for p in params]
    was_training = model.training
    model.eval()
    try:
        for p in params:
            p.requires_grad = True
            p.grad = None
        with Graph() as graph:
            features, logits = model.forward_features(x)
        upstream = np.zeros(logits.shape)
        upstream[0, target_class] = 1.0
        backward_from(graph, logits, upstream)
        grads = features.grad if features.grad is not None else np.zeros(features.shape)
    finally:
        model.training = was_training
        for p, (grad, req) in zip(params, saved):
            p.grad, p.requires_grad = grad, req

    activation, grad = features.data[0], grads[0]
    weights = grad.mean(axis=1)
    cam = np.maximum(weights @ activation, 0.0)
    factor = model.config.input_len // cam.size
    cam = _smooth(np.repeat(cam, factor), model.config.sample_rate_hz)
    lo, hi = cam.min(), cam.max()
    if hi - lo < FLAT_TOLERANCE:
        return np.zeros_like(cam)
    return np.clip((cam - lo) / (hi - lo), 0.0, 1.0)


def window_mass(cam: np.ndarray, window) -> float:
    if window is None:
        return 0.0
    return float(np.sum(cam[window[0]:window[1]]))
