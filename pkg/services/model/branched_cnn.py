"""Branched CNN: learnable filterbank, four conv branches, MLP head, recording-level fusion.

Shape trace for the default config, batch B:

    (B, 1, 2500) -> front-end (B, 4, 2500)
    each band: conv5x8 -> bn -> relu -> dropout -> pool2   (B, 8, 1250)
               conv5x4 -> bn -> relu -> dropout -> pool2   (B, 4, 625)
    concat (B, 16, 625) -> flatten 10000 -> dense 20 + relu -> dense 2
"""
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from ..autodiff import ops
from ..autodiff.tensor import Tensor
from ..data.cycles import CYCLE_LEN, CardiacCycle, Label
from ..errors import ConfigurationError, ShapeError
from ..frontend.filterbank import N_KERNELS, Filterbank, frontend_forward, init_filterbank
from ..frontend.kernels import FrontendKind, check_parity

POSTERIOR_TOLERANCE = 1e-9


class BranchedCnnConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    frontend_kind: FrontendKind = FrontendKind.TYPE_I
    frontend_K: int = 61
    branch_conv_kernel: int = 5
    branch_channels: Tuple[int, int] = (8, 4)
    dropout_p: float = 0.5
    hidden_units: int = 20
    classes: int = 2
    input_len: int = CYCLE_LEN
    sample_rate_hz: float = 1000.0
    freeze_frontend: bool = False
    fusion_threshold: float = 0.5
    bn_momentum: float = 0.99
    init_seed: int = 0

    @field_validator("frontend_kind", mode="before")
    @classmethod
    def _parse_kind(cls, v):
        return FrontendKind.parse(v)

    @model_validator(mode="after")
    def _check(self):
        check_parity(self.frontend_kind, self.frontend_K)
        if self.branch_conv_kernel < 1 or min(self.branch_channels) < 1 or self.hidden_units < 1:
            raise ValueError("kernel size, channel counts and hidden units must be positive")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.classes != 2:
            raise ValueError("the classifier is binary (Normal / Abnormal)")
        if self.input_len % 4 != 0:
            raise ValueError(f"input_len must be divisible by 4 for the two pooling stages, got {self.input_len}")
        if not 0.0 < self.fusion_threshold < 1.0:
            raise ValueError("fusion_threshold must be in (0, 1)")
        return self

    @classmethod
    def build(cls, **values) -> "BranchedCnnConfig":
        """Construct, reporting invalid values as a ConfigurationError."""
        try:
            return cls(**values)
        except ValidationError as e:
            raise ConfigurationError(_validation_message(e)) from None

    @property
    def flat_features(self) -> int:
        return N_KERNELS * self.branch_channels[1] * (self.input_len // 4)


def _validation_message(error: ValidationError) -> str:
    parts = []
    for item in error.errors():
        where = ".".join(str(p) for p in item["loc"]) or "config"
        parts.append(f"{where}: {item['msg']}")
    return "; ".join(parts)


@dataclass(frozen=True)
class Posterior:
    p_normal: float
    p_abnormal: float

    def __post_init__(self):
        for v in (self.p_normal, self.p_abnormal):
            if not -POSTERIOR_TOLERANCE <= v <= 1 + POSTERIOR_TOLERANCE:
                raise ShapeError(f"posterior probabilities must be in [0, 1], got {v}")
        if abs(self.p_normal + self.p_abnormal - 1.0) > POSTERIOR_TOLERANCE:
            raise ShapeError(f"posterior must sum to 1, got {self.p_normal} + {self.p_abnormal}")

    @classmethod
    def from_probs(cls, probs) -> "Posterior":
        return cls(float(probs[0]), float(probs[1]))

    def label(self, threshold: float = 0.5) -> Label:
        return Label.ABNORMAL if self.p_abnormal >= threshold else Label.NORMAL


def fuse_recording(posteriors: Sequence[Posterior], threshold: float = 0.5) -> Tuple[Posterior, Label]:
    """Mean of per-cycle posteriors; a tie at the threshold counts as Abnormal."""
    if not posteriors:
        raise ShapeError("cannot fuse an empty list of posteriors")
    p_abnormal = float(np.mean([p.p_abnormal for p in posteriors]))
    fused = Posterior(1.0 - p_abnormal, p_abnormal)
    return fused, fused.label(threshold)


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape)


class BranchedCnn:
    def __init__(self, config: Optional[BranchedCnnConfig] = None, filterbank: Optional[Filterbank] = None):
        self.config = config or BranchedCnnConfig()
        cfg = self.config
        rng = np.random.default_rng(cfg.init_seed)
        self.frontend = filterbank or init_filterbank(cfg.frontend_kind, cfg.frontend_K, seed=cfg.init_seed)
        if self.frontend.kind is not cfg.frontend_kind or self.frontend.length != cfg.frontend_K:
            raise ConfigurationError("filterbank does not match the model config")
        for p in self.frontend.parameters():
            p.requires_grad = not cfg.freeze_frontend

        k = cfg.branch_conv_kernel
        c1, c2 = cfg.branch_channels
        self.branches: List[Dict[str, Tensor]] = []
        self.bn_states: List[Tuple[ops.BatchNormState, ops.BatchNormState]] = []
        for b in range(N_KERNELS):
            self.branches.append({
                "conv1.weight": Tensor(_glorot(rng, (c1, 1, k), k, c1 * k), True, f"branch{b}.conv1.weight"),
                "conv1.bias": Tensor(np.zeros(c1), True, f"branch{b}.conv1.bias"),
                "bn1.gamma": Tensor(np.ones(c1), True, f"branch{b}.bn1.gamma"),
                "bn1.beta": Tensor(np.zeros(c1), True, f"branch{b}.bn1.beta"),
                "conv2.weight": Tensor(_glorot(rng, (c2, c1, k), c1 * k, c2 * k), True, f"branch{b}.conv2.weight"),
                "conv2.bias": Tensor(np.zeros(c2), True, f"branch{b}.conv2.bias"),
                "bn2.gamma": Tensor(np.ones(c2), True, f"branch{b}.bn2.gamma"),
                "bn2.beta": Tensor(np.zeros(c2), True, f"branch{b}.bn2.beta"),
            })
            self.bn_states.append((
                ops.BatchNormState(c1, momentum=cfg.bn_momentum),
                ops.BatchNormState(c2, momentum=cfg.bn_momentum),
            ))
        flat, hidden = cfg.flat_features, cfg.hidden_units
        self.head = {
            "dense1.weight": Tensor(_glorot(rng, (hidden, flat), flat, hidden), True, "dense1.weight"),
            "dense1.bias": Tensor(np.zeros(hidden), True, "dense1.bias"),
            # zero output layer: an untrained model predicts exactly 0.5 / 0.5
            "dense2.weight": Tensor(np.zeros((cfg.classes, hidden)), True, "dense2.weight"),
            "dense2.bias": Tensor(np.zeros(cfg.classes), True, "dense2.bias"),
        }
        self.training = False
        self._recalibrating = False
        self.set_dropout_seed(cfg.init_seed)

    # ------------------------------------------------------------ parameters

    def named_parameters(self) -> Dict[str, Tensor]:
        named = {f"frontend.k{i}.params": k.params for i, k in enumerate(self.frontend.kernels)}
        for b, branch in enumerate(self.branches):
            named.update({f"branch{b}.{name}": t for name, t in branch.items()})
        named.update(self.head)
        return named

    def trainable_parameters(self) -> List[Tensor]:
        return [t for name, t in self.named_parameters().items()
                if not (self.config.freeze_frontend and name.startswith("frontend."))]

    def parameter_count(self) -> int:
        return sum(t.size for t in self.named_parameters().values())

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for b, states in enumerate(self.bn_states):
            for layer, state in zip(("bn1", "bn2"), states):
                out[f"branch{b}.{layer}.running_mean"] = state.running_mean
                out[f"branch{b}.{layer}.running_var"] = state.running_var
        return out

    def state_dict(self) -> Dict[str, Dict[str, np.ndarray]]:
        return {
            "parameters": {name: t.data.copy() for name, t in self.named_parameters().items()},
            "buffers": {name: v.copy() for name, v in self.buffers().items()},
        }

    def load_state_dict(self, state: Dict[str, Dict[str, np.ndarray]]) -> None:
        params = self.named_parameters()
        given = state.get("parameters", {})
        if set(given) != set(params):
            missing = sorted(set(params) - set(given))
            extra = sorted(set(given) - set(params))
            raise ConfigurationError(f"parameter names do not match the model: missing {missing}, unexpected {extra}")
        for name, t in params.items():
            value = np.asarray(given[name], dtype=np.float64)
            if value.shape != t.shape:
                raise ConfigurationError(f"{name}: checkpoint shape {value.shape} != model shape {t.shape}")
            t.data[...] = value
        buffers = state.get("buffers", {})
        for b, states in enumerate(self.bn_states):
            for layer, bn in zip(("bn1", "bn2"), states):
                key = f"branch{b}.{layer}"
                try:
                    bn.running_mean = np.asarray(buffers[f"{key}.running_mean"], dtype=np.float64).reshape(bn.channels)
                    bn.running_var = np.asarray(buffers[f"{key}.running_var"], dtype=np.float64).reshape(bn.channels)
                except (KeyError, ValueError) as e:
                    raise ConfigurationError(f"checkpoint buffers for {key} are missing or malformed") from e

    # ------------------------------------------------------------ modes

    def train(self) -> "BranchedCnn":
        self.training = True
        return self

    def eval(self) -> "BranchedCnn":
        self.training = False
        return self

    def set_dropout_seed(self, seed) -> None:
        self._dropout_rng = np.random.default_rng([int(seed), 1] if np.isscalar(seed) else seed)

    def after_step(self) -> None:
        self.frontend.clamp()

    def refresh_batchnorm_stats(self, samples: Union[np.ndarray, Sequence[CardiacCycle]], batch_size: int = 64) -> None:
        """Replace every running mean/variance with the size-weighted average of
        train-mode batch statistics over ``samples``; dropout stays off."""
        x = _as_batch(samples, self.config.input_len)
        states = [s for pair in self.bn_states for s in pair]
        momenta = [s.momentum for s in states]
        was_training = self.training
        self.training, self._recalibrating = True, True
        seen = 0
        try:
            for start in range(0, x.shape[0], batch_size):
                chunk = x[start:start + batch_size]
                for s in states:
                    s.momentum = seen / (seen + len(chunk))
                self.logits(Tensor(chunk[:, None, :]))
                seen += len(chunk)
        finally:
            for s, m in zip(states, momenta):
                s.momentum = m
            self.training, self._recalibrating = was_training, False

    # ------------------------------------------------------------ forward

    def _branch(self, x: Tensor, b: int) -> Tensor:
        p = self.branches[b]
        bn1, bn2 = self.bn_states[b]
        rate = 0.0 if self._recalibrating else self.config.dropout_p
        rng, training = self._dropout_rng, self.training
        y = ops.add_bias(ops.conv1d(x, p["conv1.weight"]), p["conv1.bias"])
        y = ops.relu(ops.batchnorm(y, p["bn1.gamma"], p["bn1.beta"], bn1, training))
        y = ops.maxpool1d(ops.dropout(y, rate, rng, training), 2)
        y = ops.add_bias(ops.conv1d(y, p["conv2.weight"]), p["conv2.bias"])
        y = ops.relu(ops.batchnorm(y, p["bn2.gamma"], p["bn2.beta"], bn2, training))
        return ops.maxpool1d(ops.dropout(y, rate, rng, training), 2)

    def forward_features(self, x: Tensor) -> Tuple[Tensor, Tensor]:
        """(B, 1, N) input to the concatenated branch activations (B, 16, N/4) and the logits (B, 2)."""
        if x.ndim != 3 or x.shape[1] != 1 or x.shape[2] != self.config.input_len:
            raise ShapeError(f"expected input of shape (B, 1, {self.config.input_len}), got {x.shape}")
        bands = frontend_forward(x, self.frontend)
        features = ops.concat([self._branch(ops.channel_slice(bands, b, b + 1), b) for b in range(N_KERNELS)], axis=1)
        hidden = ops.relu(ops.dense(ops.flatten(features), self.head["dense1.weight"], self.head["dense1.bias"]))
        logits = ops.dense(hidden, self.head["dense2.weight"], self.head["dense2.bias"])
        return features, logits

    def logits(self, x: Tensor) -> Tensor:
        return self.forward_features(x)[1]

    def predict_proba(self, samples: Union[np.ndarray, Sequence[CardiacCycle]], batch_size: int = 64) -> np.ndarray:
        """Softmax posteriors (n, 2) in eval mode, without recording any graph."""
        x = _as_batch(samples, self.config.input_len)
        was_training = self.training
        self.eval()
        try:
            out = [
                ops.softmax(self.logits(Tensor(x[i:i + batch_size, None, :]))).data
                for i in range(0, x.shape[0], batch_size)
            ]
        finally:
            self.training = was_training
        return np.concatenate(out) if out else np.zeros((0, self.config.classes))

    def forward(self, cycle) -> Posterior:
        return Posterior.from_probs(self.predict_proba(_as_batch(cycle, self.config.input_len))[0])

    def __repr__(self):
        cfg = self.config
        return f"BranchedCnn(frontend={cfg.frontend_kind.value}, K={cfg.frontend_K}, params={self.parameter_count()})"


def _as_batch(samples, length: int) -> np.ndarray:
    if isinstance(samples, CardiacCycle):
        samples = [samples]
    if isinstance(samples, Tensor):
        samples = samples.data
    if isinstance(samples, (list, tuple)) and samples and isinstance(samples[0], CardiacCycle):
        samples = [c.samples for c in samples]
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim == 1:
        x = x[None]
    if x.ndim == 3 and x.shape[1] == 1:
        x = x[:, 0]
    if x.ndim != 2 or x.shape[1] != length:
        raise ShapeError(f"expected cycles of {length} samples, got shape {x.shape}")
    return x
