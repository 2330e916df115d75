"""Front-end filter snapshots over a training run, and the phase audit they carry."""
import json
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import pandas as pd

from ..dsp.fir import freq_response, phase_linearity_residual
from ..errors import ConfigurationError, DataError
from ..frontend.filterbank import effective_taps, export_kernels
from ..frontend.kernels import FrontendKind
from ..model.branched_cnn import BranchedCnn

logger = logging.getLogger(__name__)

SNAPSHOT_PATTERN = "snapshot_epoch_{:04d}.json"


@dataclass(frozen=True)
class FilterSnapshot:
    epoch: int
    kind: str
    kernels: List[Dict]
    residuals: List[float] = field(default_factory=list)

    def __post_init__(self):
        if any(r < 0 for r in self.residuals):
            raise DataError("phase residuals are non-negative")

    @property
    def max_residual(self) -> float:
        return max(self.residuals) if self.residuals else 0.0

    def to_dict(self) -> Dict:
        return {"epoch": self.epoch, "kind": self.kind, "residuals": self.residuals, "kernels": self.kernels}

    @classmethod
    def from_dict(cls, data: Dict) -> "FilterSnapshot":
        return cls(int(data["epoch"]), data["kind"], list(data["kernels"]), [float(r) for r in data["residuals"]])


def snapshot_filters(model: BranchedCnn, epoch: int, n_fft: int = 1024) -> FilterSnapshot:
    """Exported kernels plus the linear-phase fit residual of each branch's effective response."""
    bank = model.frontend
    kernels = export_kernels(bank, n_fft, model.config.sample_rate_hz)
    residuals = []
    for kernel in bank.kernels:
        taps = effective_taps(kernel)
        residuals.append(phase_linearity_residual(freq_response(taps, max(n_fft, 2 * len(taps)))))
    return FilterSnapshot(epoch, bank.kind.value, kernels, residuals)


def save_snapshot(snapshot: FilterSnapshot, out_dir: str) -> str:
    path = os.path.join(out_dir, SNAPSHOT_PATTERN.format(snapshot.epoch))
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(path, "w") as f:
            json.dump(snapshot.to_dict(), f)
    except OSError as e:
        raise DataError(f"cannot write snapshot {path}: {e}") from e
    return path


def load_snapshot(path: str) -> FilterSnapshot:
    try:
        with open(path) as f:
            return FilterSnapshot.from_dict(json.load(f))
    except (OSError, KeyError, json.JSONDecodeError) as e:
        raise DataError(f"cannot read snapshot {path}: {e}") from e


def load_snapshots(directory: str) -> List[FilterSnapshot]:
    names = sorted(n for n in os.listdir(directory) if n.startswith("snapshot_epoch_") and n.endswith(".json"))
    return [load_snapshot(os.path.join(directory, n)) for n in names]


class SnapshotRecorder:
    """``on_epoch_end`` hook: snapshots at epoch 0, every ``every`` epochs and the final epoch."""

    def __init__(self, out_dir: str = None, every: int = 10, final_epoch: int = None):
        self.out_dir, self.every, self.final_epoch = out_dir, every, final_epoch
        self.snapshots: List[FilterSnapshot] = []

    def __call__(self, epoch: int, model: BranchedCnn, record=None) -> None:
        if epoch % self.every and epoch != self.final_epoch:
            return
        if self.snapshots and epoch <= self.snapshots[-1].epoch:
            return
        snap = snapshot_filters(model, epoch)
        self.snapshots.append(snap)
        if self.out_dir:
            save_snapshot(snap, self.out_dir)
        logger.debug("snapshot at epoch %d, max phase residual %.3g", epoch, snap.max_residual)


def gammatone_param_trace(snapshots: Sequence[FilterSnapshot]) -> pd.DataFrame:
    """Long table (epoch, kernel, alpha, eta, beta_hz, f_hz), one row per kernel per snapshot."""
    rows = []
    for snap in snapshots:
        if FrontendKind.parse(snap.kind) is not FrontendKind.GAMMATONE:
            raise ConfigurationError(f"snapshot at epoch {snap.epoch} is a {snap.kind} front-end, not gammatone")
        for i, kernel in enumerate(snap.kernels):
            p = kernel["params"]
            rows.append({
                "epoch": snap.epoch, "kernel": i,
                "alpha": p["alpha"], "eta": p["eta"], "beta_hz": p["beta_hz"], "f_hz": p["f_hz"],
            })
    return pd.DataFrame(rows, columns=["epoch", "kernel", "alpha", "eta", "beta_hz", "f_hz"])
