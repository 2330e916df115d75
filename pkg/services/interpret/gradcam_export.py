"""Plot-ready Grad-CAM exports: one CSV per cycle and a JSON summary."""
import json
import logging
import os
from typing import Dict, List, Sequence

import pandas as pd

from ..data.cycles import CardiacCycle
from ..errors import DataError
from ..model.branched_cnn import BranchedCnn
from ..model.gradcam import grad_cam, window_mass

logger = logging.getLogger(__name__)


def export_gradcam_batch(model: BranchedCnn, cycles: Sequence[CardiacCycle], out_dir: str) -> List[str]:
    """CSV columns: sample_index, waveform, cam_value. Returns the written paths, summary last."""
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out_dir}: {e}") from e

    probs = model.predict_proba(list(cycles)) if cycles else []
    paths, summary = [], []
    for i, (cycle, p) in enumerate(zip(cycles, probs)):
        cam = grad_cam(model, cycle)
        path = os.path.join(out_dir, f"gradcam_{i:03d}_{cycle.recording_id}.csv")
        frame = pd.DataFrame({"sample_index": range(cam.size), "waveform": cycle.samples, "cam_value": cam})
        try:
            frame.to_csv(path, index=False, float_format="%.17g")
        except OSError as e:
            raise DataError(f"cannot write {path}: {e}") from e
        paths.append(path)
        summary.append(_summary_row(cycle, p, cam, path))

    summary_path = os.path.join(out_dir, "gradcam_summary.json")
    try:
        with open(summary_path, "w") as f:
            json.dump(summary, f, indent=2)
    except OSError as e:
        raise DataError(f"cannot write {summary_path}: {e}") from e
    logger.info("Wrote %d Grad-CAM exports to %s", len(paths), out_dir)
    return paths + [summary_path]


def _summary_row(cycle: CardiacCycle, p, cam, path: str) -> Dict:
    return {
        "file": os.path.basename(path),
        "recording_id": cycle.recording_id,
        "domain": cycle.domain_id,
        "label": cycle.label.value,
        "p_normal": float(p[0]),
        "p_abnormal": float(p[1]),
        "systole_mass": window_mass(cam, cycle.systole_window),
        "diastole_mass": window_mass(cam, cycle.diastole_window),
    }
