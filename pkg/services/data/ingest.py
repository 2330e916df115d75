"""Load annotated PCG recordings from WAV + CSV, and write datasets in the same layout.

Layout of a dataset directory::

    <dir>/<recording_id>.wav   mono PCM16 or float32 WAV, any sample rate
    <dir>/labels.csv           recording_id,label,domain
    <dir>/cycles.csv           recording_id,cycle_start_ms[,systole_start_ms,...]

Window columns are optional and relative to the cycle start.
"""
import argparse
import logging
import os
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.io import wavfile

from ..dsp.fir import Signal
from ..dsp.spectral import resample
from ..errors import DataError
from ..observability.langfuse_client import observe
from .cycles import CYCLE_LEN, SAMPLE_RATE_HZ, CardiacCycle, Label, fit_length, group_by_recording

logger = logging.getLogger(__name__)

LABELS_FILE = "labels.csv"
CYCLES_FILE = "cycles.csv"
WINDOW_COLUMNS = ("systole_start_ms", "systole_end_ms", "diastole_start_ms", "diastole_end_ms")


def read_wav(path: str) -> Signal:
    if not os.path.exists(path):
        raise DataError(f"audio file not found: {path}")
    try:
        rate, data = wavfile.read(path)
    except ValueError as e:
        raise DataError(f"{path}: unreadable WAV ({e})") from e
    if data.ndim > 1:
        if data.shape[1] != 1:
            raise DataError(f"{path}: expected mono audio, got {data.shape[1]} channels")
        data = data[:, 0]
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise DataError(f"{path}: unsupported sample format {data.dtype}; use 16-bit PCM or 32-bit float")
    return Signal(samples, float(rate))


def _read_csv(path: str, required: Sequence[str]) -> pd.DataFrame:
    if not os.path.exists(path):
        raise DataError(f"annotation file not found: {path}")
    df = pd.read_csv(path, dtype={"recording_id": str})
    missing = [c for c in required if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {', '.join(missing)}")
    return df


def _window(row, start_col: str, end_col: str):
    if start_col not in row or end_col not in row or pd.isna(row[start_col]) or pd.isna(row[end_col]):
        return None
    return int(round(row[start_col])), int(round(row[end_col]))


@observe(name="load_recordings")
def load_recordings(
    audio_dir: str,
    labels_file: Optional[str] = None,
    cycles_file: Optional[str] = None,
    target_hz: float = SAMPLE_RATE_HZ,
) -> List[CardiacCycle]:
    """Cut every annotated cycle out of its recording, resampled to 1 kHz and fit to 2500 samples."""
    labels_file = labels_file or os.path.join(audio_dir, LABELS_FILE)
    cycles_file = cycles_file or os.path.join(audio_dir, CYCLES_FILE)
    labels = _read_csv(labels_file, ("recording_id", "label", "domain"))
    annotations = _read_csv(cycles_file, ("recording_id", "cycle_start_ms"))

    meta: Dict[str, tuple] = {}
    for _, row in labels.iterrows():
        meta[row["recording_id"]] = (Label.parse(row["label"]), int(row["domain"]))

    audio: Dict[str, Signal] = {}
    cycles = []
    for i, row in annotations.iterrows():
        rec_id = row["recording_id"]
        where = f"{cycles_file} row {i + 2} (recording {rec_id!r})"
        if rec_id not in meta:
            raise DataError(f"{where}: recording id not found in {labels_file}")
        if rec_id not in audio:
            audio[rec_id] = resample(read_wav(os.path.join(audio_dir, f"{rec_id}.wav")), target_hz)
        samples = audio[rec_id].samples
        start = int(round(float(row["cycle_start_ms"]) * target_hz / 1000.0))
        if start < 0 or start >= samples.size:
            raise DataError(f"{where}: cycle_start_ms {row['cycle_start_ms']} is beyond the end of the recording")
        label, domain = meta[rec_id]
        try:
            cycle = CardiacCycle(
                samples=fit_length(samples[start:start + CYCLE_LEN]),
                label=label,
                domain_id=domain,
                recording_id=rec_id,
                systole_window=_window(row, *WINDOW_COLUMNS[:2]),
                diastole_window=_window(row, *WINDOW_COLUMNS[2:]),
            )
        except DataError as e:
            raise DataError(f"{where}: {e}") from e
        cycles.append(cycle)

    if not cycles:
        raise DataError(f"no cycles annotated in {cycles_file}")
    logger.info("Loaded %d cycles from %d recordings in %s", len(cycles), len(audio), audio_dir)
    return cycles


def export_dataset(cycles: Sequence[CardiacCycle], out_dir: str) -> Dict[str, str]:
    """One float32 WAV per recording (cycles back to back) plus labels.csv and cycles.csv."""
    if not cycles:
        raise DataError("nothing to export")
    try:
        os.makedirs(out_dir, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create {out_dir}: {e}") from e

    label_rows, cycle_rows = [], []
    for rec_id, group in group_by_recording(cycles).items():
        audio = np.concatenate([c.samples for c in group]).astype(np.float32)
        path = os.path.join(out_dir, f"{rec_id}.wav")
        try:
            wavfile.write(path, int(SAMPLE_RATE_HZ), audio)
        except OSError as e:
            raise DataError(f"cannot write {path}: {e}") from e
        label_rows.append({"recording_id": rec_id, "label": group[0].label.value, "domain": group[0].domain_id})
        for k, c in enumerate(group):
            row = {"recording_id": rec_id, "cycle_start_ms": k * CYCLE_LEN}
            s = c.systole_window or (None, None)
            d = c.diastole_window or (None, None)
            row.update(zip(WINDOW_COLUMNS, (*s, *d)))
            cycle_rows.append(row)

    paths = {"labels": os.path.join(out_dir, LABELS_FILE), "cycles": os.path.join(out_dir, CYCLES_FILE)}
    pd.DataFrame(label_rows).to_csv(paths["labels"], index=False)
    cycles_df = pd.DataFrame(cycle_rows)
    for col in WINDOW_COLUMNS:
        cycles_df[col] = pd.to_numeric(cycles_df[col]).astype("Int64")
    cycles_df.to_csv(paths["cycles"], index=False)
    logger.info("Exported %d cycles (%d recordings) to %s", len(cycles), len(label_rows), out_dir)
    return paths


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Summarise an annotated PCG dataset directory")
    parser.add_argument("--data", required=True)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO)
    loaded = load_recordings(args.data)
    summary = pd.DataFrame([{"domain": c.domain_id, "label": c.label.value} for c in loaded])
    print(summary.value_counts().sort_index().to_string())
