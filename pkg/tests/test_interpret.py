import json
import os

import numpy as np
import pandas as pd
import pytest

from services.data.synth import (
    MurmurEnvelope,
    MurmurPhase,
    MurmurSpec,
    make_domain_profile,
    synth_cycle,
    synth_dataset,
)
from services.errors import ConfigurationError
from services.frontend.filterbank import init_filterbank
from services.frontend.kernels import GAMMATONE_BOUNDS
from services.interpret.gradcam_export import export_gradcam_batch
from services.interpret.snapshots import (
    SnapshotRecorder,
    gammatone_param_trace,
    load_snapshot,
    load_snapshots,
    save_snapshot,
    snapshot_filters,
)
from services.model.branched_cnn import BranchedCnn, BranchedCnnConfig
from services.training.train import TrainConfig, train


def model_for(kind, K=61, **overrides):
    return BranchedCnn(BranchedCnnConfig.build(frontend_kind=kind, frontend_K=K, **overrides))


@pytest.mark.parametrize("kind,K", [("type1", 61), ("type2", 60), ("type4", 60), ("zerophase", 31)])
def test_linear_phase_front_ends_have_tiny_residuals(kind, K):
    snap = snapshot_filters(model_for(kind, K), epoch=0)
    assert len(snap.residuals) == 4
    assert snap.max_residual < 1e-6


def test_symmetric_free_kernels_start_linear_phase():
    config = BranchedCnnConfig.build(frontend_kind="free", frontend_K=61)
    model = BranchedCnn(config, filterbank=init_filterbank("free", 61))
    assert snapshot_filters(model, epoch=0).max_residual < 1e-6


def test_snapshot_round_trip(tmp_path):
    snap = snapshot_filters(model_for("type3"), epoch=12)
    path = save_snapshot(snap, str(tmp_path))
    assert os.path.basename(path) == "snapshot_epoch_0012.json"
    loaded = load_snapshot(path)
    assert loaded.epoch == 12 and loaded.kind == "type3"
    assert loaded.residuals == snap.residuals
    assert loaded.kernels[0]["taps"] == snap.kernels[0]["taps"]


def test_recorder_schedule(tmp_path):
    model = model_for("type1", 9)
    recorder = SnapshotRecorder(str(tmp_path), every=2, final_epoch=5)
    for epoch in range(6):
        recorder(epoch, model)
    assert [s.epoch for s in recorder.snapshots] == [0, 2, 4, 5]
    assert [s.epoch for s in load_snapshots(str(tmp_path))] == [0, 2, 4, 5]


def test_gammatone_trace_starts_at_init_values():
    model = model_for("gammatone", init_seed=3)
    trace = gammatone_param_trace([snapshot_filters(model, 0), snapshot_filters(model, 10)])
    assert list(trace.columns) == ["epoch", "kernel", "alpha", "eta", "beta_hz", "f_hz"]
    assert len(trace) == 8
    assert (trace["alpha"] == 1e5).all() and (trace["eta"] == 4.0).all()
    assert trace["f_hz"].between(10, 400).all()
    with pytest.raises(ConfigurationError):
        gammatone_param_trace([snapshot_filters(model_for("type1", 9), 0)])


def test_gradcam_export(tmp_path):
    model = model_for("type1")
    model.head["dense2.weight"].data[:] = np.random.default_rng(0).standard_normal((2, 20))
    domain = make_domain_profile(0, 1, 1)
    murmur = MurmurSpec(MurmurPhase.SYSTOLIC, MurmurEnvelope.UNIFORM)
    cycles = [synth_cycle("Abnormal", murmur, domain, seed, recording_id=f"r{seed}") for seed in range(3)]
    paths = export_gradcam_batch(model, cycles, str(tmp_path))
    assert len(paths) == 4 and paths[-1].endswith("gradcam_summary.json")
    for cycle, path in zip(cycles, paths[:3]):
        frame = pd.read_csv(path, float_precision="round_trip")
        assert list(frame.columns) == ["sample_index", "waveform", "cam_value"]
        assert len(frame) == 2500
        assert np.array_equal(frame["waveform"].to_numpy(), cycle.samples)
        assert frame["cam_value"].between(0, 1).all()
    summary = json.load(open(paths[-1]))
    assert [row["recording_id"] for row in summary] == ["r0", "r1", "r2"]
    assert all(row["systole_mass"] >= 0 and row["diastole_mass"] >= 0 for row in summary)


@pytest.fixture(scope="module")
def tiny_training_set():
    return synth_dataset([make_domain_profile(0, 4, 4), make_domain_profile(1, 4, 4)], seed=7)


def test_gammatone_parameters_stay_in_bounds_through_training(tiny_training_set, tmp_path):
    model = model_for("gammatone", 31, init_seed=5)
    recorder = SnapshotRecorder(str(tmp_path), every=1, final_epoch=3)
    train(tiny_training_set, model, TrainConfig(batch_size=8, epochs=3, iterations_per_epoch=3, lr=1e-2),
          on_epoch_end=recorder)
    for kernel in model.frontend.kernels:
        params = kernel.gammatone_params()
        for name, (low, high) in GAMMATONE_BOUNDS.items():
            assert low <= getattr(params, name) <= high
    trace = gammatone_param_trace(recorder.snapshots)
    assert sorted(trace["epoch"].unique()) == [0, 1, 2, 3]
    assert ((trace["f_hz"] > 0) & (trace["f_hz"] < 500)).all()
    assert (trace["eta"] >= 1.01).all() and (trace["alpha"] > 0).all() and (trace["beta_hz"] > 0).all()
    final, initial = (trace[trace["epoch"] == e]["f_hz"].to_numpy() for e in (3, 0))
    assert not np.allclose(final, initial)


def test_zero_phase_stays_zero_phase_through_training(tiny_training_set):
    model = model_for("zerophase", 31, init_seed=6)
    before = [k.params.data.copy() for k in model.frontend.kernels]
    train(tiny_training_set, model, TrainConfig(batch_size=8, epochs=3, iterations_per_epoch=3, lr=1e-2))
    assert any(not np.array_equal(b, k.params.data) for b, k in zip(before, model.frontend.kernels))
    assert snapshot_filters(model, epoch=3).max_residual < 1e-6
