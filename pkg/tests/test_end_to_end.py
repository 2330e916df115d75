import numpy as np
import pytest

from eval.metrics import evaluate
from services.data.synth import MurmurEnvelope, MurmurPhase, MurmurSpec, make_domain_profile, synth_cycle, synth_dataset
from services.model.branched_cnn import BranchedCnn, BranchedCnnConfig
from services.model.gradcam import grad_cam, window_mass
from services.training.train import TrainConfig, train

pytestmark = pytest.mark.slow

# domain 0 dominates the Normal class, as one hospital's recordings often do
TRAIN_COUNTS = {0: (150, 50), 1: (50, 50), 2: (50, 50)}
TEST_COUNTS = (20, 20)


def datasets(seed):
    train_profiles = [make_domain_profile(d, n, a) for d, (n, a) in TRAIN_COUNTS.items()]
    test_profiles = [make_domain_profile(d, *TEST_COUNTS) for d in TRAIN_COUNTS]
    return synth_dataset(train_profiles, seed=seed, workers=4), synth_dataset(test_profiles, seed=seed + 100, workers=4)


def fit(train_cycles, seed, dbt):
    model = BranchedCnn(BranchedCnnConfig(init_seed=seed))
    config = TrainConfig(batch_size=64, epochs=20, lr=3e-3, seed=seed, dbt=dbt)
    model = train(train_cycles, model, config).model
    # both classes predicted, above chance on the training set
    fitted = evaluate(model, train_cycles)
    assert fitted.tp + fitted.fp > 0 and fitted.tn + fitted.fn > 0, fitted
    assert fitted.macc > 0.5, fitted
    return model


@pytest.fixture(scope="module")
def runs():
    out = []
    for seed in range(3):
        train_cycles, test_cycles = datasets(seed)
        out.append({
            "test": test_cycles,
            "dbt": fit(train_cycles, seed, dbt=True),
            "uniform": fit(train_cycles, seed, dbt=False),
        })
    return out


def test_type1_with_dbt_reaches_target(runs):
    report = evaluate(runs[0]["dbt"], runs[0]["test"])
    assert len(report.per_domain_accuracy) == 3
    assert report.macc >= 0.90


def test_dbt_protects_the_weakest_domain(runs):
    with_dbt = np.mean([evaluate(r["dbt"], r["test"]).min_domain_accuracy for r in runs])
    without = np.mean([evaluate(r["uniform"], r["test"]).min_domain_accuracy for r in runs])
    assert with_dbt >= without


def test_grad_cam_concentrates_on_systolic_murmurs(runs):
    model = runs[0]["dbt"]
    domain = make_domain_profile(1, 1, 1)
    hits = 0
    for seed in range(10):
        murmur = MurmurSpec(MurmurPhase.SYSTOLIC, MurmurEnvelope.UNIFORM)
        cycle = synth_cycle("Abnormal", murmur, domain, [999, seed])
        cam = grad_cam(model, cycle)
        assert cam.shape == (2500,) and cam.min() >= 0.0 and cam.max() <= 1.0
        hits += window_mass(cam, cycle.systole_window) > window_mass(cam, cycle.diastole_window)
    assert hits >= 7
