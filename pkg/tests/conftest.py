import numpy as np
import pytest

from advbench.data import CoOccurrenceTables, GenerationConfig, generate_dataset, make_affinity
from advbench.models import ModelConfig, TrainConfig, calibrate_thresholds, init_model, train


@pytest.fixture(scope="session")
def tiny_world():
    """Two briefly trained cnn-small models and two small test sets on distinct structures."""
    train_ds = generate_dataset(GenerationConfig(300, make_affinity("block"), seed=21, prior="skewed"))
    models = {}
    for name, seed in (("a", 0), ("b", 1)):
        m = train(init_model(ModelConfig("cnn-small", seed=seed)), train_ds, TrainConfig(epochs=1, seed=seed))
        m.thresholds = calibrate_thresholds(m, train_ds)
        models[name] = m
    datasets = {
        "block": generate_dataset(GenerationConfig(160, make_affinity("block"), seed=22, prior="skewed")),
        "chain": generate_dataset(GenerationConfig(160, make_affinity("chain"), seed=23, prior="skewed")),
    }
    cooc = {k: CoOccurrenceTables.from_dataset(v).inverse_normalized for k, v in datasets.items()}
    return models, datasets, cooc


@pytest.fixture
def tiny_plan(tiny_world):
    from advbench.harness import AttackSpec, ExperimentPlan

    models, datasets, cooc = tiny_world

    def make(**kw):
        base = dict(
            models=dict(models),
            datasets=dict(datasets),
            cooc=dict(cooc),
            attacks=[AttackSpec("pgd", 2 / 255, 3)],
            sample_count=96,
            batch_size=16,
            grid_steps=3,
            grid_epsilon=2 / 255,
            sweep_epsilons=[1 / 255, 2 / 255],
            sweep_steps=[1, 3],
        )
        base.update(kw)
        return ExperimentPlan(**base)

    return make


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE_RESULTS

    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if passed else 'FAIL'}  {detail}")
