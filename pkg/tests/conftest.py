import time

import numpy as np
import pytest

from ctsar import tensor
from ctsar.data import generate_synthetic_dataset, load_dataset, load_images
from ctsar.layers import build_ctsar_cnn
from ctsar.training import TrainConfig, evaluate, train

OVERFIT_SEEDS = range(10)
OVERFIT_SIZE = 112
OVERFIT_WIDTH = 0.25
OVERFIT_MAX_STEPS = 200


@pytest.fixture(autouse=True, scope="session")
def _check_finite():
    tensor.set_check_finite(True)
    yield
    tensor.set_check_finite(False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def synthetic_root(tmp_path_factory):
    return generate_synthetic_dataset(8, 0, tmp_path_factory.mktemp("synthetic"))


@pytest.fixture(scope="session")
def synthetic_images(synthetic_root):
    manifest = load_dataset(synthetic_root)
    return load_images(manifest.entries, OVERFIT_SIZE)


@pytest.fixture(scope="session")
def overfit_runs(synthetic_images):
    """Ten seeded overfit runs on 32 synthetic images (8 per class).

    Each run stops once the whole training set is classified correctly,
    but never before step 10 so the early loss curve is always recorded.
    Returns the per-seed records and the wall time of the whole sweep.
    """
    images, labels = synthetic_images
    start = time.perf_counter()
    runs = []
    for seed in OVERFIT_SEEDS:
        model = build_ctsar_cnn(seed, OVERFIT_WIDTH)
        cfg = TrainConfig(learning_rate=0.001, batch_size=8, epochs=OVERFIT_MAX_STEPS, seed=seed)
        reached = {"step": None}

        def done(rec, steps, model=model, reached=reached):
            if rec.train_acc == 1.0 and evaluate(model, images, labels).accuracy == 1.0:
                reached["step"] = reached["step"] or steps
            return reached["step"] is not None and steps >= 10

        result = train(model, images, labels, cfg, max_steps=OVERFIT_MAX_STEPS, on_epoch_end=done)
        final_acc = evaluate(model, images, labels).accuracy
        runs.append({"seed": seed, "steps_to_fit": reached["step"], "final_acc": final_acc,
                     "step_losses": result.step_losses})
    return {"runs": runs, "seconds": time.perf_counter() - start}


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
