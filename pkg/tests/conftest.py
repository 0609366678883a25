import dataclasses
import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make `oracles` importable

from segforge.train import run_preset, train


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    """The desk-preset overfit run shared by training and acceptance tests.

    Trains the tiny model on 4 synthetic cases for 30 epochs with
    validation-on-train, exactly once per test session.
    """
    cfg = run_preset("desk")
    cfg = dataclasses.replace(cfg, seed=1, val_on_train=True,
                              output_dir=str(tmp_path_factory.mktemp("overfit")))
    start = time.perf_counter()
    summary = train(cfg, verbose=False)
    summary["elapsed"] = time.perf_counter() - start
    summary["config"] = cfg
    return summary
