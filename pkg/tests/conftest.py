import os
import time
from pathlib import Path

import numpy as np
import pytest

from scenerecover.corpus import generate_corpus
from scenerecover.pipeline import PipelineConfig, load_planner, save_planner, train_planner


TRAIN_SECONDS: list[float] = []
VERDICTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for k in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[k])


@pytest.fixture(scope="session")
def corpus():
    cfg = PipelineConfig()
    return generate_corpus(cfg.n_transitions, np.random.default_rng(cfg.seed))


@pytest.fixture(scope="session")
def trained(corpus, tmp_path_factory):
    """(planner, report, checkpoint dir) from the default pipeline, trained
    once per session. SCENERECOVER_CHECKPOINTS reuses saved checkpoints
    (the report is then None)."""
    reuse = os.environ.get("SCENERECOVER_CHECKPOINTS")
    if reuse:
        return load_planner(reuse), None, Path(reuse)
    start = time.perf_counter()
    planner, report = train_planner(PipelineConfig(), corpus)
    TRAIN_SECONDS.append(time.perf_counter() - start)
    out = tmp_path_factory.mktemp("checkpoints")
    save_planner(planner, out, report)
    return planner, report, out


@pytest.fixture(scope="session")
def planner(trained):
    return trained[0]
