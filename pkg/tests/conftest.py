from __future__ import annotations

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cyberood.harness import ExperimentConfig, cmd_collect, cmd_train  # noqa: E402


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory) -> ExperimentConfig:
    """Desk-scale datasets and models for both policies (500 episodes x 50 steps)."""
    cfg = ExperimentConfig(out=tmp_path_factory.mktemp("desk"), seed=0)
    cmd_collect(cfg, log=lambda _: None)
    cmd_train(cfg, log=lambda _: None)
    return cfg


ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def verdict(request):
    """Record one acceptance criterion's outcome for the end-of-run report, then assert it."""
    results = request.config.stash.setdefault(ACCEPTANCE, {})

    def record(number: int, ok: bool, detail: str) -> None:
        results[number] = (ok, detail)
        assert ok, f"criterion {number}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(ACCEPTANCE, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        ok, detail = results[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
