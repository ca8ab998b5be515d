import os

import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)
settings.register_profile("repo", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture(scope="session")
def tiny_cfg():
    from negorep.config import desk_config

    return desk_config(**{
        "data.n_train": 24, "data.n_val": 8, "data.n_test": 8,
        "optim.steps_step0": 4, "optim.steps_stage1": 6, "optim.steps_stage2": 3,
        "optim.steps_join1": 3, "optim.steps_join2": 2, "optim.validate_every": 3,
    })


@pytest.fixture(scope="session")
def tiny_ws(tiny_cfg, tmp_path_factory):
    """A complete (but barely trained) protocol run: Step 0, stage 1, stage 2 and m3 joined."""
    from negorep.training import Workspace, run_protocol

    ws = Workspace(tmp_path_factory.mktemp("tiny"), tiny_cfg)
    run_protocol(ws, join=["m3"])
    return ws


# -- acceptance summary ------------------------------------------------------------------

N_CRITERIA = 11


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records one acceptance verdict for the summary."""
    store = request.config.stash.setdefault(_VERDICTS, {})

    def record(n: int, ok: bool, detail: str):
        store[n] = (bool(ok), detail)
        return ok

    return record


_VERDICTS = pytest.StashKey[dict]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_VERDICTS, None)
    if store is None:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = store.get(n, (False, "no verdict (deselected, or errored before reaching one)"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
