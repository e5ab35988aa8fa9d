import pytest
import torch

from sdakd.data import split, synthesize

torch.set_num_threads(1)

# criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_KEY = pytest.StashKey[dict]()
# per-seed rows of the desk-scale experiment behind criteria 5-8
DESK_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_KEY] = {}
    config.stash[DESK_KEY] = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    return request.config.stash[ACCEPTANCE_KEY]


@pytest.fixture(scope="session")
def desk_log(request):
    return request.config.stash[DESK_KEY]


def pytest_terminal_summary(terminalreporter, config):
    results = config.stash.get(ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 11):
        passed, detail = results.get(number, (False, "no result recorded (deselected or errored before measuring)"))
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
    rows = config.stash.get(DESK_KEY, [])
    if rows:
        terminalreporter.section("desk-scale experiment (test ff-FD, teacher-D means)")
        for row in rows:
            terminalreporter.write_line("  ".join(f"{k}={v:.5f}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))


@pytest.fixture(scope="session")
def tiny_data():
    """40 synthetic 16x16 HR images, 4x scale, split 24/8/8."""
    data = synthesize(40, 16, seed=3)
    split(data, (0.6, 0.2, 0.2), seed=3)
    return data
