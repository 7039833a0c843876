import numpy as np
import pytest
import torch

from unsuperpoint.model import ModelConfig

# criterion number -> list of (passed, detail) recorded by tests/test_acceptance.py
ACCEPTANCE: dict[int, list] = {}
NUM_CRITERIA = 8


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_model_config():
    return ModelConfig(backbone_channels=(8, 8, 16, 16, 32, 32, 32, 32), descriptor_dim=16)


@pytest.fixture(autouse=True)
def _torch_seed():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def oracle_dataset(tmp_path_factory):
    from helpers import make_oracle_dataset

    return make_oracle_dataset(tmp_path_factory.mktemp("hpatches"))


@pytest.fixture
def record():
    """record(criterion, passed, detail): log one acceptance check, then assert it."""

    def _record(criterion: int, passed: bool, detail: str):
        ACCEPTANCE.setdefault(criterion, []).append((bool(passed), detail))
        print(f"criterion {criterion}: {'PASS' if passed else 'FAIL'} {detail}")
        assert passed, detail

    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    broken = [r.nodeid for key in ("failed", "error") for r in terminalreporter.stats.get(key, [])]
    for c in range(1, NUM_CRITERIA + 1):
        checks = ACCEPTANCE.get(c)
        if not checks:
            terminalreporter.write_line(f"criterion {c}: FAIL (not run or errored)")
            continue
        crashed = any(f"test_criterion{c}_" in n for n in broken)
        ok = all(p for p, _ in checks) and not crashed
        detail = "; ".join(d for _, d in checks)
        terminalreporter.write_line(f"criterion {c}: {'PASS' if ok else 'FAIL'} ({detail})")
