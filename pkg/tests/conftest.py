import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from conec.backbone import Backbone, BackboneConfig

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_backbone():
    return Backbone(BackboneConfig(num_layers=2, embed_dim=8, num_tokens=3, num_heads=2, mlp_hidden=12, input_dim=4, seed=5))


CRITERIA: dict[int, str] = {}


def record_criterion(num: int, ok: bool, detail: str) -> None:
    line = f"criterion {num:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    CRITERIA[num] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for num in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[num])
