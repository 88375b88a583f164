import pytest
import torch

from geoprompt.geodata import PartitionConfig, SyntheticCityConfig, generate_synthetic_city

torch.set_num_threads(1)

TINY_PART = PartitionConfig(M=50.0, alpha=180.0, N=2, L=2)

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def tiny_city(tmp_path_factory):
    """16 cells x 2 heading bins at 16 px; 8 groups of 4 classes."""
    cfg = SyntheticCityConfig(image_size=16, renders_per_class=4, database_per_class=1,
                              queries_per_class=4, texture_grid=8, seed=3)
    manifest, records = generate_synthetic_city(cfg, TINY_PART, tmp_path_factory.mktemp("tiny"))
    return manifest, records


@pytest.fixture(scope="session")
def acceptance():
    def record(criterion: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[criterion] = (bool(passed), detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if passed else 'FAIL'}  {detail}")
