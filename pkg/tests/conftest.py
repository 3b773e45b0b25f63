import pytest

from elastic_bcm.mesh_materials import build_grid, make_material
from helpers import bump_density


@pytest.fixture
def small_grid():
    return build_grid(2, 12)


@pytest.fixture
def small_bump(small_grid):
    return make_material(bump_density(small_grid), 1.0, 1.0, small_grid)


def pytest_terminal_summary(terminalreporter):
    from helpers import CRITERIA

    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
