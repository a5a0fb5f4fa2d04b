import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "scripts"))

from elasticity import Loads, MaterialField, assemble, solve_dirichlet  # noqa: E402
from mesh import default_inclusions, generate_benchmark_mesh  # noqa: E402

YOUNG = 200.0
TRACTION = 2.0


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run benchmark-scale tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: benchmark-scale runs, skipped without --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def square6():
    """6x6 grid, no inclusions."""
    return generate_benchmark_mesh(6)


@pytest.fixture(scope="session")
def bench12():
    """12x12 grid with the four default inclusions."""
    return generate_benchmark_mesh(12, 1.0, default_inclusions())


@pytest.fixture(scope="session")
def affine():
    """ν = 0, pure top traction: u = (0, g·y/E) is the exact solution and lies in P1."""
    mesh = generate_benchmark_mesh(6)
    materials = MaterialField.two_phase(YOUNG, 1.0, poisson=0.0)
    loads = Loads.benchmark(traction=TRACTION, shear=0.0)
    K, F = assemble(mesh, materials, loads)
    u = solve_dirichlet(K, F, mesh.dirichlet_dofs)
    return mesh, materials, loads, u


@pytest.fixture(scope="session")
def soft12(bench12):
    """Benchmark loads on the 12x12 mesh with inclusions 1000 times softer."""
    materials = MaterialField.two_phase(2e5, 1e-3)
    loads = Loads.benchmark()
    K, F = assemble(bench12, materials, loads)
    u = solve_dirichlet(K, F, bench12.dirichlet_dofs)
    return bench12, materials, loads, u
