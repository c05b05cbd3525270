import numpy as np
import pytest

from forcedvi import autodiff as ad
from forcedvi.continuous import ForcedSystem
from forcedvi.experiments import benchmark_damped_linear, benchmark_van_der_pol
from forcedvi.geometry import Chart

VDP = (0.5, 0.02, 0.8)


@pytest.fixture
def vdp():
    return benchmark_van_der_pol(*VDP)


@pytest.fixture
def damped():
    return benchmark_damped_linear([[1.0]], [[0.2]], [[1.0]])


@pytest.fixture
def oscillator():
    return benchmark_damped_linear([[1.0]], [[0.0]], [[1.0]])


def harmonic(n=1):
    return ForcedSystem(Chart(n), lambda q, v: 0.5 * ad.dot(v, v) - 0.5 * ad.dot(q, q))


def free_particle(n=1):
    return ForcedSystem(Chart(n), lambda q, v: 0.5 * ad.dot(v, v))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


VDP_METHODS = {
    "midpoint": ("alpha", 3),
    "lobatto2": ("lobatto", 2),
    "lobatto3": ("lobatto", 3),
    "lobatto4": ("lobatto", 4),
    "lobatto5": ("lobatto", 5),
}


@pytest.fixture(scope="session")
def vdp_reference():
    from forcedvi.experiments import compute_reference

    return compute_reference(benchmark_van_der_pol(*VDP), "doubled", 2.5e-4, cross_check=True)


@pytest.fixture(scope="session")
def vdp_studies(vdp_reference):
    from forcedvi.experiments import ConvergenceSpec, run_convergence

    bench = benchmark_van_der_pol(*VDP)
    return {
        name: run_convergence(bench, ConvergenceSpec(family, stages), vdp_reference)
        for name, (family, stages) in VDP_METHODS.items()
    }


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
