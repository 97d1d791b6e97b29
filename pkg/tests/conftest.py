from pathlib import Path

import numpy as np
import pytest

from matchsync.equilibrium import solve_equilibrium
from matchsync.linearization import lyapunov_certificate
from matchsync.model import (
    ConverterParams, LineParams, Topology, assemble_model, load_network,
)

BENCH = Path(__file__).resolve().parent.parent / "benchmarks"
NETWORK = BENCH / "two_converter.json"
NETWORK_B0 = BENCH / "two_converter_b0.json"

# converter and line constants of the two-converter benchmark
TABLE1 = dict(eta=0.0003142, c_dc=1e-3, k_p=0.099, mu=0.33, r_filter=0.2, l_filter=5e-4,
              c_filter=1e-5, g_load=0.01, v_dc_star=1000.0, i_dc_star=37.23)
LINE1 = dict(r_line=0.2, l_line=5e-5)


@pytest.fixture(scope="session")
def bench():
    return load_network(NETWORK)


@pytest.fixture(scope="session")
def bench_b0():
    return load_network(NETWORK_B0)


@pytest.fixture(scope="session")
def bench_eq(bench):
    return solve_equilibrium(bench)


@pytest.fixture(scope="session")
def bench_cert(bench, bench_eq):
    return lyapunov_certificate(bench, bench_eq)


@pytest.fixture(scope="session")
def ring():
    """Three converters on a triangle with a pendant fourth node, 50 Hz."""
    conv = ConverterParams(**TABLE1, b_load=1.08)
    return assemble_model(conv, LineParams(**LINE1),
                          Topology(4, ((0, 1), (1, 2), (2, 0), (2, 3))))


def random_state(model, rng, scale=1.0):
    z = scale * rng.standard_normal(model.N)
    z[model.sl_gamma] = rng.uniform(-np.pi, np.pi, model.n)
    return z


def random_input(model, rng):
    return model.input_from_dc(rng.normal(0.0, 40.0, model.n))


# one line per acceptance criterion, repeated at the end of the run
ACCEPTANCE = {}


def report(number: int, title: str, ok: bool, detail: str = "") -> bool:
    line = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}"
    if detail:
        line += f": {detail}"
    ACCEPTANCE[number] = line
    print("\n" + line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
