import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from bailout.harness import build_kk_network
from bailout.mdp import MdpConfig, MdpState

settings.register_profile("default", max_examples=100, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def kk():
    return build_kk_network(alpha=0.01)


@pytest.fixture
def kk_state(kk):
    return MdpState(kk, frozenset(), 0, 7)


@pytest.fixture
def cfg():
    return MdpConfig()


def example_one(alpha=0.01, rho=0.5, sigma=0.01):
    """Three banks, w_ij = 1, bank 3 already defaulted."""
    from bailout.network import BankNode, FinancialNetwork

    nodes = [BankNode(id=i + 1, label=str(i + 1), W=100.0, E=3.0, sigma=sigma, alpha=alpha)
             for i in range(3)]
    w = np.ones((3, 3)) - np.eye(3)
    S = np.full((3, 3), rho)
    np.fill_diagonal(S, 1.0)
    return FinancialNetwork.from_nodes(nodes, w, S)


# criterion number -> one-line verdict, filled by test_acceptance.py
ACCEPTANCE: dict = {}


def record(n: int, ok: bool, detail: str):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])


