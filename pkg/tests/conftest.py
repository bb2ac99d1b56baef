from pathlib import Path

import pytest

from exchange_design import GridConfig, ModelParams, build_empirical_distribution, reference_options, solve_contract

DATA = Path(__file__).parent / "data"

# December column of the strike table: strike (% of spot) -> number of calls traded
DECEMBER = {
    20: 0, 30: 1, 40: 0, 50: 58, 60: 1933, 70: 1402, 80: 12814, 90: 113210,
    100: 159075, 110: 5811, 120: 869, 130: 1, 140: 0, 150: 0, 160: 1720, 170: 1040,
}


@pytest.fixture(scope="session")
def december_dist():
    return build_empirical_distribution(DECEMBER.items(), upper=200.0)


@pytest.fixture(scope="session")
def params():
    return ModelParams()


@pytest.fixture(scope="session")
def solution(params):
    return solve_contract(params, reference_options())


@pytest.fixture(scope="session")
def coarse_solution(params):
    return solve_contract(params, reference_options(), GridConfig(n_store=101))


@pytest.fixture(scope="session")
def single_solution(params):
    return solve_contract(params, reference_options()[:1])


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(test_acceptance.RESULTS):
            terminalreporter.write_line(test_acceptance.RESULTS[n])
