"""Multi-process rendezvous conformance: every scenario across 2, 3 and 8 workers."""

import pytest

import rdv_scenarios


@pytest.mark.parametrize("n", [2, 3, 8])
@pytest.mark.parametrize("name", list(rdv_scenarios.SCENARIOS))
def test_scenario(pools, name, n):
    rdv_scenarios.run_case(pools(n), name, n, seed=n)
