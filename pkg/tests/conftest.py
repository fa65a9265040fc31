import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from locogs.model import NUM_SH_COEFFS, SplatScene  # noqa: E402


def random_scene(n: int, seed: int = 0, max_band: int = 3) -> SplatScene:
    rng = np.random.default_rng(seed)
    bandwidth = rng.integers(0, max_band + 1, n)
    sh = rng.normal(0, 0.5, (n, NUM_SH_COEFFS, 3))
    deg = np.floor(np.sqrt(np.arange(NUM_SH_COEFFS)))
    sh[deg[None, :] > bandwidth[:, None]] = 0
    return SplatScene.from_activated(
        rng.normal(0, 1, (n, 3)),
        rng.uniform(0.02, 0.98, n),
        np.exp(rng.normal(-3, 0.6, (n, 3))),
        rng.normal(size=(n, 4)),
        sh,
        bandwidth,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per release criterion whenever the acceptance tests ran."""
    import re

    outcomes = {}
    for key in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(key, []):
            m = re.search(r"test_acceptance\.py::test_criterion_(\d+)", getattr(rep, "nodeid", ""))
            if m and (rep.when == "call" or key != "passed"):
                n = int(m.group(1))
                outcomes[n] = "PASS" if key == "passed" and outcomes.get(n, "PASS") == "PASS" else "FAIL"
    if not outcomes:
        return
    from test_acceptance import CRITERIA

    terminalreporter.section("ACCEPTANCE")
    for n in sorted(outcomes):
        terminalreporter.write_line(f"criterion {n:2d}: {outcomes[n]}  {CRITERIA[n]}")
