import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_CRITERIA = {
    "test_criterion_01_theorem_exactness": "1 Theorem-1 bit-shift exactness",
    "test_criterion_02_quantizer_oracles": "2 quantizer oracles and invariants",
    "test_criterion_03_gradient_checks": "3 finite-difference gradient checks",
    "test_criterion_04_clipping_error_sweep": "4 clipping-error sweep properties",
    "test_criterion_05_bitops_accounting": "5 BitOPs accounting vs published budgets",
    "test_criterion_06_scl_overhead": "6 switchable clipping-level storage overhead",
    "test_criterion_07_joint_training": "7 joint-training parity at desk scale",
    "test_criterion_08_direct_adaptation": "8 direct-adaptation/calibration pattern",
    "test_criterion_09_progressive": "9 progressive-training pattern",
    "test_criterion_10_storage_conversion": "10 storage/conversion end-to-end",
    "test_criterion_11_clipping_profile": "11 clipping-profile qualitative pattern",
}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    outcomes: dict[str, str] = {}
    for status, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "ERROR"),
                          ("skipped", "SKIP")):
        for rep in terminalreporter.stats.get(status, []):
            if getattr(rep, "when", "call") != "call" and status != "error":
                continue
            name = rep.location[2].split("[")[0]
            if name in ACCEPTANCE_CRITERIA:
                outcomes[name] = label
    if not outcomes:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for name, title in ACCEPTANCE_CRITERIA.items():
        if name in outcomes:
            terminalreporter.write_line(f"criterion {title}: {outcomes[name]}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
