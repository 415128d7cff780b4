#!/usr/bin/env python3
"""Run the A1-A10 acceptance checks and print one PASS/FAIL line per criterion.

The default experiment is built (or reused) under runs/acceptance; set
ASRDEFENSE_ACCEPT_DIR to point the checks at another run directory.
"""
import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]

if __name__ == "__main__":
    sys.exit(pytest.main([str(ROOT / "tests" / "test_acceptance.py"), "-q", "-p", "no:cacheprovider"]))
