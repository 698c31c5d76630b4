import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from nimbus.model import ConsumerRequest, Module, ProductSpec, TechniqueSpec  # noqa: E402

GOLDEN_DIR = Path(__file__).parent / "golden"


@pytest.fixture
def unit():
    return TechniqueSpec("unit", test_case_density=10, avg_case_time=3)


@pytest.fixture
def catalog(unit):
    return [unit, TechniqueSpec("functional", 5, 2), TechniqueSpec("structural", 8, 1)]


def make_request(pid="P1", techniques=("unit",), sizes=(2.0,), deadline=100, density=0.0):
    modules = tuple(Module(f"m{i + 1}", s) for i, s in enumerate(sizes))
    return ConsumerRequest(ProductSpec(pid, modules, density), deadline, tuple(techniques))
