import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from provtest.bench import BenchmarkSpec, generate_zoo  # noqa: E402


@pytest.fixture(scope="session")
def shipped_zoo():
    return generate_zoo(BenchmarkSpec.default())


@pytest.fixture(scope="session")
def small_zoo():
    spec = BenchmarkSpec(
        n_base=6, n_groups=3, children=[(0, 0.0), (1, 0.1), (2, 0.3), (3, 0.5)],
        n_independent=3, master_seed=11, corpus_size=3000,
    )
    return generate_zoo(spec)
