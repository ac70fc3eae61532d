import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from ambiguity import AmbiguitySpec, GaussianReference
from system import SystemSpec, CostSpec, SampleSet, build_stacked


def backend_available(name: str = "CLARABEL") -> bool:
    try:
        from backends import available_backends
        return name in available_backends()
    except ImportError:
        return False


requires_solver = pytest.mark.skipif(not backend_available(), reason="CLARABEL backend not installed")


@pytest.fixture
def scalar_system():
    """x1 = x0 + u0 + w0, horizon 2"""
    return SystemSpec(2, 1.0, 1.0, 1.0)


@pytest.fixture
def scalar_stacked(scalar_system):
    return build_stacked(scalar_system)


@pytest.fixture
def scalar_cost():
    return CostSpec.identity(2, 1, 1)


@pytest.fixture
def mass_spring():
    return SystemSpec.mass_spring(4, mass=1.0, spring=1.0, damping=1.0, sampling_time=1.0)


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(7)))


@pytest.fixture
def scalar_samples(rng):
    return SampleSet(rng.normal(0.0, 1.0, size=(4, 2)))


@pytest.fixture
def scalar_reference():
    return GaussianReference(np.zeros(2), np.eye(2))


@pytest.fixture
def sample_1d():
    return SampleSet([[0.5], [-1.0], [2.0]])


@pytest.fixture
def reference_1d():
    return GaussianReference([0.0], [[1.0]])


@pytest.fixture
def tiny_request(scalar_system, scalar_cost, scalar_samples, scalar_reference):
    from synthesis import SynthesisRequest
    from ambiguity import feasibility_threshold

    eps = 0.5
    rho = feasibility_threshold(scalar_samples, scalar_reference, eps) + 1.0
    return SynthesisRequest(scalar_system, scalar_cost, scalar_samples, scalar_reference,
                            AmbiguitySpec(rho, eps), strategy="outer", backend="CLARABEL")


@pytest.fixture
def tiny_bundle(tiny_request):
    from synthesis import synthesize_sinkhorn

    if not backend_available():
        pytest.skip("CLARABEL backend not installed")
    return synthesize_sinkhorn(tiny_request)


@pytest.fixture
def isolated_db(tmp_path):
    from database import Database
    return Database(str(tmp_path / "runs.db"))
