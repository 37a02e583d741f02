import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from crashbo.core import Domain, Problem

settings.register_profile(
    "default", deadline=None, max_examples=50,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def sphere_evaluator(center):
    center = np.asarray(center, dtype=float)

    def f(theta):
        return float(np.sum((theta - center) ** 2)), False, None

    return f


@pytest.fixture
def sphere():
    return Problem("sphere", Domain([-1.0, -1.0], [1.0, 1.0]), sphere_evaluator([0.0, 0.0]),
                   known_best=0.0)


def crash_right_evaluator(threshold=0.6, fallback=10.0):
    """1-d bowl around 0.3 that crashes for theta > threshold."""

    def f(theta):
        if theta[0] > threshold:
            return None, True, fallback
        return float((theta[0] - 0.3) ** 2), False, None

    return f


@pytest.fixture
def crash_1d():
    return Problem("crash_1d", Domain([0.0], [1.0]), crash_right_evaluator(), known_best=0.0)
