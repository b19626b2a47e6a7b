import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from scipy.stats import norm

from mkvlab import EmpiricalMeasure

settings.register_profile("default", deadline=None, max_examples=50,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def gaussian_quantiles(mean: float, std: float, n: int) -> EmpiricalMeasure:
    """Midpoint quantiles of N(mean, std^2): a deterministic stand-in for the law."""
    q = (np.arange(n) + 0.5) / n
    return EmpiricalMeasure(mean + std * norm.ppf(q))


@pytest.fixture
def bb_law():
    return gaussian_quantiles(0.9, 0.3, 256)
