import numpy as np
import pytest

from liestats.groups import SE3, SO3, GLPlus, Translation, power


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_elements(group, n, rng, scale=0.5):
    """Elements exp(v) with v ~ N(0, scale^2 I), kept inside the log domain."""
    v = rng.normal(scale=scale, size=(n, group.dim))
    if hasattr(group, "in_log_domain"):
        bad = ~group.in_log_domain(v)
        while bad.any():
            v[bad] = rng.normal(scale=scale, size=(int(bad.sum()), group.dim))
            bad = ~group.in_log_domain(v)
    return group.exp(v)


def rot_z(theta):
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


ALL_GROUPS = [Translation(3), SO3(), SE3(), GLPlus(2), GLPlus(3), power(GLPlus(3), 2)]
MATRIX_GROUPS = [SO3(), SE3(), GLPlus(3)]
