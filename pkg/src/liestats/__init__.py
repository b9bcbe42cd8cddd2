"""Bi-invariant statistics on Lie groups with the canonical Cartan-Schouten connection."""

__version__ = "0.1.0"

from .errors import *  # noqa: F401,F403
from .groups import (  # noqa: F401
    GLPlus,
    LieGroup,
    Product,
    SE3,
    SO3,
    Translation,
    parse_group,
    power,
    product_group,
)
from .stats import (  # noqa: F401
    Covariance,
    MeanResult,
    averaged_covariance,
    bhattacharyya,
    centralized_covariance,
    euclidean_bhattacharyya,
    euclidean_t2,
    group_mean,
    hellinger,
    hotelling_t2,
    mahalanobis_sq,
    pooled_covariance,
    riemannian_t2_euclidean,
    sample_wrapped_gaussian,
)
from .testing import (  # noqa: F401
    LocalTestReport,
    PermutationConfig,
    TestReport,
    bh_fdr,
    global_test,
    inv_norm_cdf,
    local_tests,
    permutation_test,
)
