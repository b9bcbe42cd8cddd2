"""Exception hierarchy shared by all liestats modules."""


class LieStatsError(Exception):
    """Base class for every error raised by liestats."""


class InvalidElement(LieStatsError, ValueError):
    """A payload does not satisfy the invariants of its group."""


class DescriptorMismatch(LieStatsError, ValueError):
    pass


class EmptyProduct(LieStatsError, ValueError):
    pass


class OutsideLogDomain(LieStatsError, ArithmeticError):
    """The group logarithm is undefined (element too far from the identity)."""


class SpectrumOnCut(OutsideLogDomain):
    """A matrix has an eigenvalue on the closed negative real axis."""


class MatrixOverflow(LieStatsError, ArithmeticError):
    pass


class NotPositiveDefinite(LieStatsError, ArithmeticError):
    """Cholesky factorization failed; typically too few samples for the dimension."""


class NotConverged(LieStatsError, ArithmeticError):
    def __init__(self, iterations, residual):
        self.iterations = iterations
        self.residual = residual
        super().__init__(
            f"group mean did not converge after {iterations} iterations "
            f"(residual {residual:.3e}); data may not be sufficiently localized"
        )


class DegenerateWeights(LieStatsError, ValueError):
    pass


class CovarianceTooLarge(LieStatsError, ValueError):
    pass


class TooFewSamples(LieStatsError, ValueError):
    pass


class BaselineDegenerate(LieStatsError, ArithmeticError):
    pass


class OutOfDomain(LieStatsError, ValueError):
    pass


class ScoreCovarianceSingular(LieStatsError, ArithmeticError):
    pass


class DegenerateSpectrum(LieStatsError, ArithmeticError):
    pass


class DegenerateConfiguration(LieStatsError, ArithmeticError):
    pass


class DegenerateFace(LieStatsError, ValueError):
    pass


class OrientationFlip(LieStatsError, ValueError):
    pass


class MeshMismatch(LieStatsError, ValueError):
    pass


class PermutationsDegenerate(LieStatsError, ArithmeticError):
    """Every permuted split produced an undefined statistic."""
