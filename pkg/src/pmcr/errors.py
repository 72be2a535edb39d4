"""Exception hierarchy shared by every module."""


class PMCRError(Exception):
    pass


class MalformedHeader(PMCRError):
    pass


class DimOverflow(PMCRError):
    pass


class TruncatedPayload(PMCRError):
    pass


class ZeroTargetDim(PMCRError):
    pass


class DimMismatch(PMCRError, ValueError):
    pass


class RankTooLarge(PMCRError, ValueError):
    pass


class NonFiniteInput(PMCRError, ValueError):
    pass


class NonDifferentiablePoint(PMCRError):
    pass


class EmptyForeground(PMCRError):
    pass


class NonConvergence(PMCRError):
    """Sinkhorn stopped at ``max_iters`` with marginal violation above tolerance."""

    def __init__(self, violation: float, iters: int, plan=None):
        super().__init__(f"marginal violation {violation:.3e} after {iters} sweeps")
        self.violation = violation
        self.iters = iters
        self.plan = plan


class DegenerateMarginal(PMCRError, ValueError):
    pass


class DegenerateScores(PMCRError, ValueError):
    pass


class TooFewPixels(PMCRError):
    pass


class MissingMemoryClass(PMCRError):
    def __init__(self, class_id: int):
        super().__init__(f"class {class_id} has no centroids in memory")
        self.class_id = class_id


class EvenKernel(PMCRError, ValueError):
    pass


class EmptyUnion(PMCRError, ValueError):
    pass


class NonFiniteComponent(PMCRError, ValueError):
    pass


class IndivisibleDims(PMCRError, ValueError):
    pass


class InvalidSpec(PMCRError, ValueError):
    pass


class NonFiniteLoss(PMCRError):
    pass


class EmptyScan(PMCRError, ValueError):
    pass
