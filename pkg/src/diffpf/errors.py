"""Exception hierarchy shared by every diffpf module."""


class DiffPFError(Exception):
    """Base class for all errors raised by diffpf."""


# network
class TopologyError(DiffPFError):
    pass


class NonPositiveConductance(DiffPFError):
    pass


class NonNegativeSusceptance(DiffPFError):
    pass


class DegenerateImpedance(DiffPFError):
    pass


# caseio
class CaseSyntaxError(DiffPFError):
    """Malformed case text. Carries the 1-based line and column of the fault."""

    def __init__(self, message, line=None, column=None):
        self.line = line
        self.column = column
        where = f" (line {line}, column {column})" if line is not None else ""
        super().__init__(f"{message}{where}")


class MissingSection(CaseSyntaxError):
    pass


class DuplicateBusId(CaseSyntaxError):
    pass


class NoSlackBus(CaseSyntaxError):
    pass


class MultipleSlackBuses(CaseSyntaxError):
    pass


class DanglingBranch(CaseSyntaxError):
    pass


class SchemaMismatch(DiffPFError):
    pass


class ShapeMismatch(DiffPFError):
    pass


class TopologyMismatch(DiffPFError):
    pass


# powerflow
class SingularJacobian(DiffPFError):
    def __init__(self, sample, step, condition, context=""):
        self.sample = sample
        self.step = step
        self.condition = condition
        self.context = context
        where = f"{context}: " if context else ""
        super().__init__(
            f"{where}singular Jacobian at sample {sample}, step {step} "
            f"(condition estimate {condition:.3e})"
        )


class NoConvergence(DiffPFError):
    def __init__(self, failed, iterations, residuals=None):
        self.failed = list(failed)
        self.iterations = iterations
        self.residuals = residuals
        super().__init__(
            f"Newton-Raphson did not converge in {iterations} iterations "
            f"for samples {self.failed}"
        )


# estimator / datagen
class ZeroNormalizer(DiffPFError):
    pass


class MissingGroundTruth(DiffPFError):
    pass


class Diverged(DiffPFError):
    pass


class GenerationFailed(DiffPFError):
    pass


class EmptyTrainSet(DiffPFError):
    pass
