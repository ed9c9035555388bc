"""Exception types shared across the package."""


class GraphDistillError(Exception):
    """Base class for all package errors."""


class MissingFile(GraphDistillError):
    pass


class ShapeMismatch(GraphDistillError):
    pass


class BadLabel(GraphDistillError):
    pass


class DanglingEdge(GraphDistillError):
    pass


class InvalidNode(GraphDistillError):
    pass


class InsufficientClassSupport(GraphDistillError):
    pass


class NonFiniteInput(GraphDistillError):
    pass


class MissingTeacherProbs(GraphDistillError):
    pass


class MissingRationaleTarget(GraphDistillError):
    pass


class DimMismatch(GraphDistillError):
    pass


class BadWeights(GraphDistillError):
    pass


class StaleCache(GraphDistillError):
    pass


class Diverged(GraphDistillError):
    pass


class EmptyText(GraphDistillError):
    pass


class TeacherUnavailable(GraphDistillError):
    pass


class TeacherResponseInvalid(GraphDistillError):
    pass


class BudgetExhausted(GraphDistillError):
    pass


class DimTooSmall(GraphDistillError):
    pass


class EmptyPool(GraphDistillError):
    pass


class IsolatedNode(GraphDistillError):
    pass


class NoCandidates(GraphDistillError):
    pass


class UnlabeledNode(GraphDistillError):
    pass
