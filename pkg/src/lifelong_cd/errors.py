"""Exception hierarchy shared by every stage of the loop."""


class LCDError(Exception):
    """Base class for all pipeline errors."""


class InvalidConfigError(LCDError, ValueError):
    pass


class InvalidInputError(LCDError, ValueError):
    pass


class OutOfBoundsError(InvalidInputError):
    pass


class DegenerateScaleError(InvalidInputError):
    pass


class NotFoundError(LCDError, LookupError):
    pass


class PlacementCapacityError(LCDError):
    def __init__(self, requested, fitted):
        super().__init__(f"could only place {fitted} of {requested} objects without overlap")
        self.requested = requested
        self.fitted = fitted


class EmptyKnowledgeBaseError(LCDError):
    pass


class ProvenanceError(LCDError):
    pass


class InsufficientDataError(LCDError):
    pass


class LifecycleOrderError(LCDError):
    pass
