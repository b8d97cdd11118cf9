"""Exception types raised across the package."""


class HPLBError(Exception):
    """Base class for all errors raised by hplb."""


class ShapeError(HPLBError, ValueError):
    """A matrix has the wrong shape for the operation."""

    def __init__(self, message, head=None, axis=None):
        if head is not None:
            message = f"head {head}: {message}"
        super().__init__(message)
        self.head = head
        self.axis = axis


class BudgetError(HPLBError, ValueError):
    """A token budget is out of range or otherwise infeasible."""


class CurveError(HPLBError, ValueError):
    """A recovery curve violates its invariants."""


class ProfileFormatError(HPLBError, ValueError):
    """A profile (or allocation / assignment) file is malformed."""

    def __init__(self, message, field=None, line=None):
        self.detail = message
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field {field}")
        if where:
            message = f"{', '.join(where)}: {message}"
        super().__init__(message)
        self.field = field
        self.line = line


class InstanceTooLargeError(HPLBError, ValueError):
    """The exact partition solver refuses instances beyond its size guard."""
