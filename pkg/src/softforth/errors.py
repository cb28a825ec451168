"""Shared exception types."""


class ForthError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(ForthError):
    """Source text could not be tokenized, or a slot spec is malformed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = "line %d: %s" % (line + 1, message)
        super().__init__(message)
        self.line = line


class CompileError(ForthError):
    """Token stream could not be lowered to a program."""

    def __init__(self, message, line=None):
        if line is not None:
            message = "line %d: %s" % (line + 1, message)
        super().__init__(message)
        self.line = line


class RuntimeFault(ForthError):
    """The machine hit an illegal operation; carries the instruction index."""

    def __init__(self, message, index=None):
        if index is not None:
            message = "at instruction %d: %s" % (index, message)
        super().__init__(message)
        self.index = index


class StepBudgetExceeded(ForthError):
    """Execution did not halt within the allowed number of steps."""


class ShapeMismatch(ForthError):
    """Operands of a tensor op do not conform."""

    def __init__(self, op, *shapes):
        detail = " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__("%s: incompatible shapes %s" % (op, detail))


class ConfigError(ForthError):
    """Invalid run configuration; carries every problem found at once."""

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [problems]
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))
