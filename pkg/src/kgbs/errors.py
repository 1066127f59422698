"""Exception hierarchy shared by every kgbs module.

The CLI maps each family to its own exit code, so raise the most specific
class that applies.
"""


class KgbsError(Exception):
    """Base class for all errors raised by this package."""


class ParseError(KgbsError, ValueError):
    def __init__(self, path, lineno, message):
        self.path = str(path)
        self.lineno = lineno
        super().__init__(f"{self.path}:{lineno}: {message}")


class ValidationError(KgbsError, ValueError):
    pass


class DomainError(KgbsError, ValueError):
    """Argument outside the operation's domain (bad index, bad dimension)."""


class StateError(KgbsError, RuntimeError):
    """Operation called on an object that lacks required state."""


class ConfigError(KgbsError, ValueError):
    pass


class BudgetExhausted(KgbsError):
    """The oracle cannot pay for another uncached query."""

    def __init__(self, node, spent, limit):
        self.node = node
        self.spent = spent
        self.limit = limit
        super().__init__(f"query budget exhausted at node {node} (spent {spent} of {limit})")


class TrainingDiverged(KgbsError, ArithmeticError):
    def __init__(self, index, message, unit="epoch"):
        self.index = index
        self.unit = unit
        super().__init__(f"{unit} {index}: {message}")
