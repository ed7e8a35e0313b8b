"""
Error types shared by the ArtiField numeric core
"""

from typing import Dict, Optional


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation"""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf"""


class GraphError(RuntimeError):
    """Backward was requested on something that is not a scalar on the tape"""


class DivergenceError(NonFiniteError):
    """An optimization loop hit a non-finite loss"""

    def __init__(self, step: int, terms: Dict[str, float]):
        self.step = step
        self.terms = dict(terms)
        details = ", ".join(f"{name}={value:.6g}" for name, value in self.terms.items())
        super().__init__(f"Non-finite loss at step {step} ({details})")


class ParseError(ValueError):
    """A file could not be parsed; carries the position of the failure"""

    def __init__(self, path: str, message: str, offset: Optional[int] = None, line: Optional[int] = None):
        self.path = path
        self.offset = offset
        self.line = line
        where = []
        if offset is not None:
            where.append(f"byte offset {offset}")
        if line is not None:
            where.append(f"line {line}")
        location = f" at {', '.join(where)}" if where else ""
        super().__init__(f"{path}{location}: {message}")
