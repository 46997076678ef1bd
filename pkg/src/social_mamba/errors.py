"""Exception types shared across the package."""


class SocialMambaError(Exception):
    """Base class for all structured errors raised by this package."""


class ShapeError(SocialMambaError, ValueError):
    """Operand shapes do not conform for a primitive."""

    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(list(s)) for s in self.shapes)
        msg = f"{op}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NonFiniteError(SocialMambaError, ValueError):
    """A NaN or Inf showed up where finite values are required."""


class GradientError(SocialMambaError, RuntimeError):
    """Backward pass was requested on something that cannot be differentiated."""


class SceneError(SocialMambaError, ValueError):
    """A scene is malformed or violates its invariants."""


class SceneFormatError(SceneError):
    """A scene file line could not be parsed."""

    def __init__(self, message, line_no=None):
        self.line_no = line_no
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)


class TrainingDiverged(SocialMambaError, RuntimeError):
    """Training loss became non-finite."""

    def __init__(self, message, last_good=None):
        self.last_good = last_good
        super().__init__(f"{message}; last good checkpoint: {last_good}")
