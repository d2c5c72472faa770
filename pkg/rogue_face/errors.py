"""Exception hierarchy for rogue_face.

Each exception carries the exit code the command-line surface maps it to.
"""

import typing as ty

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_DEGENERATE = 3
EXIT_IO = 4


class RogueError(Exception):
    """Base class for all rogue_face errors."""

    exit_code: int = 1


class InvalidArgumentError(RogueError, ValueError):
    """An argument violates an operation's precondition."""

    exit_code = EXIT_INVALID


class DegenerateRenderError(RogueError):
    """A render covers no pixel, or a fit cannot continue numerically."""

    exit_code = EXIT_DEGENERATE

    def __init__(self, message: str, iteration: ty.Optional[int] = None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class ClippedLandmarkError(DegenerateRenderError):
    """A landmark vertex lies behind the near plane."""

    def __init__(self, landmark: int, vertex: int):
        super().__init__(
            f"Landmark {landmark} (vertex {vertex}) is behind the near plane"
        )
        self.landmark = landmark
        self.vertex = vertex


class FormatError(RogueError, ValueError):
    """A file does not match its documented binary or text format."""

    exit_code = EXIT_IO

    def __init__(self, path: ty.Any, offset: int, reason: str):
        super().__init__(f"{path}: byte offset {offset}: {reason}")
        self.path = path
        self.offset = offset
        self.reason = reason
