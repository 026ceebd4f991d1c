"""
Domain exceptions
Every failure raised by the services derives from PainterError
"""


class PainterError(Exception):
    """Base class for all toolkit errors"""


class RejectedInputError(PainterError, ValueError):
    """A precondition of an operation was violated"""


class FormatError(PainterError, ValueError):
    """A file could not be decoded"""

    def __init__(self, message, path=None, byte_offset=None):
        self.path = str(path) if path is not None else None
        self.byte_offset = byte_offset
        where = []
        if self.path:
            where.append(self.path)
        if byte_offset is not None:
            where.append(f"byte {byte_offset}")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


class SceneGenerationError(PainterError, RuntimeError):
    """Synthetic placement failed after the retry budget"""


class StageError(PainterError, RuntimeError):
    """A pipeline stage failed; carries the stage name"""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {cause}")
