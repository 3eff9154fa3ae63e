class HazeError(Exception):
    """Base class for every structured failure raised by this package."""


class ShapeError(HazeError, ValueError):
    """A tensor dimension does not satisfy an operation's contract."""

    def __init__(self, message, dimension=None, expected=None, actual=None):
        super().__init__(message)
        self.dimension = dimension
        self.expected = expected
        self.actual = actual


class FormatError(HazeError, ValueError):
    """A file could not be parsed. ``offset`` is a byte offset, ``line`` a 1-based line number."""

    def __init__(self, message, path=None, offset=None, line=None):
        loc = []
        if path is not None:
            loc.append(str(path))
        if offset is not None:
            loc.append(f"byte {offset}")
        if line is not None:
            loc.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(loc)})" if loc else message)
        self.path = path
        self.offset = offset
        self.line = line


class ConfigError(HazeError, ValueError):
    pass
