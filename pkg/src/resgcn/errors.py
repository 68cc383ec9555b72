class ResGCNError(Exception):
    pass


class DimensionError(ResGCNError, ValueError):
    pass


class StateError(ResGCNError, RuntimeError):
    pass


class UsageError(ResGCNError, ValueError):
    pass


class SpecError(ResGCNError, ValueError):
    pass


class TopologyError(ResGCNError, ValueError):
    pass


class ParseError(ResGCNError, ValueError):
    """Malformed input text; ``line`` / ``position`` locate the offending spot when known."""

    def __init__(self, message, line=None, position=None):
        where = ""
        if line is not None:
            where = f"line {line}: "
        elif position is not None:
            where = f"position {position}: "
        super().__init__(where + message)
        self.line = line
        self.position = position
