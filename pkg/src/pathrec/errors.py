"""Exception hierarchy shared by every stage."""


class PathRecError(Exception):
    """Base class for all package errors."""


class InputError(PathRecError):
    """Malformed or inconsistent input file content."""

    def __init__(self, message, path=None, line=None):
        self.path = path
        self.line = line
        where = ""
        if path is not None:
            where = str(path)
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)


class DimMismatch(InputError):
    pass


class DuplicateId(InputError):
    pass


class NonFiniteValue(InputError):
    pass


class MalformedLine(InputError):
    pass


class NegativeTimestamp(InputError):
    pass


class MalformedRecord(InputError):
    pass


class MissingField(InputError):
    pass


class EmptyInput(PathRecError):
    pass


class NotFitted(PathRecError):
    pass


class BatchTooSmall(PathRecError):
    pass


class NonFiniteLoss(PathRecError):
    pass


class UnknownItem(PathRecError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class MissingModality(PathRecError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class EmptySequence(PathRecError):
    pass


class UnknownNode(PathRecError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class MissingRepresentation(PathRecError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class MissingProfile(PathRecError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class MissingTitle(MissingProfile):
    pass


class TooManyPaths(PathRecError):
    pass


class StageError(PathRecError):
    """Raised by the pipeline runner; names the failing stage."""

    def __init__(self, stage, cause):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
