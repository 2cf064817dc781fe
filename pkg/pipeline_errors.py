"""Exception hierarchy shared by every stage of the popularity pipeline.

The CLI maps the three top-level families onto exit codes:
ConfigError -> 2, DataError -> 3, ModelError (and anything else) -> 4.
"""


def _restore(cls, args, state):
    error = Exception.__new__(cls)
    error.args = args
    error.__dict__.update(state)
    return error


class PipelineError(Exception):
    """Base class for every error raised on purpose by this package."""

    exit_code = 4

    # subclasses take their own constructor arguments; fold workers ship
    # errors across processes, so rebuild from args and attributes
    def __reduce__(self):
        return _restore, (type(self), self.args, self.__dict__)


class ConfigError(PipelineError):
    exit_code = 2

    def __init__(self, field, message):
        self.field = field
        super().__init__(f"{field}: {message}")


class DataError(PipelineError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, path, line_number, message):
        self.path = str(path)
        self.line_number = line_number
        super().__init__(f"{path}:{line_number}: {message}")


class DuplicateIdError(DataError):
    def __init__(self, post_id, where=""):
        self.post_id = post_id
        suffix = f" ({where})" if where else ""
        super().__init__(f"duplicate id {post_id!r}{suffix}")


class RangeError(DataError):
    def __init__(self, field, value, where=""):
        self.field = field
        self.value = value
        prefix = f"{where}: " if where else ""
        super().__init__(f"{prefix}{field} out of range: {value!r}")


class FormatError(DataError):
    def __init__(self, offset, message):
        self.offset = offset
        super().__init__(f"byte {offset}: {message}")


class AlignmentError(DataError):
    def __init__(self, message, block=None, missing_ids=()):
        self.block = block
        self.missing_ids = list(missing_ids)
        super().__init__(message)


class ImputationError(DataError):
    def __init__(self, field):
        self.field = field
        super().__init__(f"cannot impute {field!r}: absent in every training row")


class ModelError(PipelineError):
    exit_code = 4


class ShapeError(ModelError):
    pass


class RankError(ModelError):
    pass


class DegenerateInputError(ModelError):
    pass


class SingularityError(ModelError):
    pass


class FoldError(ModelError):
    pass


class DivergenceError(ModelError):
    def __init__(self, epoch, learning_rate):
        self.epoch = epoch
        self.learning_rate = learning_rate
        super().__init__(f"non-finite loss at epoch {epoch} (learning rate {learning_rate})")


class FitError(ModelError):
    def __init__(self, fold, member, cause):
        self.fold = fold
        self.member = member
        self.cause = cause
        super().__init__(f"fold {fold}, member {member}: {cause}")


class VersionMismatchError(ModelError):
    def __init__(self, found, expected):
        self.found = found
        self.expected = expected
        super().__init__(
            f"artifact format version {found} cannot be read by this build "
            f"(expects {expected}); re-train or migrate the artifact"
        )
