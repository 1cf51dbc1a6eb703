"""Exception hierarchy. ``exit_code`` is what the CLI returns when the error is fatal."""

from __future__ import annotations


class KeyTreeError(Exception):
    exit_code = 1


# configuration / inputs (exit 2)
class ConfigError(KeyTreeError, ValueError):
    exit_code = 2


class DatasetFormatError(ConfigError):
    def __init__(self, message: str, index: int | None = None):
        super().__init__(message if index is None else f"task {index}: {message}")
        self.index = index


class DuplicateUid(DatasetFormatError):
    pass


class EmptyDataset(ConfigError):
    pass


class EmptyInput(KeyTreeError, ValueError):
    pass


# assets (exit 3)
class AssetError(KeyTreeError):
    exit_code = 3


class FeatureIOError(AssetError, OSError):
    pass


class FormatError(AssetError, ValueError):
    """Malformed feature file; ``record`` is the offending record index."""

    def __init__(self, message: str, record: int | None = None):
        super().__init__(message if record is None else f"record {record}: {message}")
        self.record = record


class CaptionMissing(AssetError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else "caption missing"


# clustering / tree contract violations
class ClusteringError(KeyTreeError, ValueError):
    pass


class DimensionMismatch(ClusteringError):
    pass


class InvalidK(ClusteringError):
    pass


class TooLarge(ClusteringError):
    pass


class EmptyCluster(ClusteringError):
    pass


class TreeError(KeyTreeError, ValueError):
    pass


class MismatchedFrameCount(TreeError):
    pass


class InvalidDepth(TreeError):
    pass


class LengthMismatch(TreeError):
    pass


# backends (exit 4)
class BackendError(KeyTreeError):
    exit_code = 4


class TransportError(BackendError):
    pass


class BackendRefusal(BackendError):
    def __init__(self, status: int, body: str):
        super().__init__(f"backend refused request (HTTP {status}): {body}")
        self.status = status
        self.body = body


class ScriptExhausted(BackendError):
    pass


# parsing (exit 5)
class ParseFailure(KeyTreeError, ValueError):
    exit_code = 5


class RecordFormatError(ParseFailure):
    """A RunRecord / tree export that cannot be read back."""


class TaskFailed(KeyTreeError):
    """Wraps any error raised while running one task, tagging it with the task uid."""

    def __init__(self, uid: str, cause: BaseException):
        super().__init__(f"[{uid}] {type(cause).__name__}: {cause}")
        self.uid = uid
        self.cause = cause

    @property
    def exit_code(self) -> int:  # type: ignore[override]
        return getattr(self.cause, "exit_code", 1)
