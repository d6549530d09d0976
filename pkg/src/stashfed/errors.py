"""Exception hierarchy shared by every stashfed component."""

from __future__ import annotations


class StashError(Exception):
    """Base class for all federation errors."""


class MalformedPath(StashError, ValueError):
    pass


class OversizedChunk(StashError, ValueError):
    pass


class NotFound(StashError):
    pass


class RangeUnsatisfiable(StashError):
    pass


class Conflict(StashError):
    pass


class MalformedDescriptor(StashError, ValueError):
    pass


class OriginUnreachable(StashError):
    pass


class CacheFull(StashError):
    pass


class NoCaches(StashError):
    pass


class IntegrityError(StashError):
    """Bytes did not match the catalog digest (or size) for a chunk."""

    def __init__(self, message: str, chunk_index: int | None = None):
        super().__init__(message)
        self.chunk_index = chunk_index


class DownloadFailed(StashError):
    """Every method of the client fallback chain failed."""

    exit_code = 4

    def __init__(self, message: str, attempts: list | None = None):
        super().__init__(message)
        self.attempts = list(attempts or [])


class AllMethodsFailed(DownloadFailed):
    exit_code = 4


class DownloadNotFound(DownloadFailed):
    exit_code = 2


class DownloadIntegrityError(DownloadFailed):
    exit_code = 3

    def __init__(self, message: str, attempts: list | None = None, chunk_index: int | None = None):
        super().__init__(message, attempts)
        self.chunk_index = chunk_index


class MalformedPacket(StashError, ValueError):
    pass


class Unencodable(StashError, ValueError):
    pass


class UndefinedBaseline(StashError, ValueError):
    pass
