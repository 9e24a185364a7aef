"""Exception types shared across the pipeline."""

from __future__ import annotations


class ValidationError(ValueError):
    """Input violates a documented invariant (bad record, bad config, bad shape)."""


class FormatError(ValidationError):
    """Binary file does not follow its declared layout."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class StageError(RuntimeError):
    """A pipeline stage failed; carries the stage name and the digest of its inputs."""

    def __init__(self, stage: str, digest: str, cause: BaseException):
        self.stage = stage
        self.digest = digest
        self.cause = cause
        super().__init__(f"stage '{stage}' failed (input digest {digest[:16]}): {cause}")
