"""Exception hierarchy shared by every bricks subsystem."""

from __future__ import annotations


class BricksError(Exception):
    """Base class for all errors raised by this package."""


class MalformedRefError(BricksError):
    """A brick coordinate string does not match the accepted grammar."""


class ParseError(BricksError):
    """A manifest, lockfile, or dependency file is not in the expected format."""


class CycleError(BricksError):
    """The stage graph declared by a manifest contains a cycle."""


class DuplicateOutputError(BricksError):
    """Two stages in one manifest claim the same output path."""


class BadHashError(BricksError):
    """A digest string is not 32 lowercase hex characters."""


class DuplicateEntryError(BricksError):
    """A dependency file lists the same (org, name) twice."""


class UnpinnedEntryError(BricksError):
    """A dependency entry's commit is not a full 40-hex id."""


class CorruptCacheError(BricksError):
    """A cached blob's content no longer matches the digest in its path."""


class MissingBlobError(BricksError):
    """A required blob is absent from the content cache."""


class AuthError(BricksError):
    """The registry rejected the request's bearer token."""


class NotFoundError(BricksError):
    """The registry has no record of the requested brick, commit, or blob."""


class AmbiguousPrefixError(BricksError):
    """A commit prefix matches more than one known commit."""


class NetworkError(BricksError):
    """Transport-level failure talking to the registry (retryable)."""


class IntegrityError(BricksError):
    """Transferred bytes do not match their announced digest."""


class ConflictError(BricksError):
    """A commit id already exists on the registry with different content."""


class AssetNameCollisionError(BricksError):
    """Two brick assets mangle to the same logical name."""


class NotInstalledError(BricksError):
    """The requested brick is not present in the local library."""


class NotConfiguredError(BricksError):
    """No usable configuration (library path, registry, token) was found."""


class ConfigError(BricksError):
    """The configuration file or flags are invalid."""


class HashMismatchError(BricksError):
    """A file changed on disk since its lockfile record was written."""


class StageFailedError(BricksError):
    """One or more pipeline stages exited nonzero.

    Carries the partial run report so callers can inspect what did run.
    """

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report


class PullError(BricksError):
    """One or more dependency installs failed during a pull.

    ``failures`` maps each failed entry's "org/name" to the error it hit;
    ``results`` holds the per-entry outcomes that did succeed.
    """

    def __init__(self, message: str, failures=None, results=None):
        super().__init__(message)
        self.failures = failures or {}
        self.results = results or []
