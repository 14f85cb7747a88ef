"""Exception hierarchy shared by every ucvm module.

Each error carries an ``exit_code`` used by the command line front end:
1 for user or environment problems, 2 for broken invariants.
"""

from __future__ import annotations


class UcvmError(Exception):
    exit_code = 1


class InvariantViolation(UcvmError):
    exit_code = 2


# -- repository -------------------------------------------------------------


class NotFound(UcvmError):
    pass


class IntegrityError(InvariantViolation):
    """Stored or downloaded bytes do not hash to their object id."""


class DecodeError(InvariantViolation):
    pass


class InvariantError(InvariantViolation):
    pass


class StoreError(UcvmError):
    pass


class UnknownSelector(NotFound):
    pass


class DuplicateSnapshotName(UcvmError):
    pass


class InvalidMetaPackage(UcvmError):
    pass


# -- transport --------------------------------------------------------------


class Unreachable(UcvmError):
    pass


class QuotaTooSmall(UcvmError):
    pass


class PinExceedsQuota(UcvmError):
    pass


# -- union file system ------------------------------------------------------


class UnionError(UcvmError):
    #: short, errno-like label used when comparing against a host directory
    kind = "error"


class PathNotFound(UnionError, NotFound):
    kind = "ENOENT"


class ParentNotFound(PathNotFound):
    pass


class IsADirectory(UnionError):
    kind = "EISDIR"


class NotADirectory(UnionError):
    kind = "ENOTDIR"


class ParentNotADirectory(NotADirectory):
    pass


class FileExists(UnionError):
    kind = "EEXIST"


class DirectoryNotEmpty(UnionError):
    kind = "ENOTEMPTY"


class TooManyLinks(UnionError):
    kind = "ELOOP"


class ReadOnly(UnionError):
    kind = "EROFS"


class ReservedName(UnionError):
    kind = "EINVAL"


class NotASymlink(UnionError):
    kind = "EINVAL"


class MountBusy(UnionError):
    kind = "EBUSY"


class MountClosed(UnionError):
    kind = "EBADF"


# -- bootstrap / updater ----------------------------------------------------


class MissingRequiredKey(UcvmError):
    pass


class MalformedBlock(UcvmError):
    pass


class NoScratchAvailable(UcvmError):
    pass


class NotBooted(UcvmError):
    pass


class HookFailed(UcvmError):
    pass


class StageConflict(UcvmError):
    pass


class NotPinned(UcvmError):
    pass


# -- command line -----------------------------------------------------------


class UnknownSubcommand(UcvmError):
    pass


class UsageError(UcvmError):
    pass
