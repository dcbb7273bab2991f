"""Exception hierarchy shared across the package."""


class CkptError(Exception):
    """Base class for all ckptsync errors."""


# -- heap --------------------------------------------------------------

class HeapError(CkptError):
    pass


class OutOfMemory(HeapError):
    pass


class InvalidRef(HeapError):
    pass


class DoubleFree(HeapError):
    pass


class OutOfBounds(HeapError):
    pass


class WorldNotStopped(HeapError):
    """An operation that requires a stopped world was called on a running one."""


class SafepointTimeout(HeapError):
    """A mutator failed to reach a safepoint within the configured bound."""


# -- image format ------------------------------------------------------

class FormatError(CkptError):
    pass


class BadMagic(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class CrcMismatch(FormatError):
    pass


class Truncated(FormatError):
    pass


class InvalidImage(FormatError):
    """Structurally valid bytes that violate an image invariant."""


# -- storage -----------------------------------------------------------

class StorageError(CkptError):
    pass


class NotFound(StorageError):
    pass


class NameInvalid(StorageError):
    pass


class WireError(StorageError):
    """Connection-level failure while talking to a service."""


# -- checkpoint engine / restore ---------------------------------------

class DumpError(CkptError):
    pass


class ChainGap(CkptError):
    pass


class IncompleteCheckpoint(CkptError):
    pass


# -- cluster -----------------------------------------------------------

class DuplicateNode(CkptError):
    pass


class NotChosenNode(CkptError):
    pass


class ReplicationFailed(CkptError):
    """Synchronous replication did not reach storage; the reply must not be sent."""


class ManagerFatal(CkptError):
    pass
