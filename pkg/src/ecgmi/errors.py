"""Exception hierarchy shared by the ingest, dataset, model and trainer layers."""


class EcgMiError(Exception):
    """Base class for every error raised by this package."""


# --- ingest
class MalformedHeader(EcgMiError):
    pass


class UnsupportedFormat(EcgMiError):
    pass


class TruncatedFile(EcgMiError):
    pass


class ChecksumMismatch(EcgMiError):
    def __init__(self, lead, expected, actual):
        super().__init__(f"checksum mismatch on lead {lead!r}: header says {expected}, data sums to {actual}")
        self.lead = lead
        self.expected = expected
        self.actual = actual


class EmptyDataset(EcgMiError):
    pass


# --- dataset
class UnknownLead(EcgMiError):
    def __init__(self, name):
        super().__init__(f"unknown lead {name!r}")
        self.name = name


class TooShort(EcgMiError):
    pass


class InfeasibleSplit(EcgMiError):
    pass


class MissingClass(EcgMiError):
    pass


# --- nn
class UnsupportedLeadCount(EcgMiError):
    pass


class ShapeMismatch(EcgMiError):
    pass


class DegenerateBatch(EcgMiError):
    pass


class MissingCache(EcgMiError):
    pass


class NonFiniteGradient(EcgMiError):
    pass


# --- trainer / ablation
class DivergedTraining(EcgMiError):
    pass


class EmptyPartition(EcgMiError):
    pass


class CorruptCheckpoint(EcgMiError):
    pass


class EmptyResults(EcgMiError):
    pass


class KTooLarge(EcgMiError):
    pass
