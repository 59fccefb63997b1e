"""Exception types raised across the package."""


class TumorAugError(Exception):
    """Base class for all package errors."""


class DimsMismatchError(TumorAugError, ValueError):
    pass


# --- NIfTI I/O -------------------------------------------------------------

class NiftiError(TumorAugError):
    pass


class BadMagicError(NiftiError, ValueError):
    pass


class UnsupportedDatatypeError(NiftiError, ValueError):
    pass


class CorruptLengthError(NiftiError, ValueError):
    pass


class InvalidLabelCodeError(NiftiError, ValueError):
    pass


class IoFailureError(NiftiError, OSError):
    pass


# --- augmentation ----------------------------------------------------------

class EmptyMaskError(TumorAugError, ValueError):
    pass


class NoPlacementFoundError(TumorAugError):
    """Rejection sampling exhausted its budget without a valid box."""


class LabelOutsideSupportError(TumorAugError, ValueError):
    pass


# --- post-processing / statistics -----------------------------------------

class EmptyListError(TumorAugError, ValueError):
    pass


class LengthMismatchError(TumorAugError, ValueError):
    pass


class EmptySelectionError(TumorAugError, ValueError):
    pass


# --- phantoms --------------------------------------------------------------

class LesionOutsideBrainError(TumorAugError, ValueError):
    pass
