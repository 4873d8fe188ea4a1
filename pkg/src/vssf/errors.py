"""Exception types shared across the package.

Numerical failures (non-PD matrices, unstable dynamics, non-finite values)
are kept separate from data/configuration failures so the CLI can map them
to distinct exit codes.
"""


class VssfError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(VssfError):
    """Operands have incompatible shapes."""


class NotPositiveDefinite(VssfError):
    """A matrix required to be positive definite failed its Cholesky check."""


class NotStable(VssfError):
    """Dynamics matrix has spectral radius at or above one."""


class NonFiniteError(VssfError):
    """A computed quantity is NaN or infinite."""


class NonFiniteGradient(NonFiniteError):
    """A gradient passed to the optimizer is NaN or infinite."""


class UnknownSensor(VssfError):
    """An observation refers to a sensor the model does not have."""


class ConfigMismatch(VssfError):
    """Stored configuration is incompatible with the requested operation."""


class MissingGroundTruth(VssfError):
    """Evaluation requires ground-truth states the dataset does not carry."""


# --- autodiff ---

class ShapeMismatch(VssfError):
    """Tensor operands have incompatible shapes."""


class NotScalarRoot(VssfError):
    """backward() was called on a non-scalar node."""


class AlreadyConsumed(VssfError):
    """backward() was called twice on the same graph."""


# --- datastore ---

class StoreError(VssfError):
    """Base class for container read/write failures."""


class IoError(StoreError):
    """Underlying file operation failed."""


class BadMagic(StoreError):
    """File does not start with the expected magic bytes."""


class UnsupportedVersion(StoreError):
    """Container version is not supported by this reader."""


class CorruptHeader(StoreError):
    """Container header is malformed or inconsistent with the payload."""
