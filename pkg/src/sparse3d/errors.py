"""Exception types shared across the package.

Exit-code mapping used by the CLI: validation errors -> 2, divergence -> 3,
I/O and schema errors -> 4.
"""


class ValidationError(ValueError):
    """Bad argument or configuration value, detected before any compute."""


class BehindCamera(ValidationError):
    """A point transforms to camera-frame depth <= 0 and cannot be projected."""


class InvalidRange(ValidationError):
    """An interval [near, far) with near >= far."""


class EmptySpec(ValidationError):
    """Scene specification contains no primitives."""


class BadTimestep(ValidationError):
    """Diffusion timestep outside [1, T]."""


class DatasetTooSmall(ValidationError):
    """Dataset does not provide enough views or scenes for the requested run."""


class AllTokensInvalid(RuntimeError):
    """No epipolar sample projects into any input view for a query ray."""


class StaleTape(RuntimeError):
    """Backward requested without a matching recorded forward pass."""


class DivergenceDetected(RuntimeError):
    """A loss or gradient became non-finite during optimization."""


class EmptyField(RuntimeError):
    """No grid cell crosses the requested iso level."""


class EmptySet(ValidationError):
    """A point set required to be non-empty is empty."""


class ShapeMismatch(ValidationError):
    """Two arrays that must share a shape do not."""


class IoFailure(RuntimeError):
    """Filesystem read/write failed."""


class SchemaMismatch(RuntimeError):
    """On-disk artifact is missing, or its version/keys do not match."""
