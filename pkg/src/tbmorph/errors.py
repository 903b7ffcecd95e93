"""Exception types shared across the package."""


class TbmError(Exception):
    """Base class for all package-specific errors."""


class GridMismatch(TbmError):
    """Operands live on different grids."""


class NonFiniteInput(TbmError):
    """Input contains NaN or infinity."""


class AllZeroVolume(TbmError):
    """Volume has no mass to normalize."""


class BadMagic(TbmError):
    """File does not start with the expected magic tag."""


class TruncatedFile(TbmError):
    """File ended before the declared payload was complete."""


class UnsupportedEncoding(TbmError):
    """Container header describes a payload this reader cannot decode."""


class NotNifti1(TbmError):
    """File is not a single-file NIfTI-1 image."""


class UnsupportedDatatype(TbmError):
    """NIfTI datatype code outside the supported scalar set."""


class DimensionalityOutOfRange(TbmError):
    """Image does not reduce to two or three non-trivial spatial axes."""


class EmptyCohort(TbmError):
    """An operation over subjects received none."""


class NonDiffeomorphicMap(TbmError):
    """Reconstructed map folds over itself (non-positive Jacobian determinant)."""


class RankTooLarge(TbmError):
    """Requested reduced rank exceeds what the cohort supports."""


class ConstantCovariate(TbmError):
    """Covariate has zero variance; no correlation direction exists."""


class SingularPenalty(TbmError):
    """Within-class scatter is singular and no ridge penalty was given."""


class DegenerateLabels(TbmError):
    """Class labels do not define at least two non-empty classes."""


class MassMismatch(TbmError):
    """Source and target carry different total mass."""


class TooLarge(TbmError):
    """Problem size exceeds the configured cap for an exact method."""


class Infeasible(TbmError):
    """Linear program has no feasible transport plan."""


class ConfigError(TbmError):
    """Pipeline configuration is malformed."""
