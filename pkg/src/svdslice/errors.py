"""Exception and warning types shared across the package."""


class ShapeMismatch(ValueError):
    """Operands do not have conformable shapes."""


class NonFiniteInput(ValueError):
    """A matrix given to a public operation contains NaN or Inf."""


class IterativeNonConvergence(RuntimeError):
    """An iterative solver hit its iteration cap before converging."""

    def __init__(self, rows, cols, sweeps):
        self.rows = rows
        self.cols = cols
        self.sweeps = sweeps
        super().__init__(
            f"SVD did not converge on a {rows}x{cols} matrix within {sweeps} sweeps"
        )


class BadMagic(ValueError):
    """A binary file does not start with the expected magic bytes."""


class TruncatedFile(ValueError):
    """A binary file ended before its declared payload."""


class CountMismatch(ValueError):
    """Image and label files declare different record counts."""


class SliceOutOfRange(ValueError):
    """A component window [s, s+r) does not fit inside [0, k)."""


class OutOfRange(ValueError):
    """A scalar argument lies outside its documented range."""


class LengthMismatch(ValueError):
    """Two vectors that must align have different lengths."""


class InsufficientData(ValueError):
    """Not enough rows / distinct values to compute a statistic."""


class ConfigError(ValueError):
    """A config document is malformed; carries the offending field path."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")


class MissingCheckpoint(FileNotFoundError):
    """A checkpoint referenced by an analysis step does not exist."""


class NonFiniteLoss(RuntimeError):
    """Training diverged: a batch produced a non-finite loss.

    Carries diagnostics plus, when raised mid-run by the trainer, a
    ``partial`` attribute holding the state at the last fully finite epoch
    so sweeps can record exploded runs instead of aborting.
    """

    def __init__(self, epoch, batch, loss_value, partial=None):
        self.epoch = epoch
        self.batch = batch
        self.loss_value = loss_value
        self.partial = partial
        super().__init__(
            f"non-finite loss {loss_value!r} at epoch {epoch}, batch {batch}"
        )


class DegenerateSpectrumWarning(UserWarning):
    """Consecutive singular values are (nearly) equal; the singular basis
    is not unique and downstream results are defined relative to the basis
    actually returned."""


class ZeroComponentWarning(UserWarning):
    """A selected slice contains zero singular values; those adapter
    columns carry no initialization signal."""


class DegenerateProfileWarning(UserWarning):
    """Every component ablation produced zero forgetting; the importance
    profile is all-zero."""
