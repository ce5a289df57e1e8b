"""Exception types shared across the toolkit."""


class SegadaptError(Exception):
    """Base class for all toolkit errors."""


class ShapeError(SegadaptError):
    """Image/model geometry mismatch (size not divisible, wrong raster shape, ...)."""


class UnsupportedDepth(SegadaptError):
    """PGM file has a maxval the reader does not accept for this content type."""


class MalformedPgm(SegadaptError):
    """PGM header or payload cannot be parsed."""


class LabelOverflow(SegadaptError):
    """An instance id exceeds the 16-bit on-disk label range."""


class EmptyRun(SegadaptError):
    """A result set that must be non-empty is empty."""


class NoLabels(SegadaptError):
    """Training requested with an empty labeled set."""


class InvalidSteps(SegadaptError):
    """A gradient-step count outside the accepted range."""


class DegenerateDistances(SegadaptError):
    """All pairwise distances are zero; no usable kernel bandwidth."""


class MissingModel(SegadaptError):
    """A distance-matrix row domain has no pretrained model."""


class PoolExhausted(SegadaptError):
    """Batch size exceeds the unlabeled pool."""


class InvalidBatch(SegadaptError):
    """Batch size below 1."""


class NoSeeds(SegadaptError):
    """Watershed found no seed components (saturated membrane map)."""


class InsufficientTrainingBudget(SegadaptError):
    """Training budget smaller than the number of active iterations."""


class SpecInfeasible(SegadaptError):
    """Synthetic domain spec admits no valid tissue geometry."""


class ExactEnumerationTooLarge(SegadaptError):
    """Exact permutation enumeration refused above the size cap."""


class DegenerateEmbeddings(UserWarning):
    """All candidate embeddings identical; sampler falls back to id order."""
