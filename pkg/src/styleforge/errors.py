"""Exception hierarchy shared across styleforge modules."""


class StyleforgeError(Exception):
    """Base class for all domain errors (CLI maps these to exit code 2)."""


class ShapeError(StyleforgeError, ValueError):
    """Tensor or image shapes are incompatible with an operation."""


class WeightFormatError(StyleforgeError):
    """Weight file has bad magic bytes or is otherwise not a weight bundle."""


class WeightVersionError(StyleforgeError):
    """Weight file declares an unsupported format version."""


class TruncatedWeightsError(StyleforgeError):
    """Weight file ends mid-record; message names the offending layer."""


class CorpusError(StyleforgeError):
    """Corpus does not satisfy a training precondition (size, classes)."""


class BalanceError(StyleforgeError):
    """No threshold can split the scores into near-equal classes."""

    def __init__(self, message, best_counts=None):
        super().__init__(message)
        self.best_counts = best_counts


class FoldError(StyleforgeError):
    """Fold construction failed (empty training set, too few images)."""


class LeakageError(StyleforgeError):
    """Leakage audit found violations; ``violations`` lists them."""

    def __init__(self, message, violations=()):
        super().__init__(message)
        self.violations = list(violations)


class ManifestError(StyleforgeError):
    """Manifest is structurally invalid (duplicate ids, dangling refs)."""


class SynthesisError(StyleforgeError):
    """Style transfer diverged; ``iteration`` is where the loss went non-finite."""

    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class SynthesisBatchError(StyleforgeError):
    """Too many failed entries in one synthesis batch."""


class TrainingError(StyleforgeError):
    """Classifier training hit an invalid state (NaN loss, bad fold)."""


class ConfigError(StyleforgeError):
    """Experiment config file is missing, malformed, or has unknown keys."""
