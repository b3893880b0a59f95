"""Exception types shared across the package."""


class MdstError(Exception):
    """Base class for all package errors."""


class CorpusFormatError(MdstError):
    """Corpus file is malformed or violates the corpus contract."""


class FeatureStoreError(MdstError):
    """Feature store lookup or format failure."""


class ConfigError(MdstError):
    """Invalid configuration value or file."""


class ContractError(MdstError):
    """An operation was called outside its contract (wrong round, bad count)."""


class NumericError(MdstError):
    """Non-finite values where finite ones are required."""


class TrainingDiverged(MdstError):
    """Loss became non-finite during training."""
