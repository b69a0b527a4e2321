"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An argument broke a documented precondition (shape, range, type)."""


class AllZeroRelevance(ContractViolation):
    """NDCG is undefined when every candidate has zero relevance."""


class OracleTooLarge(ContractViolation):
    """Exact enumeration over K! permutations was requested for K above the cap."""


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


class DataFormatError(ValueError):
    """A data or checkpoint file failed validation."""


class TrainingDiverged(RuntimeError):
    """A non-finite objective or gradient was produced during training."""
