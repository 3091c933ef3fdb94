# errors.py
# Exception hierarchy; messages are prefixed with 'module.function: '

class MSMVDError(Exception):
    """
    Base class of every error raised by the msmvd package
    """
    pass

class DomainError(MSMVDError, ValueError):
    pass

class ProjectionError(MSMVDError):
    pass

class ConfigError(MSMVDError):
    """
    Invalid configuration, invalid enum value, or missing precomputed data.
    The CLI treats these as usage errors (exit status 2).
    """
    pass

class LoadError(MSMVDError):
    pass

class GenerationError(MSMVDError):
    pass

class ContractError(MSMVDError):
    """
    Shape contract violated between two arrays that must agree
    """
    pass

class EvaluationError(MSMVDError):
    pass

class TrainingError(MSMVDError):
    pass
