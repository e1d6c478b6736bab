"""Exception hierarchy shared across the package."""


class VLGraspError(Exception):
    """Base class for all package errors."""


class ConfigError(VLGraspError, ValueError):
    pass


class InputError(VLGraspError, ValueError):
    pass


class InterceptionError(VLGraspError, RuntimeError):
    """A stage hook returned features with the wrong shape."""


class FusionError(VLGraspError, ValueError):
    pass


class AuditError(VLGraspError, RuntimeError):
    """Parameter bookkeeping is inconsistent (freezing, snapshots, registries)."""


class LossError(VLGraspError, ValueError):
    pass


class MetricError(VLGraspError, ValueError):
    pass


class GenerationError(VLGraspError, RuntimeError):
    pass


class TemplateError(VLGraspError, ValueError):
    """No unambiguous expression of the requested kind exists for the target."""


class DatasetError(VLGraspError, IOError):
    pass


class EvaluationError(VLGraspError, ValueError):
    pass


class DivergenceError(VLGraspError, RuntimeError):
    pass
