"""Exception hierarchy shared by every hoe module."""


class HoeError(Exception):
    """Base class; ``code`` is the machine-readable tag printed by the CLI."""

    code = "HoeError"

    def __init_subclass__(cls, **kwargs):
        super().__init_subclass__(**kwargs)
        cls.code = cls.__name__


class InvalidInput(HoeError, ValueError):
    pass


class RankTooLarge(HoeError, ValueError):
    pass


class InvalidDistribution(HoeError, ValueError):
    pass


class NotOnSimplex(HoeError, ValueError):
    pass


class InvalidStep(HoeError, ValueError):
    pass


class EmptyRegistry(HoeError, ValueError):
    pass


class DegenerateSimplex(HoeError, ValueError):
    pass


class IncompatibleModels(HoeError, ValueError):
    pass


class DuplicateExpert(HoeError, ValueError):
    pass


class UnknownModule(HoeError, KeyError):
    pass


class TrainingDiverged(HoeError, RuntimeError):
    pass


class CorruptCheckpoint(HoeError, ValueError):
    pass


class GateFailed(HoeError, RuntimeError):
    """A pipeline quality gate (e.g. the single-objective oracle gate) was not met."""
