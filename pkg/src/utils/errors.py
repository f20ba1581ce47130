class ConfigError(ValueError):
    """Invalid configuration value or combination of values."""


class DomainError(ValueError):
    """Argument outside the domain of an operation (pose off the world, pixel out of bounds, ...)."""


class TrainingError(RuntimeError):
    """Non-finite loss or parameters during training."""


class CampaignError(RuntimeError):
    """A module error that aborted a campaign. The partial record was persisted before raising."""

    def __init__(self, message, run_dir=None):
        super().__init__(message)
        self.run_dir = run_dir
