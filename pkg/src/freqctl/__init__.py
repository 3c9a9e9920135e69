"""Long-term-value frequency control with Effective-Factor volume stabilization."""

from freqctl.core import (
    DEFAULT_ACTION_VALUES,
    ContractViolation,
    DayOutcome,
    EpisodeRecord,
    FrequencyAction,
    RewardParams,
    action_set,
    reward,
    validate_episode,
)

__version__ = "0.1.0"

__all__ = [
    "DEFAULT_ACTION_VALUES",
    "ContractViolation",
    "DayOutcome",
    "EpisodeRecord",
    "FrequencyAction",
    "RewardParams",
    "action_set",
    "reward",
    "validate_episode",
]
