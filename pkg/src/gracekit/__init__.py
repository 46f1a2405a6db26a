"""Step-level reasoning-data curation by gradient-proxy alignment.

Score every step of every reasoning trace by how well its update-direction
proxy aligns with the answer and with the preceding trajectory, average into
a sample value, and keep the top slice under a selection budget.
"""

from .types import (
    HistoryScheme,
    MatchingError,
    ReasoningSample,
    ScoreReport,
    ScoringConfig,
    SelectionResult,
    SignalFormatError,
    SignalRecord,
    StepScore,
    TraceDataError,
    ZeroVectorError,
)

__all__ = [
    "HistoryScheme",
    "MatchingError",
    "ReasoningSample",
    "ScoreReport",
    "ScoringConfig",
    "SelectionResult",
    "SignalFormatError",
    "SignalRecord",
    "StepScore",
    "TraceDataError",
    "ZeroVectorError",
]

__version__ = "0.1.0"
