from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminal: bool


class EpisodeOverError(RuntimeError):
    """``step`` was called on an environment whose episode has ended."""
