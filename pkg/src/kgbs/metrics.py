"""Per-run evaluation metrics shared by inference and the benchmark harness."""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DomainError

DEFAULT_WIN_THRESHOLD = 0.8


def bncr(found, planted) -> float:
    """Bias node cover rate: the fraction of planted bias nodes that were found."""
    planted = set(planted)
    if not planted:
        raise DomainError("bncr is undefined without planted bias nodes")
    return len(planted & set(found)) / len(planted)


@dataclass
class RunMetrics:
    bncr: float
    interactions: int
    step_loss: float  # queries per discovered bias node; inf when none found
    win: bool
    seed: int
    found: int = 0
    planted: int = 0
    wall_time: float = 0.0

    @classmethod
    def compute(cls, found, planted, interactions: int, seed: int, win_threshold=DEFAULT_WIN_THRESHOLD, wall_time=0.0):
        found = set(found)
        rate = bncr(found, planted)
        loss = interactions / len(found) if found else math.inf
        return cls(rate, int(interactions), loss, rate >= win_threshold, seed, len(found), len(set(planted)), wall_time)

    def to_record(self) -> dict:
        """JSON-safe, timing-free record (identical across repeated runs)."""
        return {
            "bncr": self.bncr,
            "interactions": self.interactions,
            "step_loss": None if math.isinf(self.step_loss) else self.step_loss,
            "win": self.win,
            "seed": self.seed,
            "found": self.found,
            "planted": self.planted,
        }
