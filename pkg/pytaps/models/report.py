from typing import Dict, List

from pydantic import BaseModel, Field


class LossBreakdown(BaseModel):
    """Individual terms of the composite loss for one update.

    >>> LossBreakdown

    """

    entropy: float = 0.0
    cross_entropy: float = 0.0
    coarse: float = 0.0
    fine: float = 0.0
    total: float = 0.0


class StepReport(BaseModel):
    """Record of a single stream step, in evaluation order.

    >>> StepReport

    """

    t: int
    predicted_label: int
    true_label_revealed_after_eval: bool
    correct: bool
    entropy: float
    tau: float
    queried: bool
    n_queried: int
    f_balance: float
    loss_breakdown: LossBreakdown = Field(default_factory=LossBreakdown)
    wall_time_ms: float = 0.0
    updated: bool = True

    @classmethod
    def columns(cls) -> List[str]:
        """CSV header, loss terms flattened as ``loss_<term>``."""
        columns = []
        for name in cls.model_fields:
            if name == "loss_breakdown":
                columns.extend(f"loss_{term}" for term in LossBreakdown.model_fields)
            else:
                columns.append(name)
        return columns

    def row(self) -> Dict[str, int | float | bool]:
        """Flat mapping keyed by :meth:`columns`."""
        flat = {}
        for name in type(self).model_fields:
            if name == "loss_breakdown":
                for term, value in self.loss_breakdown.model_dump().items():
                    flat[f"loss_{term}"] = value
            else:
                flat[name] = getattr(self, name)
        return flat


class EpisodeSummary(BaseModel):
    """Aggregate metrics of one episode.

    >>> EpisodeSummary

    """

    accuracy: float
    query_ratio: float
    mean_f_balance: float
    mean_step_ms: float
    n_steps: int
    n_queried: int
    n_updates: int
    mode: str
    seed: int


class SweepRow(BaseModel):
    """One (value, seed) cell of an ablation sweep.

    >>> SweepRow

    """

    axis: str
    value: str
    seed: int
    accuracy: float
    query_ratio: float
    n_queried: int
    mean_f_balance: float
    mean_step_ms: float
