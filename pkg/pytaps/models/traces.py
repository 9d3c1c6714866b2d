from typing import Optional

from pydantic import BaseModel


class QueryRatioOutcome(BaseModel):
    """Final state of one query-ratio simulation.

    >>> QueryRatioOutcome

    """

    seed: int
    n_steps: int
    n_queried: int
    final_ratio: float
    deviation: float
    strict_occupancy: float


class BalanceOutcome(BaseModel):
    """Final state of one buffer-balance simulation.

    >>> BalanceOutcome

    """

    seed: int
    k_classes: int
    capacity: int
    budget: int
    final_f_balance: float
    first_equilibrium_step: Optional[int] = None
    equilibrium_held: bool
    non_increasing: bool


class FailureRateRow(BaseModel):
    """Empirical probability that the final buffer is off balance by more than 2.

    >>> FailureRateRow

    """

    budget: int
    trials: int
    failures: int
    failure_rate: float
