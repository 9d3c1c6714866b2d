"""Empirical checks of the two convergence claims, detached from the learner.

The query-ratio check feeds i.i.d. Gaussian surrogate signals to the threshold
policy. The buffer checks push random labeled entries through the
class-balanced buffer and follow the balance measure.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np

from . import query_policy
from .config import InputError, PolicyConfig
from .label_buffer import BufferEntry, LabelBuffer
from .models.traces import BalanceOutcome, FailureRateRow, QueryRatioOutcome

TOLERANCE = 1e-9


@dataclass
class QueryRatioTrace:
    """Per-step policy trajectory.

    >>> QueryRatioTrace

    """

    t: np.ndarray
    n_queried: np.ndarray
    ratio: np.ndarray
    regime: List[query_policy.Regime]
    tau: np.ndarray

    @property
    def n_steps(self) -> int:
        """Length of the trajectory."""
        return len(self.t)

    def strict_occupancy(self, upto: Optional[int] = None) -> float:
        """Fraction of the first ``upto`` steps decided in the strict regime."""
        regimes = self.regime[: upto or self.n_steps]
        return sum(r == query_policy.Regime.strict for r in regimes) / len(regimes)


@dataclass
class BalanceTrace:
    """Balance measure after every insertion.

    >>> BalanceTrace

    """

    capacity: int
    labels: np.ndarray
    f_balance: np.ndarray
    counts: np.ndarray

    @property
    def first_full_step(self) -> int:
        """Index of the insertion that filled the buffer."""
        return self.capacity - 1

    @property
    def first_equilibrium_step(self) -> Optional[int]:
        """Index of the first insertion after which the buffer is perfectly balanced."""
        hits = np.flatnonzero(np.abs(self.f_balance) < TOLERANCE)
        return int(hits[0]) if hits.size else None

    def equilibrium_held(self) -> bool:
        """Whether every value after the first balanced step is 0 or 2."""
        first = self.first_equilibrium_step
        if first is None:
            return True
        tail = self.f_balance[first:]
        return bool(
            np.all((np.abs(tail) < TOLERANCE) | (np.abs(tail - 2.0) < TOLERANCE))
        )

    def non_increasing(self) -> bool:
        """Whether, once full, the measure only grows on 0 -> 2 transitions."""
        values = self.f_balance[self.first_full_step :]
        before, after = values[:-1], values[1:]
        grew = after > before + TOLERANCE
        allowed = (np.abs(before) < TOLERANCE) & (np.abs(after - 2.0) < TOLERANCE)
        return bool(np.all(~grew | allowed))


def simulate_query_ratio(
    mu: float, sigma: float, policy_cfg: PolicyConfig, n_steps: int, seed: int
) -> QueryRatioTrace:
    """Runs the threshold policy on ``N(mu, sigma^2)`` surrogate signals.

    Args:
        mu: Mean of the surrogate signal.
        sigma: Standard deviation of the surrogate signal.
        policy_cfg: Policy configuration.
        n_steps: Number of signals.
        seed: Random seed.

    Returns:
        QueryRatioTrace:
        The per-step trajectory.
    """
    if sigma <= 0:
        raise InputError(f"sigma must be positive, got {sigma!r}")
    if n_steps < policy_cfg.t_min:
        raise InputError(f"n_steps must cover the warm-up of {policy_cfg.t_min} steps")
    draws = np.random.default_rng(seed).normal(mu, sigma, n_steps)
    n_queried = np.zeros(n_steps, dtype=np.int64)
    tau = np.zeros(n_steps)
    regimes = []
    # plain counters replicate query_policy.decide_signal without per-step copies
    cap = math.inf if policy_cfg.hard_cap is None else policy_cfg.hard_cap
    lenient, strict = query_policy.Regime.lenient, query_policy.Regime.strict
    queried, mean, m2 = 0, 0.0, 0.0
    for index, signal in enumerate(draws.tolist()):
        if index < policy_cfg.t_min:
            # the warm-up threshold is static; count it with the lenient branch
            branch, threshold = lenient, policy_cfg.tau0
        else:
            if queried / index >= policy_cfg.switch_level:
                branch, z = strict, policy_cfg.z_high
            else:
                branch, z = lenient, policy_cfg.z_selection
            stddev = math.sqrt(m2 / (index - 1)) if index >= 2 else 0.0
            threshold = mean + z * stddev
        if signal > threshold and queried < cap:
            queried += 1
        count = index + 1
        delta = signal - mean
        mean += delta / count
        m2 = max(m2 + delta * (signal - mean), 0.0)
        regimes.append(branch)
        tau[index] = threshold
        n_queried[index] = queried
    t = np.arange(1, n_steps + 1)
    return QueryRatioTrace(
        t=t, n_queried=n_queried, ratio=n_queried / t, regime=regimes, tau=tau
    )


def query_ratio_outcome(
    trace: QueryRatioTrace, alpha: float, seed: int
) -> QueryRatioOutcome:
    """Summarizes a trajectory against the target ratio ``alpha``."""
    final = float(trace.ratio[-1])
    return QueryRatioOutcome(
        seed=seed,
        n_steps=trace.n_steps,
        n_queried=int(trace.n_queried[-1]),
        final_ratio=final,
        deviation=abs(final - alpha),
        strict_occupancy=trace.strict_occupancy(),
    )


def _balance_run(
    k_classes: int,
    capacity: int,
    budget: int,
    class_dist: Optional[Sequence[float]],
    seed: int,
) -> BalanceTrace:
    # separate generators keep every run a prefix of any longer run with the same seed
    label_rng, loss_rng = (
        np.random.default_rng(seq) for seq in np.random.SeedSequence(seed).spawn(2)
    )
    dist = (
        np.full(k_classes, 1.0 / k_classes)
        if class_dist is None
        else np.asarray(class_dist, dtype=np.float64)
    )
    labels = label_rng.choice(k_classes, size=budget, p=dist)
    losses = loss_rng.random(budget)
    buffer = LabelBuffer(capacity, k_classes)
    f_balance = np.zeros(budget)
    counts = np.zeros((budget, k_classes), dtype=np.int64)
    placeholder = np.zeros(1)
    for step, (label, loss) in enumerate(zip(labels.tolist(), losses.tolist())):
        buffer.insert(
            BufferEntry(
                sample_id=step,
                input=placeholder,
                label=label,
                inserted_at=step,
                last_ce=loss,
            )
        )
        f_balance[step] = buffer.balance_measure()
        counts[step] = buffer.class_counts
    return BalanceTrace(capacity=capacity, labels=labels, f_balance=f_balance, counts=counts)


def simulate_buffer_balance(
    k_classes: int,
    capacity: int,
    budget: int,
    class_dist: Optional[Sequence[float]] = None,
    seed: int = 0,
) -> BalanceTrace:
    """Inserts ``budget`` random-class entries with random losses.

    Args:
        k_classes: Number of classes.
        capacity: Buffer capacity, a multiple of ``k_classes``.
        budget: Number of insertions, larger than ``capacity``.
        class_dist: Class frequencies of the insertions, uniform when omitted.
        seed: Random seed.

    Returns:
        BalanceTrace:
        Balance measure and class counts after every insertion.
    """
    if capacity % k_classes:
        raise InputError(f"capacity {capacity} is not divisible by {k_classes} classes")
    if budget <= capacity:
        raise InputError(f"budget {budget} must exceed capacity {capacity}")
    if class_dist is not None:
        dist = np.asarray(class_dist, dtype=np.float64)
        if dist.shape != (k_classes,) or np.any(dist < 0) or abs(dist.sum() - 1.0) > 1e-6:
            raise InputError(f"class_dist must be {k_classes} frequencies summing to 1")
    return _balance_run(k_classes, capacity, budget, class_dist, seed)


def balance_outcome(
    trace: BalanceTrace, k_classes: int, seed: int
) -> BalanceOutcome:
    """Summarizes a balance trajectory."""
    return BalanceOutcome(
        seed=seed,
        k_classes=k_classes,
        capacity=trace.capacity,
        budget=len(trace.labels),
        final_f_balance=float(trace.f_balance[-1]),
        first_equilibrium_step=trace.first_equilibrium_step,
        equilibrium_held=trace.equilibrium_held(),
        non_increasing=trace.non_increasing(),
    )


def failure_rate_vs_budget(
    k_classes: int, capacity: int, budgets: Sequence[int], trials: int, seed: int
) -> List[FailureRateRow]:
    """Fraction of uniform-class trials whose final balance measure exceeds 2.

    Every trial draws one insertion sequence and reads the measure after each
    budget, so larger budgets extend the same sequence.

    Args:
        k_classes: Number of classes.
        capacity: Buffer capacity.
        budgets: Numbers of insertions, each at least ``capacity``.
        trials: Trials per budget.
        seed: Base seed; trial ``i`` uses ``seed + i``.

    Returns:
        List[FailureRateRow]:
        One row per budget, in the order given.
    """
    if trials < 1:
        raise InputError(f"trials must be positive, got {trials}")
    if not budgets:
        raise InputError("at least one budget is required")
    if min(budgets) < capacity:
        raise InputError(f"budgets must be at least the capacity {capacity}")
    failures = {budget: 0 for budget in budgets}
    for trial in range(trials):
        trace = _balance_run(k_classes, capacity, max(budgets), None, seed + trial)
        for budget in budgets:
            failures[budget] += int(trace.f_balance[budget - 1] > 2.0 + TOLERANCE)
    return [
        FailureRateRow(
            budget=budget,
            trials=trials,
            failures=failures[budget],
            failure_rate=failures[budget] / trials,
        )
        for budget in budgets
    ]
