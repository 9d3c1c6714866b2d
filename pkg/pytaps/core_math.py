"""Probability, entropy and running-moment primitives shared by every module."""

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy import optimize, special

SUM_TOLERANCE = 1e-9


def softmax(logits: Sequence[float] | np.ndarray) -> np.ndarray:
    """Maps a logit vector onto the probability simplex.

    Args:
        logits: Finite class scores.

    Returns:
        np.ndarray:
        Probability vector with the same argmax as the input.
    """
    values = np.asarray(logits, dtype=np.float64)
    if values.ndim != 1 or not values.size or not np.all(np.isfinite(values)):
        raise ValueError("invalid logits")
    # scipy subtracts the max before exponentiating
    return special.softmax(values)


def validate_probabilities(probs: Sequence[float] | np.ndarray) -> np.ndarray:
    """Returns the input as an array after checking the simplex constraints."""
    values = np.asarray(probs, dtype=np.float64)
    if values.ndim != 1 or not values.size or not np.all(np.isfinite(values)):
        raise ValueError("invalid probability vector")
    if np.any(values < 0) or abs(values.sum() - 1.0) > SUM_TOLERANCE:
        raise ValueError("invalid probability vector")
    return values


def entropy(probs: Sequence[float] | np.ndarray) -> float:
    """Shannon entropy in nats, using the convention ``0 * ln 0 = 0``.

    Args:
        probs: Probability vector.

    Returns:
        float:
        Entropy within ``[0, ln K]``.
    """
    values = validate_probabilities(probs)
    return float(special.entr(values).sum())


@dataclass(frozen=True, slots=True)
class OnlineEstimator:
    """Single-pass (Welford) running mean and variance.

    >>> OnlineEstimator

    """

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def update(self, value: float) -> "OnlineEstimator":
        """Returns a new estimator that includes ``value``."""
        if not math.isfinite(value):
            raise ValueError(f"non-finite observation {value!r}")
        count = self.count + 1
        delta = value - self.mean
        mean = self.mean + delta / count
        m2 = self.m2 + delta * (value - mean)
        return replace(self, count=count, mean=mean, m2=max(m2, 0.0))

    @property
    def variance(self) -> float:
        """Sample variance, 0 below two observations."""
        if self.count < 2:
            return 0.0
        return self.m2 / (self.count - 1)

    @property
    def stddev(self) -> float:
        """Sample standard deviation, 0 below two observations."""
        return math.sqrt(self.variance)


@dataclass(frozen=True, slots=True)
class DecayingEstimator:
    """Exponentially weighted mean and variance with a memory of about ``window`` samples.

    The first ``window`` observations are averaged uniformly, after which
    every new observation carries the weight ``1 / window``.

    >>> DecayingEstimator

    """

    window: int
    count: int = 0
    mean: float = 0.0
    var: float = 0.0

    def __post_init__(self):
        if self.window < 2:
            raise ValueError(f"window must be at least 2, got {self.window}")

    def update(self, value: float) -> "DecayingEstimator":
        """Returns a new estimator that includes ``value``."""
        if not math.isfinite(value):
            raise ValueError(f"non-finite observation {value!r}")
        count = self.count + 1
        weight = 1.0 / min(count, self.window)
        delta = value - self.mean
        mean = self.mean + weight * delta
        var = (1.0 - weight) * (self.var + weight * delta * delta)
        return replace(self, count=count, mean=mean, var=max(var, 0.0))

    @property
    def variance(self) -> float:
        """Weighted (population) variance."""
        return self.var

    @property
    def stddev(self) -> float:
        """Weighted standard deviation."""
        return math.sqrt(self.var)


def running_estimator(window: int = 0) -> OnlineEstimator | DecayingEstimator:
    """All-history estimator for ``window = 0``, else a decaying one."""
    return DecayingEstimator(window) if window else OnlineEstimator()


def estimator_update(estimator: OnlineEstimator, value: float) -> OnlineEstimator:
    """Functional alias for :meth:`OnlineEstimator.update`."""
    return estimator.update(value)


def estimator_mean(estimator: OnlineEstimator) -> float:
    """Running mean, 0 for an empty estimator."""
    return estimator.mean


def estimator_stddev(estimator: OnlineEstimator) -> float:
    """Running sample standard deviation."""
    return estimator.stddev


def normal_cdf(z: float) -> float:
    """Standard normal cdf, accurate in the lower tail."""
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def inverse_normal_cdf(q: float) -> float:
    """Solves ``normal_cdf(z) = q`` for ``z`` with a bracketing root finder.

    Args:
        q: Probability strictly between 0 and 1.

    Returns:
        float:
        The standard normal quantile of ``q``.
    """
    if not 0.0 < q < 1.0:
        raise ValueError(f"quantile must lie in (0, 1), got {q!r}")
    return optimize.brentq(lambda z: normal_cdf(z) - q, -40.0, 40.0, xtol=1e-12)
