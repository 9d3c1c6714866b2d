"""Dynamic entropy threshold with budget-aware z switching.

The threshold stays at ``tau0`` for the first ``t_min`` samples and then tracks
``mean + z * stddev`` of the entropies seen so far, with ``z`` raised to
``z_high`` while the running query ratio sits at or above the switch level.
The statistics cover all history by default; a state built on a
``DecayingEstimator`` follows a drifting entropy distribution instead.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Tuple

from .config import PolicyConfig, StrEnum
from .core_math import DecayingEstimator, OnlineEstimator


class Regime(StrEnum):
    """Which branch produced a threshold.

    >>> Regime

    """

    static: str = "static"
    lenient: str = "lenient"
    strict: str = "strict"


@dataclass(frozen=True, slots=True)
class PolicyState:
    """Counters and running entropy statistics of one stream.

    >>> PolicyState

    """

    t: int = 0
    n_queried: int = 0
    entropy_stats: OnlineEstimator | DecayingEstimator = field(default_factory=OnlineEstimator)
    last_tau: float = math.nan


def regime(cfg: PolicyConfig, st: PolicyState) -> Regime:
    """Returns the branch of the threshold rule that applies to ``st``."""
    if st.t < cfg.t_min:
        return Regime.static
    if st.n_queried / st.t >= cfg.switch_level:
        return Regime.strict
    return Regime.lenient


def current_threshold(cfg: PolicyConfig, st: PolicyState) -> float:
    """Entropy threshold (nats) for the next sample.

    Args:
        cfg: Policy configuration.
        st: State before the next observation.

    Returns:
        float:
        ``tau0`` during warm-up, otherwise ``mean + z * stddev``.
    """
    branch = regime(cfg, st)
    if branch == Regime.static:
        return cfg.tau0
    z = cfg.z_high if branch == Regime.strict else cfg.z_selection
    return st.entropy_stats.mean + z * st.entropy_stats.stddev


def budget_left(cfg: PolicyConfig, st: PolicyState) -> bool:
    """False once the optional hard cap has been reached."""
    return cfg.hard_cap is None or st.n_queried < cfg.hard_cap


def record_observation(
    st: PolicyState, h: float, queried: bool, tau: float
) -> PolicyState:
    """Advances the counters and folds ``h`` into the entropy statistics."""
    return replace(
        st,
        t=st.t + 1,
        n_queried=st.n_queried + int(queried),
        entropy_stats=st.entropy_stats.update(h),
        last_tau=tau,
    )


def observe_and_decide(
    cfg: PolicyConfig, st: PolicyState, h: float
) -> Tuple[bool, PolicyState, float]:
    """Decides whether to query a sample of entropy ``h``.

    Args:
        cfg: Policy configuration.
        st: State before this sample.
        h: Entropy of the sample in nats.

    Returns:
        Tuple[bool, PolicyState, float]:
        The decision, the updated state and the threshold that was applied.
    """
    if not math.isfinite(h) or h < 0:
        raise ValueError(f"entropy must be finite and non-negative, got {h!r}")
    return decide_signal(cfg, st, h)


def decide_signal(
    cfg: PolicyConfig, st: PolicyState, signal: float
) -> Tuple[bool, PolicyState, float]:
    """Thresholding rule for an arbitrary real-valued uncertainty signal."""
    if not math.isfinite(signal):
        raise ValueError(f"signal must be finite, got {signal!r}")
    tau = current_threshold(cfg, st)
    decision = signal > tau and budget_left(cfg, st)
    return decision, record_observation(st, signal, decision, tau), tau


def query_ratio(st: PolicyState) -> float:
    """Fraction of observed samples that were queried."""
    if st.t == 0:
        raise ValueError("no observations")
    return st.n_queried / st.t
