import os
import time
from collections.abc import Generator
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch

from . import adapter, query_policy, stream_sim, theory_checks, util
from .config import (
    EvictionPolicy,
    InputError,
    Mode,
    PolicyConfig,
    RunConfig,
    SweepAxis,
    with_overrides,
)
from .core_math import DecayingEstimator, OnlineEstimator, inverse_normal_cdf, running_estimator
from .label_buffer import BufferEntry, LabelBuffer
from .logger import LOGGER
from .models.report import EpisodeSummary, StepReport, SweepRow
from .models.traces import BalanceOutcome, FailureRateRow, QueryRatioOutcome

# child index of the world seed that draws the frozen encoder
ENCODER_STREAM = 7


@dataclass
class Episode:
    """Mutable state of one running episode.

    >>> Episode

    """

    cfg: RunConfig
    model: adapter.PromptModel
    stats: adapter.SourceStats
    buffer: LabelBuffer
    oracle: stream_sim.Oracle = field(default_factory=stream_sim.Oracle)
    policy: query_policy.PolicyState = field(default_factory=query_policy.PolicyState)
    skip_stats: OnlineEstimator | DecayingEstimator = field(default_factory=OnlineEstimator)


def build_model(cfg: RunConfig) -> Tuple[adapter.PromptModel, adapter.SourceStats]:
    """Frozen encoder of the world, source statistics and source-derived prototypes.

    Args:
        cfg: Run configuration.

    Returns:
        Tuple[PromptModel, SourceStats]:
        Model with zero prompt and the statistics of the source dataset.
    """
    world = cfg.world
    rng = np.random.default_rng([world.seed, ENCODER_STREAM])
    weights = adapter.random_layer_weights(
        world.dim, cfg.adapter.n_layers, cfg.adapter.weight_gain, rng
    )
    placeholder = rng.standard_normal((world.k_classes, world.dim))
    model = adapter.PromptModel(weights, placeholder, cfg.adapter.temperature)
    stats = stream_sim.compute_source_stats(model, stream_sim.make_source(world))
    # prototypes are the class directions of the source features at the last layer
    return model.with_prototypes(stats.class_mean[-1]), stats


def new_episode(cfg: RunConfig) -> Episode:
    """Fresh model, statistics and empty buffer for ``cfg``."""
    model, stats = build_model(cfg)
    return Episode(
        cfg=cfg,
        model=model,
        stats=stats,
        buffer=LabelBuffer(cfg.buffer_capacity, cfg.world.k_classes),
        policy=query_policy.PolicyState(entropy_stats=running_estimator(cfg.entropy_window)),
        skip_stats=running_estimator(cfg.entropy_window),
    )


def _labeled_views(
    cfg: RunConfig, entries: Sequence[BufferEntry], rng: np.random.Generator
) -> List[adapter.LabeledViews]:
    return [
        adapter.LabeledViews(
            input=entry.input,
            label=entry.label,
            viewset=adapter.augment(
                entry.input,
                cfg.views,
                cfg.adapter.noise_scale,
                cfg.adapter.mask_frac,
                rng,
            ),
        )
        for entry in entries
    ]


def _decide(
    episode: Episode, h: float, rng: np.random.Generator
) -> Tuple[bool, float]:
    """Runs the mode's query rule and advances the policy state."""
    cfg = episode.cfg
    state = episode.policy
    if cfg.mode in (Mode.entropy_only, Mode.skip_high_entropy):
        tau = query_policy.current_threshold(cfg.policy, state)
        episode.policy = query_policy.record_observation(state, h, False, tau)
        return False, tau
    if cfg.mode == Mode.random_query:
        tau = query_policy.current_threshold(cfg.policy, state)
        coin = rng.random() < cfg.policy.alpha
        queried = coin and query_policy.budget_left(cfg.policy, state)
        episode.policy = query_policy.record_observation(state, h, queried, tau)
        return queried, tau
    queried, episode.policy, tau = query_policy.observe_and_decide(cfg.policy, state, h)
    return queried, tau


def _skip_update(episode: Episode, h: float, z_skip: float) -> bool:
    """Whether the pre-update entropy falls in the running top quantile."""
    stats = episode.skip_stats
    episode.skip_stats = stats.update(h)
    if stats.count < episode.cfg.policy.t_min:
        return False
    return h > stats.mean + z_skip * stats.stddev


def stream_episode(
    cfg: RunConfig, episode: Optional[Episode] = None
) -> Generator[StepReport]:
    """Runs the evaluation protocol over the configured stream.

    Per sample: filter views, take one gradient step, predict and score,
    re-measure the entropy, then decide on a query and store the label.

    Yields:
        StepReport:
        One report per stream sample.
    """
    episode = episode or new_episode(cfg)
    rng = np.random.default_rng(cfg.seed)
    eviction = (
        EvictionPolicy.random if cfg.mode == Mode.random_evict else EvictionPolicy.class_balanced
    )
    z_skip = inverse_normal_cdf(cfg.skip_quantile)
    model = episode.model
    if cfg.world.stream_len < cfg.policy.t_min:
        LOGGER.warning(
            "stream of %d samples never leaves the %d-step warm-up",
            cfg.world.stream_len,
            cfg.policy.t_min,
        )
    for t, sample in enumerate(stream_sim.make_stream(cfg.world)):
        started = time.perf_counter()
        viewset = adapter.filter_views(
            model,
            adapter.augment(
                sample.input,
                cfg.views,
                cfg.adapter.noise_scale,
                cfg.adapter.mask_frac,
                rng,
            ),
            cfg.rho,
        )
        batch = []
        if cfg.queries:
            batch = _labeled_views(
                cfg, episode.buffer.sample_minibatch(cfg.minibatch, rng), rng
            )
        total, breakdown = adapter.composite_loss(
            model, viewset, batch, episode.stats, cfg.weights, cfg.class_targets
        )
        updated = True
        if cfg.mode == Mode.skip_high_entropy:
            updated = not _skip_update(episode, breakdown.entropy, z_skip)
        if updated:
            adapter.step(model, adapter.gradient(model, lambda _: total), cfg.lr)

        predicted = adapter.predict(model, sample.input)
        correct = episode.oracle.score(sample, predicted)

        h = adapter.filtered_entropy(model, viewset, cfg.rho)
        queried, tau = _decide(episode, h, rng)
        revealed_after_eval = False
        if queried:
            revealed_after_eval = episode.oracle.evaluated(sample)
            label = episode.oracle.query(sample)
            if episode.buffer.full:
                episode.buffer.refresh_ce(model)
            with torch.no_grad():
                ce = adapter.cross_entropy_loss(model, sample.input, label).item()
            evicted = episode.buffer.insert(
                BufferEntry(
                    sample_id=sample.sample_id,
                    input=sample.input,
                    label=label,
                    inserted_at=t,
                    last_ce=max(ce, 0.0),
                ),
                eviction,
                rng,
            )
            LOGGER.debug(
                "t=%d queried h=%.4f tau=%.4f evicted=%s",
                t,
                h,
                tau,
                None if evicted is None else evicted.sample_id,
            )
        elapsed = (time.perf_counter() - started) * 1000 if cfg.record_timing else 0.0
        yield StepReport(
            t=t,
            predicted_label=predicted,
            true_label_revealed_after_eval=revealed_after_eval,
            correct=correct,
            entropy=h,
            tau=tau,
            queried=queried,
            n_queried=episode.policy.n_queried,
            f_balance=episode.buffer.balance_measure(),
            loss_breakdown=breakdown,
            wall_time_ms=elapsed,
            updated=updated,
        )


def summarize(cfg: RunConfig, reports: Sequence[StepReport]) -> EpisodeSummary:
    """Aggregates step reports into episode metrics."""
    n_steps = len(reports)
    n_queried = reports[-1].n_queried if reports else 0

    def mean(values: List[float]) -> float:
        return float(np.mean(values)) if values else 0.0

    return EpisodeSummary(
        accuracy=mean([float(r.correct) for r in reports]),
        query_ratio=n_queried / n_steps if n_steps else 0.0,
        mean_f_balance=mean([r.f_balance for r in reports]),
        mean_step_ms=mean([r.wall_time_ms for r in reports]),
        n_steps=n_steps,
        n_queried=n_queried,
        n_updates=sum(r.updated for r in reports),
        mode=cfg.mode.value,
        seed=cfg.seed,
    )


def run_episode(
    cfg: RunConfig, episode: Optional[Episode] = None
) -> Tuple[List[StepReport], EpisodeSummary]:
    """Runs one episode to completion.

    Args:
        cfg: Run configuration.
        episode: Pre-built state, useful to inspect the buffer or model afterwards.

    Returns:
        Tuple[List[StepReport], EpisodeSummary]:
        Every step report and the aggregate metrics.
    """
    LOGGER.info(
        "Running %s episode: %d samples, seed %d",
        cfg.mode.value,
        cfg.world.stream_len,
        cfg.seed,
    )
    reports = list(stream_episode(cfg, episode))
    summary = summarize(cfg, reports)
    LOGGER.info(
        "Episode done: accuracy %.4f, query ratio %.4f, %d queries",
        summary.accuracy,
        summary.query_ratio,
        summary.n_queried,
    )
    return reports, summary


def write_episode(
    episode: Episode,
    reports: Sequence[StepReport],
    summary: EpisodeSummary,
    directory: str,
) -> List[str]:
    """Stores the step CSV, summary, final buffer and model snapshot in ``directory``."""
    os.makedirs(directory, exist_ok=True)
    written = [
        util.emit_csv(reports, os.path.join(directory, "steps.csv")),
        util.emit_summary(summary, os.path.join(directory, "summary.txt")),
    ]
    buffer_file = os.path.join(directory, "buffer.csv")
    episode.buffer.to_csv(buffer_file)
    model_file = os.path.join(directory, "model.txt")
    with open(model_file, "w") as file:
        file.write(episode.model.to_text())
    return written + [buffer_file, model_file]


def sweep_overrides(axis: SweepAxis, value: Any, base: RunConfig) -> Dict[str, Any]:
    """Config edits that place a run at ``value`` on ``axis``.

    Both alignment arms share one set of weights. Unless ``base`` already sets
    them, the coarse weight becomes 1 and the buffer weight follows ``alpha_ce``.
    """
    value = str(value).strip()
    if axis == SweepAxis.budget_alpha:
        return {"policy.alpha": value}
    if axis == SweepAxis.buffer_capacity:
        return {"buffer_capacity": value}
    if axis == SweepAxis.alpha_ce:
        return {"weights.alpha_ce": value}
    choices = {
        SweepAxis.selection_policy: {"threshold": Mode.taps, "random": Mode.random_query},
        SweepAxis.eviction_policy: {
            "class_balanced": Mode.taps,
            "random": Mode.random_evict,
        },
        SweepAxis.alignment_granularity: {"fine": Mode.taps, "coarse": Mode.coarse_only},
    }[axis]
    if value not in choices:
        raise InputError(
            f"{axis.value} takes one of {', '.join(choices)}, got {value!r}"
        )
    overrides = {"mode": choices[value].value}
    weights = base.weights
    if axis == SweepAxis.alignment_granularity and weights.beta_coarse + weights.gamma_fine <= 0:
        overrides["weights.beta_coarse"] = "1"
        overrides["weights.gamma_fine"] = util.format_value(weights.alpha_ce)
    return overrides


def run_sweep(
    base: RunConfig, axis: SweepAxis, values: Sequence[Any], seeds: Sequence[int]
) -> List[SweepRow]:
    """Runs every (value, seed) combination of an ablation axis.

    Args:
        base: Configuration shared by every run.
        axis: Ablation axis.
        values: Points on the axis.
        seeds: Seeds; each sets both the run seed and the world seed.

    Returns:
        List[SweepRow]:
        One row per run, values outer and seeds inner.
    """
    if not values:
        raise InputError("a sweep needs at least one value")
    if not seeds:
        raise InputError("a sweep needs at least one seed")
    axis = SweepAxis(axis)
    configs = []
    for value in values:
        overrides = sweep_overrides(axis, value, base)
        mode = overrides.get("mode", base.mode.value)
        if base.mode != Mode.taps and mode != base.mode.value:
            LOGGER.warning(
                "%s=%s runs mode %s instead of the base mode %s",
                axis.value,
                value,
                mode,
                base.mode.value,
            )
        configs.extend(
            (
                value,
                seed,
                with_overrides(base, {**overrides, "seed": seed, "world.seed": seed}),
            )
            for seed in seeds
        )
    rows = []
    for index, (value, seed, cfg) in enumerate(configs, start=1):
        LOGGER.info("Sweep %s=%s seed %d [%d/%d]", axis.value, value, seed, index, len(configs))
        _, summary = run_episode(cfg)
        rows.append(
            SweepRow(
                axis=axis.value,
                value=str(value),
                seed=seed,
                accuracy=summary.accuracy,
                query_ratio=summary.query_ratio,
                n_queried=summary.n_queried,
                mean_f_balance=summary.mean_f_balance,
                mean_step_ms=summary.mean_step_ms,
            )
        )
    return rows


def query_ratio_experiment(
    mu: float,
    sigma: float,
    policy_cfg: PolicyConfig,
    n_steps: int,
    seeds: Sequence[int],
    tolerance: float,
    directory: str,
) -> Dict[str, Any]:
    """Query-ratio simulations over ``seeds`` with CSV and summary output.

    Returns:
        Dict[str, Any]:
        Summary written to ``query_ratio_summary.txt``.
    """
    outcomes: List[QueryRatioOutcome] = []
    for index, seed in enumerate(seeds):
        trace = theory_checks.simulate_query_ratio(mu, sigma, policy_cfg, n_steps, seed)
        outcomes.append(theory_checks.query_ratio_outcome(trace, policy_cfg.alpha, seed))
        if index == 0:
            util.write_table(
                os.path.join(directory, "query_ratio_trace.csv"),
                ["t", "n_queried", "ratio", "regime", "tau"],
                (
                    dict(t=int(t), n_queried=int(n), ratio=float(r), regime=g.value, tau=float(u))
                    for t, n, r, g, u in zip(
                        trace.t, trace.n_queried, trace.ratio, trace.regime, trace.tau
                    )
                ),
            )
    util.write_models(
        os.path.join(directory, "query_ratio.csv"), QueryRatioOutcome, outcomes
    )
    within = sum(o.deviation <= tolerance for o in outcomes)
    summary = dict(
        seeds=len(outcomes),
        n_steps=n_steps,
        alpha=policy_cfg.alpha,
        switch_ratio=policy_cfg.switch_level,
        tolerance=tolerance,
        within_tolerance=within,
        pass_fraction=within / len(outcomes),
        mean_deviation=float(np.mean([o.deviation for o in outcomes])),
        max_deviation=max(o.deviation for o in outcomes),
        mean_strict_occupancy=float(np.mean([o.strict_occupancy for o in outcomes])),
    )
    util.emit_summary(summary, os.path.join(directory, "query_ratio_summary.txt"))
    LOGGER.info(
        "Query ratio within %.3f of %.3f for %d/%d seeds",
        tolerance,
        policy_cfg.alpha,
        within,
        len(outcomes),
    )
    return summary


def buffer_balance_experiment(
    k_classes: int,
    capacity: int,
    budget: int,
    class_dist: Optional[Sequence[float]],
    seeds: Sequence[int],
    directory: str,
) -> Dict[str, Any]:
    """Buffer-balance simulations over ``seeds`` with CSV and summary output.

    Returns:
        Dict[str, Any]:
        Summary written to ``buffer_balance_summary.txt``.
    """
    outcomes: List[BalanceOutcome] = []
    for index, seed in enumerate(seeds):
        trace = theory_checks.simulate_buffer_balance(
            k_classes, capacity, budget, class_dist, seed
        )
        outcomes.append(theory_checks.balance_outcome(trace, k_classes, seed))
        if index == 0:
            columns = ["step", "label", "f_balance"] + [
                f"count_{c}" for c in range(k_classes)
            ]
            util.write_table(
                os.path.join(directory, "buffer_balance_trace.csv"),
                columns,
                (
                    dict(
                        step=step,
                        label=int(trace.labels[step]),
                        f_balance=float(trace.f_balance[step]),
                        **{f"count_{c}": int(n) for c, n in enumerate(trace.counts[step])},
                    )
                    for step in range(len(trace.labels))
                ),
            )
    util.write_models(
        os.path.join(directory, "buffer_balance.csv"), BalanceOutcome, outcomes
    )
    reached = [o for o in outcomes if o.first_equilibrium_step is not None]
    summary = dict(
        seeds=len(outcomes),
        k_classes=k_classes,
        capacity=capacity,
        budget=budget,
        reached_equilibrium=len(reached),
        equilibrium_held=sum(o.equilibrium_held for o in outcomes),
        non_increasing=sum(o.non_increasing for o in outcomes),
        pass_fraction=sum(o.equilibrium_held and o.non_increasing for o in outcomes)
        / len(outcomes),
    )
    util.emit_summary(summary, os.path.join(directory, "buffer_balance_summary.txt"))
    LOGGER.info(
        "Balance equilibrium held in %d/%d runs",
        summary["equilibrium_held"],
        len(outcomes),
    )
    return summary


def failure_rate_experiment(
    k_classes: int,
    capacity: int,
    budgets: Sequence[int],
    trials: int,
    seed: int,
    directory: str,
) -> List[FailureRateRow]:
    """Failure-probability table written to ``failure_rate.csv``."""
    rows = theory_checks.failure_rate_vs_budget(k_classes, capacity, budgets, trials, seed)
    util.write_models(os.path.join(directory, "failure_rate.csv"), FailureRateRow, rows)
    for row in rows:
        LOGGER.info("B=%d: failure rate %.4f", row.budget, row.failure_rate)
    return rows


def dump_stream(cfg: RunConfig, filepath: str) -> str:
    """Writes the test stream as ``sample_id, label, x0..x{d-1}`` rows."""
    inputs, labels = stream_sim.draw_stream(cfg.world)
    columns = ["sample_id", "label"] + [f"x{i}" for i in range(cfg.world.dim)]
    return util.write_table(
        filepath,
        columns,
        (
            dict(
                sample_id=index,
                label=int(label),
                **{f"x{i}": float(v) for i, v in enumerate(x)},
            )
            for index, (x, label) in enumerate(zip(inputs, labels))
        ),
    )
