"""Synthetic Gaussian-cluster world: source data, shifted test stream and oracle."""

from collections.abc import Generator
from dataclasses import dataclass, field
from typing import Set, Tuple

import numpy as np
import torch

from . import adapter
from .config import ShiftKind, WorldConfig


class OracleOrderError(RuntimeError):
    """Raised when a label is requested before the sample was evaluated."""


@dataclass(frozen=True)
class StreamSample:
    """One test sample; the label is for the oracle's eyes only.

    >>> StreamSample

    """

    sample_id: int
    input: np.ndarray = field(repr=False)
    true_label: int = field(repr=False)


@dataclass(frozen=True)
class SourceDataset:
    """Labeled source points.

    >>> SourceDataset

    """

    inputs: np.ndarray
    labels: np.ndarray


def _streams(cfg: WorldConfig) -> Tuple[np.random.Generator, ...]:
    """Independent generators for centroids, source draws, shift vectors and the stream."""
    return tuple(
        np.random.default_rng(seq) for seq in np.random.SeedSequence(cfg.seed).spawn(4)
    )


def centroids(cfg: WorldConfig) -> np.ndarray:
    """Class centroids at distance ``class_sep`` from the origin, orthogonal when ``K <= dim``."""
    rng = _streams(cfg)[0]
    directions = rng.standard_normal((cfg.k_classes, cfg.dim))
    if cfg.k_classes <= cfg.dim:
        q, _ = np.linalg.qr(directions.T)
        directions = q.T[: cfg.k_classes]
    else:
        directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return cfg.class_sep * directions


def shift_vectors(cfg: WorldConfig) -> np.ndarray:
    """Per-class offsets applied to the test stream, shape ``(K, dim)``."""
    rng = _streams(cfg)[2]
    if cfg.shift_kind == ShiftKind.none:
        return np.zeros((cfg.k_classes, cfg.dim))
    if cfg.shift_kind == ShiftKind.mean_shift:
        direction = rng.standard_normal(cfg.dim)
        direction /= np.linalg.norm(direction)
        return np.tile(cfg.shift_magnitude * direction, (cfg.k_classes, 1))
    directions = rng.standard_normal((cfg.k_classes, cfg.dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return cfg.shift_magnitude * directions


def make_source(cfg: WorldConfig) -> SourceDataset:
    """Draws ``n_source`` points per class around the class centroids.

    Args:
        cfg: World configuration.

    Returns:
        SourceDataset:
        Inputs grouped by class in ascending label order.
    """
    rng = _streams(cfg)[1]
    means = centroids(cfg)
    labels = np.repeat(np.arange(cfg.k_classes), cfg.n_source)
    noise = rng.standard_normal((len(labels), cfg.dim))
    return SourceDataset(
        inputs=means[labels] + cfg.source_noise * noise, labels=labels
    )


def compute_source_stats(
    model: adapter.PromptModel, dataset: SourceDataset
) -> adapter.SourceStats:
    """Per-layer global and per-class feature moments under the frozen encoder.

    Args:
        model: Prompt model; its prompt is ignored (zero prompt).
        dataset: Labeled source data.

    Returns:
        SourceStats:
        Biased (divide-by-count) means and variances.
    """
    frozen = adapter.PromptModel(
        model.layer_weights, model.class_prototypes, model.temperature
    )
    with torch.no_grad():
        features, _ = adapter.encode(frozen, dataset.inputs)
    features = np.stack([f.numpy() for f in features])
    k_classes = model.k_classes
    counts = np.bincount(dataset.labels, minlength=k_classes)
    if len(counts) > k_classes or np.any(counts == 0):
        raise ValueError("every class needs at least one source point")
    class_mean = np.stack(
        [features[:, dataset.labels == c].mean(axis=1) for c in range(k_classes)], axis=1
    )
    class_var = np.stack(
        [features[:, dataset.labels == c].var(axis=1) for c in range(k_classes)], axis=1
    )
    return adapter.SourceStats(
        global_mean=features.mean(axis=1),
        global_var=features.var(axis=1),
        class_mean=class_mean,
        class_var=class_var,
    )


def draw_stream(cfg: WorldConfig) -> Tuple[np.ndarray, np.ndarray]:
    """The whole test stream as ``(inputs, labels)`` arrays."""
    rng = _streams(cfg)[3]
    labels = rng.choice(cfg.k_classes, size=cfg.stream_len, p=cfg.mix)
    noise = rng.standard_normal((cfg.stream_len, cfg.dim))
    offsets = shift_vectors(cfg)
    inputs = centroids(cfg)[labels] + cfg.source_noise * noise + offsets[labels]
    return inputs, labels


def make_stream(cfg: WorldConfig) -> Generator[StreamSample]:
    """Yields the test stream one sample at a time.

    Yields:
        StreamSample:
        Samples in arrival order.
    """
    inputs, labels = draw_stream(cfg)
    for sample_id, (x, y) in enumerate(zip(inputs, labels)):
        yield StreamSample(sample_id=sample_id, input=x, true_label=int(y))


def oracle(sample: StreamSample) -> int:
    """Returns the true label of ``sample``."""
    return sample.true_label


class Oracle:
    """Label source that only answers for samples that were already evaluated.

    >>> Oracle

    """

    def __init__(self):
        self._evaluated: Set[int] = set()
        self.calls = 0

    def score(self, sample: StreamSample, predicted: int) -> bool:
        """Records the evaluation of ``sample`` and returns whether ``predicted`` is right."""
        self._evaluated.add(sample.sample_id)
        return predicted == sample.true_label

    def evaluated(self, sample: StreamSample) -> bool:
        """Whether ``sample`` has been scored."""
        return sample.sample_id in self._evaluated

    def query(self, sample: StreamSample) -> int:
        """Reveals the label of an evaluated sample."""
        if sample.sample_id not in self._evaluated:
            raise OracleOrderError(
                f"sample {sample.sample_id} was queried before its evaluation"
            )
        self.calls += 1
        return oracle(sample)
