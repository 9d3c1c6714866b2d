"""Prompt-conditioned toy encoder, view pipeline and the composite adaptation loss.

Only the prompt vector is trainable. The frozen encoder is a stack of square
linear maps followed by ``tanh``; the prompt is added to the input before the
first layer, so every layer's features depend on it.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from scipy import special
from torch import nn

from .config import LossWeights
from .models.report import LossBreakdown

DTYPE = torch.float64

ArrayLike = np.ndarray | torch.Tensor | Sequence[float]


def as_tensor(values: ArrayLike) -> torch.Tensor:
    """Converts arrays and sequences to float64 tensors without copying when possible."""
    if isinstance(values, torch.Tensor):
        return values.to(DTYPE)
    return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE)


class PromptModel(nn.Module):
    """Frozen layered encoder, fixed class prototypes and a learnable prompt.

    >>> PromptModel

    """

    def __init__(
        self,
        layer_weights: Sequence[ArrayLike],
        class_prototypes: ArrayLike,
        temperature: float,
        prompt: Optional[ArrayLike] = None,
    ):
        super().__init__()
        if not layer_weights:
            raise ValueError("at least one encoder layer is required")
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature!r}")
        weights = [as_tensor(w).clone() for w in layer_weights]
        dim = weights[0].shape[1]
        for index, weight in enumerate(weights):
            if weight.ndim != 2 or weight.shape != (dim, dim):
                raise ValueError(f"layer {index} must be {dim}x{dim}")
            self.register_buffer(f"weight_{index}", weight)
        prototypes = as_tensor(class_prototypes).clone()
        if prototypes.ndim != 2 or prototypes.shape[1] != dim:
            raise ValueError(f"class prototypes must be Kx{dim}")
        norms = prototypes.norm(dim=1, keepdim=True)
        if torch.any(norms == 0):
            raise ValueError("class prototypes must be non-zero")
        self.register_buffer("class_prototypes", prototypes / norms)
        self.n_layers = len(weights)
        self.temperature = float(temperature)
        initial = torch.zeros(dim, dtype=DTYPE) if prompt is None else as_tensor(prompt)
        self.prompt = nn.Parameter(initial.clone())

    @property
    def dim(self) -> int:
        """Input and feature dimension."""
        return self.prompt.shape[0]

    @property
    def k_classes(self) -> int:
        """Number of class prototypes."""
        return self.class_prototypes.shape[0]

    @property
    def layer_weights(self) -> List[torch.Tensor]:
        """Frozen weight matrices in forward order."""
        return [getattr(self, f"weight_{index}") for index in range(self.n_layers)]

    def with_prototypes(self, class_prototypes: ArrayLike) -> "PromptModel":
        """Same encoder and prompt, different prototypes."""
        return PromptModel(
            self.layer_weights,
            class_prototypes,
            self.temperature,
            prompt=self.prompt.detach(),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Logits for a batch of inputs."""
        _, final = encode(self, x)
        return logits(self, final)

    def to_text(self) -> str:
        """Flat text snapshot: layer dims and weights row-major, prototypes, prompt."""

        def fmt(values: torch.Tensor) -> str:
            return " ".join(repr(float(v)) for v in values.detach().reshape(-1).tolist())

        lines = [f"layers {self.n_layers}"]
        for weight in self.layer_weights:
            lines.append(f"dims {weight.shape[0]} {weight.shape[1]}")
            lines.append(fmt(weight))
        lines.append(f"prototypes {self.k_classes} {self.dim}")
        lines.append(fmt(self.class_prototypes))
        lines.append(f"prompt {self.dim}")
        lines.append(fmt(self.prompt))
        lines.append(f"temperature {self.temperature!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PromptModel":
        """Rebuilds a model written by :meth:`to_text`."""
        lines = iter(text.splitlines())

        def header(name: str) -> List[str]:
            parts = next(lines).split()
            if not parts or parts[0] != name:
                raise ValueError(f"expected {name!r} section in model snapshot")
            return parts[1:]

        def values(rows: int, cols: int) -> np.ndarray:
            return np.array([float(v) for v in next(lines).split()]).reshape(rows, cols)

        n_layers = int(header("layers")[0])
        weights = []
        for _ in range(n_layers):
            rows, cols = map(int, header("dims"))
            weights.append(values(rows, cols))
        k, dim = map(int, header("prototypes"))
        prototypes = values(k, dim)
        (dim,) = map(int, header("prompt"))
        prompt = values(1, dim)[0]
        temperature = float(header("temperature")[0])
        model = cls(weights, prototypes, temperature, prompt=prompt)
        # prototypes were unit-norm when written; keep the exact bits
        model.class_prototypes.copy_(torch.as_tensor(prototypes, dtype=DTYPE))
        return model


def random_layer_weights(
    dim: int, n_layers: int, gain: float, rng: np.random.Generator
) -> List[np.ndarray]:
    """Gaussian square weight matrices scaled by ``gain / sqrt(dim)``."""
    return [
        rng.standard_normal((dim, dim)) * (gain / math.sqrt(dim))
        for _ in range(n_layers)
    ]


def encode(
    model: PromptModel, x: ArrayLike
) -> Tuple[List[torch.Tensor], torch.Tensor]:
    """Runs the frozen encoder on prompt-shifted inputs.

    Args:
        model: Prompt model.
        x: Input of shape ``(..., dim)``.

    Returns:
        Tuple[List[torch.Tensor], torch.Tensor]:
        Per-layer features and the unit-normalized final feature.
    """
    inputs = as_tensor(x)
    if inputs.shape[-1] != model.dim:
        raise ValueError(
            f"input dimension {inputs.shape[-1]} does not match model dimension {model.dim}"
        )
    hidden = inputs + model.prompt
    features = []
    for weight in model.layer_weights:
        hidden = torch.tanh(hidden @ weight.T)
        features.append(hidden)
    return features, nn.functional.normalize(hidden, dim=-1, eps=1e-12)


def logits(model: PromptModel, final: torch.Tensor) -> torch.Tensor:
    """Cosine similarity to each class prototype divided by the temperature."""
    return final @ model.class_prototypes.T / model.temperature


def predict(model: PromptModel, x: ArrayLike) -> int:
    """Predicted class of a single input, lowest index on ties."""
    with torch.no_grad():
        return int(torch.argmax(model(as_tensor(x))).item())


@dataclass
class ViewSet:
    """Augmented views of one sample; ``views[0]`` is the original.

    >>> ViewSet

    """

    views: np.ndarray
    kept_mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.views = np.atleast_2d(np.asarray(self.views, dtype=np.float64))
        if not len(self.views):
            raise ValueError("a view set needs at least one view")
        if self.kept_mask is None:
            self.kept_mask = np.ones(len(self.views), dtype=bool)
        self.kept_mask = np.asarray(self.kept_mask, dtype=bool)

    @property
    def n_views(self) -> int:
        """Number of views, filtered or not."""
        return len(self.views)

    @property
    def n_kept(self) -> int:
        """Number of views that survived confidence filtering."""
        return int(self.kept_mask.sum())


@dataclass
class LabeledViews:
    """A labeled buffer sample together with fresh augmentations of it.

    >>> LabeledViews

    """

    input: np.ndarray
    label: int
    viewset: ViewSet


@dataclass
class SourceStats:
    """Per-layer global and per-class feature moments of the source data.

    Arrays are shaped ``(layers, dim)`` for the global moments and
    ``(layers, classes, dim)`` for the class moments.

    >>> SourceStats

    """

    global_mean: np.ndarray
    global_var: np.ndarray
    class_mean: np.ndarray
    class_var: np.ndarray

    def __post_init__(self):
        if np.any(self.global_var < 0) or np.any(self.class_var < 0):
            raise ValueError("variances must be non-negative")
        if self.class_mean.shape[0] != self.global_mean.shape[0]:
            raise ValueError("class and global statistics must cover the same layers")

    @property
    def n_layers(self) -> int:
        """Number of encoder layers covered."""
        return self.global_mean.shape[0]

    @property
    def k_classes(self) -> int:
        """Number of classes covered."""
        return self.class_mean.shape[1]


def augment(
    x: ArrayLike,
    n_views: int,
    noise_scale: float,
    mask_frac: float,
    rng: np.random.Generator,
) -> ViewSet:
    """Gaussian-noise plus coordinate-dropout views of ``x``; view 0 is untouched.

    Args:
        x: Input vector.
        n_views: Total number of views, original included.
        noise_scale: Standard deviation of the additive noise.
        mask_frac: Fraction of coordinates zeroed in each augmented view.
        rng: Source of randomness.

    Returns:
        ViewSet:
        Unfiltered views.
    """
    if n_views < 1:
        raise ValueError(f"n_views must be at least 1, got {n_views}")
    original = np.asarray(x, dtype=np.float64)
    dim = original.shape[0]
    noisy = original + noise_scale * rng.standard_normal((n_views - 1, dim))
    n_mask = int(round(mask_frac * dim))
    if n_mask and n_views > 1:
        masked = np.argsort(rng.random((n_views - 1, dim)), axis=1)[:, :n_mask]
        np.put_along_axis(noisy, masked, 0.0, axis=1)
    return ViewSet(views=np.vstack([original[None, :], noisy]))


def n_confident(n_views: int, rho: float) -> int:
    """Number of views kept by the confidence filter."""
    # 0.1 * 70 is 7.000000000000001 in float64
    return max(1, math.ceil(round(rho * n_views, 9)))


def confidence_filter(view_probs: ArrayLike, rho: float) -> np.ndarray:
    """Keeps the lowest-entropy fraction ``rho`` of views.

    Args:
        view_probs: One probability vector per view.
        rho: Fraction of views to keep.

    Returns:
        np.ndarray:
        Boolean mask; ties go to the lower view index.
    """
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {rho!r}")
    probs = as_tensor(view_probs).detach().numpy()
    entropies = special.entr(probs).sum(axis=1)
    keep = np.argsort(entropies, kind="stable")[: n_confident(len(probs), rho)]
    mask = np.zeros(len(probs), dtype=bool)
    mask[keep] = True
    return mask


def view_probabilities(model: PromptModel, views: ArrayLike) -> torch.Tensor:
    """Softmax predictions, one row per view."""
    _, final = encode(model, views)
    return torch.softmax(logits(model, final), dim=-1)


def filter_views(model: PromptModel, viewset: ViewSet, rho: float) -> ViewSet:
    """Returns ``viewset`` with its confidence mask recomputed under ``model``."""
    with torch.no_grad():
        probs = view_probabilities(model, viewset.views)
    return ViewSet(views=viewset.views, kept_mask=confidence_filter(probs, rho))


def _marginal_entropy(probs: torch.Tensor) -> torch.Tensor:
    average = probs.mean(dim=0)
    return torch.special.entr(average).sum()


def marginal_entropy_loss(model: PromptModel, viewset: ViewSet) -> torch.Tensor:
    """Entropy of the probability vector averaged over the kept views."""
    probs = view_probabilities(model, viewset.views[viewset.kept_mask])
    return _marginal_entropy(probs)


def filtered_entropy(model: PromptModel, viewset: ViewSet, rho: float) -> float:
    """Marginal entropy after re-filtering the views under the current prompt."""
    with torch.no_grad():
        return marginal_entropy_loss(model, filter_views(model, viewset, rho)).item()


def _moments(features: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean and biased variance over the view axis (second to last)."""
    mean = features.mean(dim=-2)
    var = ((features - mean.unsqueeze(-2)) ** 2).mean(dim=-2)
    return mean, var


def view_statistics(
    model: PromptModel, viewset: ViewSet, layer: int
) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean and biased variance of layer ``layer`` features over all views."""
    features, _ = encode(model, viewset.views)
    return _moments(features[layer])


def _alignment(
    features: List[torch.Tensor], means: torch.Tensor, variances: torch.Tensor
) -> torch.Tensor:
    """Layer-averaged L1 distance between view moments and target moments.

    ``features[l]`` is shaped ``(..., views, dim)`` and the targets
    ``(layers, ..., dim)``.
    """
    total = 0.0
    for layer, layer_features in enumerate(features):
        mean, var = _moments(layer_features)
        total = total + (mean - means[layer]).abs().sum(dim=-1)
        total = total + (var - variances[layer]).abs().sum(dim=-1)
    return total / len(features)


def coarse_alignment_loss(
    model: PromptModel, viewset: ViewSet, stats: SourceStats
) -> torch.Tensor:
    """Alignment of the view moments with the global source moments."""
    if stats.n_layers != model.n_layers:
        raise ValueError("source statistics do not cover every encoder layer")
    features, _ = encode(model, viewset.views)
    return _alignment(
        features, as_tensor(stats.global_mean), as_tensor(stats.global_var)
    )


def fine_alignment_loss(
    model: PromptModel, viewset: ViewSet, stats: SourceStats, label: int
) -> torch.Tensor:
    """Alignment of the view moments with the source moments of class ``label``."""
    if not 0 <= label < stats.k_classes:
        raise ValueError(f"class {label} outside [0, {stats.k_classes})")
    if stats.n_layers != model.n_layers:
        raise ValueError("source statistics do not cover every encoder layer")
    features, _ = encode(model, viewset.views)
    return _alignment(
        features,
        as_tensor(stats.class_mean[:, label]),
        as_tensor(stats.class_var[:, label]),
    )


def cross_entropy_losses(
    model: PromptModel, inputs: ArrayLike, labels: Sequence[int]
) -> torch.Tensor:
    """Per-sample ``-ln p(label)`` on un-augmented inputs."""
    targets = torch.as_tensor(np.asarray(labels, dtype=np.int64))
    if torch.any(targets < 0) or torch.any(targets >= model.k_classes):
        raise ValueError(f"labels must lie in [0, {model.k_classes})")
    scores = model(as_tensor(inputs))
    return nn.functional.cross_entropy(scores, targets, reduction="none")


def cross_entropy_loss(model: PromptModel, x: ArrayLike, label: int) -> torch.Tensor:
    """Supervised cross-entropy of a single labeled input."""
    return cross_entropy_losses(model, as_tensor(x).unsqueeze(0), [label])[0]


def composite_loss(
    model: PromptModel,
    viewset: ViewSet,
    buffer_batch: Sequence[LabeledViews],
    stats: SourceStats,
    weights: LossWeights,
    class_targets: bool = True,
) -> Tuple[torch.Tensor, LossBreakdown]:
    """Unsupervised terms on the current sample plus supervised terms on the buffer.

    Args:
        model: Prompt model.
        viewset: Filtered views of the current (unlabeled) sample.
        buffer_batch: Labeled buffer samples with their own fresh views.
        stats: Source statistics.
        weights: Weights of the cross-entropy, coarse and fine terms.
        class_targets: Aligns buffer samples with the moments of their class.
            When off, the buffer term targets the global moments instead.

    Returns:
        Tuple[torch.Tensor, LossBreakdown]:
        Differentiable total and the value of every term.
    """
    ent = marginal_entropy_loss(model, viewset)
    coarse = coarse_alignment_loss(model, viewset, stats)
    if buffer_batch:
        labels = [item.label for item in buffer_batch]
        ce = cross_entropy_losses(
            model, np.stack([item.input for item in buffer_batch]), labels
        ).mean()
        # identical view counts let the buffer batch go through the encoder at once
        stacked = np.stack([item.viewset.views for item in buffer_batch])
        features, _ = encode(model, stacked)
        if class_targets:
            means, variances = stats.class_mean[:, labels], stats.class_var[:, labels]
        else:
            means, variances = stats.global_mean[:, None], stats.global_var[:, None]
        fine = _alignment(features, as_tensor(means), as_tensor(variances)).mean()
    else:
        ce = torch.zeros((), dtype=DTYPE)
        fine = torch.zeros((), dtype=DTYPE)
    total = (
        ent
        + weights.alpha_ce * ce
        + weights.beta_coarse * coarse
        + weights.gamma_fine * fine
    )
    breakdown = LossBreakdown(
        entropy=ent.detach().item(),
        cross_entropy=ce.detach().item(),
        coarse=coarse.detach().item(),
        fine=fine.detach().item(),
        total=total.detach().item(),
    )
    return total, breakdown


def gradient(
    model: PromptModel, closure: Callable[[PromptModel], torch.Tensor]
) -> torch.Tensor:
    """Gradient of ``closure(model)`` with respect to the prompt only."""
    loss = closure(model)
    if not loss.requires_grad:
        return torch.zeros_like(model.prompt).detach()
    (grad,) = torch.autograd.grad(loss, model.prompt, allow_unused=True)
    if grad is None:
        return torch.zeros_like(model.prompt)
    return grad.detach()


def step(model: PromptModel, grad: torch.Tensor, learning_rate: float) -> PromptModel:
    """One plain gradient-descent update of the prompt, in place."""
    if learning_rate < 0:
        raise ValueError(f"learning rate must be non-negative, got {learning_rate!r}")
    with torch.no_grad():
        model.prompt.sub_(learning_rate * grad)
    return model
