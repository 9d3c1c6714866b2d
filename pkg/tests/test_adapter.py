import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from pytaps import adapter, core_math
from pytaps.adapter import LabeledViews, SourceStats, ViewSet
from pytaps.config import LossWeights

CERTAIN_0 = [5.0, -5.0]
CERTAIN_1 = [-5.0, 5.0]


def stats_of(model, viewset, label_count: int = 1) -> SourceStats:
    """Source statistics equal to the view statistics of ``viewset`` at every layer."""
    with torch.no_grad():
        moments = [adapter.view_statistics(model, viewset, l) for l in range(model.n_layers)]
    mean = np.stack([m.numpy() for m, _ in moments])
    var = np.stack([v.numpy() for _, v in moments])
    return SourceStats(
        global_mean=mean,
        global_var=var,
        class_mean=np.repeat(mean[:, None], label_count, axis=1),
        class_var=np.repeat(var[:, None], label_count, axis=1),
    )


def random_stats(rng, n_layers, k_classes, dim) -> SourceStats:
    """Targets well outside the tanh range, so no L1 term sits at its kink."""
    sign = rng.choice([-1.0, 1.0], size=(n_layers, dim))
    return SourceStats(
        global_mean=sign * rng.uniform(1.5, 2.5, (n_layers, dim)),
        global_var=rng.uniform(1.5, 2.5, (n_layers, dim)),
        class_mean=rng.uniform(1.5, 2.5, (n_layers, k_classes, dim)),
        class_var=rng.uniform(1.5, 2.5, (n_layers, k_classes, dim)),
    )


def test_encode_identity_layer():
    model = adapter.PromptModel([np.eye(3)], np.eye(3), 1.0)
    x = np.array([0.3, -2.0, 1.0])
    features, final = adapter.encode(model, x)
    expected = np.tanh(x) / np.linalg.norm(np.tanh(x))
    assert final.detach().numpy() == pytest.approx(expected, rel=1e-12)
    assert features[0].detach().numpy() == pytest.approx(np.tanh(x), rel=1e-12)


def test_encode_is_deterministic_and_normalized(make_model):
    model = make_model(dim=6)
    x = np.random.default_rng(1).standard_normal((5, 6))
    _, first = adapter.encode(model, x)
    _, second = adapter.encode(model, x)
    assert torch.equal(first, second)
    assert first.norm(dim=-1).detach().numpy() == pytest.approx(np.ones(5))


def test_encode_rejects_dimension_mismatch(make_model):
    with pytest.raises(ValueError):
        adapter.encode(make_model(dim=4), np.zeros(3))


def test_logits():
    model = adapter.PromptModel([np.eye(2)], np.eye(2), 1.0)
    scores = adapter.logits(model, torch.tensor([1.0, 0.0], dtype=adapter.DTYPE))
    assert scores.tolist() == pytest.approx([1.0, 0.0])
    sharper = adapter.PromptModel([np.eye(2)], np.eye(2), 0.5)
    feature = torch.tensor([0.6, 0.8], dtype=adapter.DTYPE)
    assert adapter.logits(sharper, feature).tolist() == pytest.approx(
        (2 * adapter.logits(model, feature)).tolist()
    )


def test_model_validation():
    with pytest.raises(ValueError):
        adapter.PromptModel([np.eye(2)], np.eye(2), 0.0)
    with pytest.raises(ValueError):
        adapter.PromptModel([np.eye(2)], np.zeros((2, 2)), 1.0)
    with pytest.raises(ValueError):
        adapter.PromptModel([np.ones((2, 3))], np.eye(2), 1.0)
    with pytest.raises(ValueError):
        adapter.PromptModel([], np.eye(2), 1.0)


def test_prototypes_are_unit_norm(make_model):
    model = make_model(dim=5, k_classes=4)
    assert model.class_prototypes.norm(dim=1).numpy() == pytest.approx(np.ones(4))


def test_augment_without_noise():
    x = np.array([1.0, 2.0, 3.0])
    viewset = adapter.augment(x, 5, 0.0, 0.0, np.random.default_rng(0))
    assert viewset.n_views == 5
    assert np.array_equal(viewset.views, np.tile(x, (5, 1)))
    assert adapter.augment(x, 1, 1.0, 0.5, np.random.default_rng(0)).n_views == 1


def test_augment_keeps_original_and_masks():
    x = np.arange(1.0, 9.0)
    viewset = adapter.augment(x, 6, 0.0, 0.25, np.random.default_rng(4))
    assert np.array_equal(viewset.views[0], x)
    assert all((view == 0).sum() == 2 for view in viewset.views[1:])


def test_augment_is_seeded():
    x = np.ones(4)
    first = adapter.augment(x, 8, 0.5, 0.25, np.random.default_rng(9))
    second = adapter.augment(x, 8, 0.5, 0.25, np.random.default_rng(9))
    assert np.array_equal(first.views, second.views)
    with pytest.raises(ValueError):
        adapter.augment(x, 0, 0.5, 0.25, np.random.default_rng(9))


def test_confidence_filter_counts():
    assert adapter.n_confident(64, 0.10) == 7
    assert adapter.n_confident(16, 0.25) == 4
    assert adapter.n_confident(3, 0.01) == 1
    probs = np.full((4, 2), 0.5)
    assert adapter.confidence_filter(probs, 1.0).all()
    assert adapter.confidence_filter(probs, 0.5).tolist() == [True, True, False, False]
    with pytest.raises(ValueError):
        adapter.confidence_filter(probs, 0.0)


@given(
    st.integers(min_value=1, max_value=64),
    st.integers(min_value=2, max_value=6),
    st.floats(min_value=0.01, max_value=1.0),
    st.integers(min_value=0, max_value=2**32 - 1),
)
def test_confidence_filter_matches_brute_force(n_views, k_classes, rho, seed):
    probs = np.random.default_rng(seed).dirichlet(np.ones(k_classes), size=n_views)
    probs = probs / probs.sum(axis=1, keepdims=True)
    entropies = [core_math.entropy(p) for p in probs]
    keep = sorted(range(n_views), key=lambda i: (entropies[i], i))
    keep = keep[: max(1, math.ceil(round(rho * n_views, 9)))]
    expected = np.zeros(n_views, dtype=bool)
    expected[keep] = True
    assert np.array_equal(adapter.confidence_filter(probs, rho), expected)


def test_marginal_entropy_examples(two_class_model):
    certain = ViewSet(views=[CERTAIN_0])
    assert float(adapter.marginal_entropy_loss(two_class_model, certain)) == pytest.approx(
        0.0, abs=1e-12
    )
    opposite = ViewSet(views=[CERTAIN_0, CERTAIN_1])
    assert float(adapter.marginal_entropy_loss(two_class_model, opposite)) == pytest.approx(
        math.log(2)
    )


def test_marginal_entropy_of_identical_views(make_model):
    model = make_model(dim=4, k_classes=3)
    x = np.array([0.2, -0.4, 1.0, 0.0])
    viewset = ViewSet(views=np.tile(x, (5, 1)))
    with torch.no_grad():
        single = core_math.softmax(model(adapter.as_tensor(x)).numpy())
        loss = float(adapter.marginal_entropy_loss(model, viewset))
    assert loss == pytest.approx(core_math.entropy(single), rel=1e-10)


def test_marginal_entropy_uses_kept_views_only(two_class_model):
    viewset = ViewSet(views=[CERTAIN_0, CERTAIN_1], kept_mask=[True, False])
    assert float(adapter.marginal_entropy_loss(two_class_model, viewset)) == pytest.approx(
        0.0, abs=1e-12
    )


def test_filtered_entropy_refilters(make_model):
    model = make_model(dim=4, k_classes=3, temperature=0.5)
    viewset = adapter.augment(np.ones(4), 8, 0.5, 0.0, np.random.default_rng(0))
    filtered = adapter.filter_views(model, viewset, 0.25)
    assert filtered.n_kept == 2
    with torch.no_grad():
        expected = float(adapter.marginal_entropy_loss(model, filtered))
    assert adapter.filtered_entropy(model, viewset, 0.25) == expected


def test_view_statistics():
    model = adapter.PromptModel([np.eye(3)], np.eye(3), 1.0)
    x = np.array([0.5, -1.0, 2.0])
    mean, var = adapter.view_statistics(model, ViewSet(views=np.tile(x, (4, 1))), 0)
    assert mean.detach().numpy() == pytest.approx(np.tanh(x))
    assert var.detach().numpy() == pytest.approx(np.zeros(3), abs=1e-15)

    mean, var = adapter.view_statistics(model, ViewSet(views=[x, -x]), 0)
    assert mean.detach().numpy() == pytest.approx(np.zeros(3), abs=1e-15)
    assert var.detach().numpy() == pytest.approx(np.tanh(x) ** 2)

    mean, var = adapter.view_statistics(model, ViewSet(views=[x]), 0)
    assert var.detach().numpy() == pytest.approx(np.zeros(3), abs=1e-15)


def test_alignment_is_zero_at_source_statistics(make_model):
    model = make_model(dim=4, k_classes=3)
    viewset = adapter.augment(np.ones(4), 6, 0.5, 0.25, np.random.default_rng(3))
    stats = stats_of(model, viewset, label_count=3)
    assert float(adapter.coarse_alignment_loss(model, viewset, stats)) == 0.0
    assert float(adapter.fine_alignment_loss(model, viewset, stats, 2)) == 0.0


def test_coarse_alignment_arithmetic():
    model = adapter.PromptModel([np.eye(2)], np.eye(2), 1.0)
    viewset = ViewSet(views=[[0.3, -0.7], [1.1, 0.2]])
    base = stats_of(model, viewset)
    shifted = SourceStats(
        global_mean=base.global_mean + np.array([0.5, -0.5]),
        global_var=base.global_var,
        class_mean=base.class_mean,
        class_var=base.class_var,
    )
    assert float(adapter.coarse_alignment_loss(model, viewset, shifted)) == pytest.approx(1.0)
    doubled = SourceStats(
        global_mean=base.global_mean + np.array([1.0, -1.0]),
        global_var=base.global_var + 0.2,
        class_mean=base.class_mean,
        class_var=base.class_var,
    )
    single = SourceStats(
        global_mean=base.global_mean + np.array([0.5, -0.5]),
        global_var=base.global_var + 0.1,
        class_mean=base.class_mean,
        class_var=base.class_var,
    )
    assert float(adapter.coarse_alignment_loss(model, viewset, doubled)) == pytest.approx(
        2 * float(adapter.coarse_alignment_loss(model, viewset, single))
    )


def test_fine_alignment(make_model):
    model = make_model(dim=3, k_classes=2, n_layers=1)
    viewset = adapter.augment(np.ones(3), 5, 0.3, 0.0, np.random.default_rng(5))
    base = stats_of(model, viewset, label_count=2)
    offset = SourceStats(
        global_mean=base.global_mean,
        global_var=base.global_var,
        class_mean=base.class_mean + np.array([0.0, 0.25])[None, :, None],
        class_var=base.class_var,
    )
    assert float(adapter.fine_alignment_loss(model, viewset, offset, 1)) == pytest.approx(0.75)
    assert float(adapter.fine_alignment_loss(model, viewset, offset, 0)) == pytest.approx(
        0.0, abs=1e-15
    )
    assert float(adapter.fine_alignment_loss(model, viewset, base, 1)) == float(
        adapter.coarse_alignment_loss(model, viewset, base)
    )
    with pytest.raises(ValueError):
        adapter.fine_alignment_loss(model, viewset, base, 2)


def test_cross_entropy_examples(two_class_model):
    assert float(adapter.cross_entropy_loss(two_class_model, CERTAIN_0, 0)) == pytest.approx(
        0.0, abs=1e-12
    )
    uniform = adapter.PromptModel([np.eye(2)], np.ones((4, 2)), 1.0)
    assert float(adapter.cross_entropy_loss(uniform, [0.3, 0.1], 2)) == pytest.approx(
        math.log(4)
    )
    with pytest.raises(ValueError):
        adapter.cross_entropy_loss(uniform, [0.3, 0.1], 4)


def batch_of(model, rng, size: int, n_views: int):
    return [
        LabeledViews(
            input=(x := rng.standard_normal(model.dim)),
            label=int(rng.integers(model.k_classes)),
            viewset=adapter.augment(x, n_views, 0.5, 0.25, rng),
        )
        for _ in range(size)
    ]


def test_composite_loss_terms(make_model):
    rng = np.random.default_rng(8)
    model = make_model(dim=4, k_classes=3)
    viewset = adapter.filter_views(
        model, adapter.augment(rng.standard_normal(4), 6, 0.5, 0.25, rng), 0.5
    )
    stats = random_stats(rng, model.n_layers, model.k_classes, model.dim)
    batch = batch_of(model, rng, 3, 6)

    total, breakdown = adapter.composite_loss(
        model, viewset, batch, stats, LossWeights(alpha_ce=1.0)
    )
    assert float(total) == pytest.approx(breakdown.entropy + breakdown.cross_entropy)
    assert min(breakdown.model_dump().values()) >= 0

    total, breakdown = adapter.composite_loss(
        model, viewset, [], stats, LossWeights(beta_coarse=0.0, gamma_fine=0.0)
    )
    assert float(total) == pytest.approx(breakdown.entropy)
    assert breakdown.cross_entropy == breakdown.fine == 0.0

    zero = LossWeights(alpha_ce=0.0, beta_coarse=0.0, gamma_fine=0.0)
    total, breakdown = adapter.composite_loss(model, viewset, batch, stats, zero)
    assert float(total) == pytest.approx(breakdown.entropy)

    weights = LossWeights(alpha_ce=0.5, beta_coarse=2.0, gamma_fine=1.5)
    total, breakdown = adapter.composite_loss(model, viewset, batch, stats, weights)
    assert breakdown.total == pytest.approx(
        breakdown.entropy
        + 0.5 * breakdown.cross_entropy
        + 2.0 * breakdown.coarse
        + 1.5 * breakdown.fine
    )
    ce = np.mean(
        [adapter.cross_entropy_loss(model, item.input, item.label).item() for item in batch]
    )
    fine = np.mean(
        [
            adapter.fine_alignment_loss(model, item.viewset, stats, item.label).item()
            for item in batch
        ]
    )
    assert breakdown.cross_entropy == pytest.approx(ce)
    assert breakdown.fine == pytest.approx(fine)
    assert breakdown.coarse == pytest.approx(
        adapter.coarse_alignment_loss(model, viewset, stats).item()
    )


def test_buffer_alignment_with_global_targets(make_model):
    rng = np.random.default_rng(21)
    model = make_model(dim=4, k_classes=3)
    viewset = adapter.filter_views(
        model, adapter.augment(rng.standard_normal(4), 6, 0.5, 0.25, rng), 0.5
    )
    stats = random_stats(rng, model.n_layers, model.k_classes, model.dim)
    batch = batch_of(model, rng, 3, 6)
    weights = LossWeights(alpha_ce=1.0, beta_coarse=1.0, gamma_fine=1.0)

    _, by_class = adapter.composite_loss(model, viewset, batch, stats, weights)
    total, by_source = adapter.composite_loss(
        model, viewset, batch, stats, weights, class_targets=False
    )
    coarse = np.mean(
        [adapter.coarse_alignment_loss(model, item.viewset, stats).item() for item in batch]
    )
    assert by_source.fine == pytest.approx(coarse)
    assert by_source.fine != pytest.approx(by_class.fine)
    assert by_source.entropy == by_class.entropy
    assert by_source.coarse == by_class.coarse
    assert total.item() == pytest.approx(
        by_source.entropy + by_source.cross_entropy + by_source.coarse + by_source.fine
    )
    grads = [
        adapter.gradient(
            model,
            lambda m, flag=flag: adapter.composite_loss(
                m, viewset, batch, stats, weights, class_targets=flag
            )[0],
        )
        for flag in (True, False)
    ]
    assert not torch.allclose(*grads)


def test_loss_breakdown_reads_detached_values(make_model):
    rng = np.random.default_rng(3)
    model = make_model()
    viewset = adapter.augment(rng.standard_normal(4), 4, 0.5, 0.0, rng)
    stats = random_stats(rng, model.n_layers, model.k_classes, model.dim)
    weights = LossWeights(alpha_ce=1.0, beta_coarse=1.0, gamma_fine=1.0)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        total, breakdown = adapter.composite_loss(
            model, viewset, batch_of(model, rng, 2, 4), stats, weights
        )
    assert total.requires_grad
    assert breakdown.total == pytest.approx(total.item())


def finite_difference(model, closure, h: float = 1e-5) -> np.ndarray:
    grad = np.zeros(model.dim)
    with torch.no_grad():
        for i in range(model.dim):
            original = model.prompt[i].item()
            model.prompt[i] = original + h
            upper = float(closure(model))
            model.prompt[i] = original - h
            lower = float(closure(model))
            model.prompt[i] = original
            grad[i] = (upper - lower) / (2 * h)
    return grad


def test_gradient_matches_central_differences(make_model):
    failures = []
    for seed in range(100):
        rng = np.random.default_rng(seed)
        dim = int(rng.integers(2, 9))
        k_classes = int(rng.integers(2, 6))
        model = make_model(
            dim=dim,
            k_classes=k_classes,
            n_layers=int(rng.integers(1, 3)),
            temperature=float(rng.uniform(0.5, 1.0)),
            seed=seed,
        )
        n_views = int(rng.integers(2, 7))
        viewset = adapter.filter_views(
            model, adapter.augment(rng.standard_normal(dim), n_views, 0.5, 0.25, rng), 0.5
        )
        batch = batch_of(model, rng, int(rng.integers(0, 4)), n_views)
        stats = random_stats(rng, model.n_layers, k_classes, dim)
        weights = LossWeights(
            alpha_ce=float(rng.uniform(0, 2)),
            beta_coarse=float(rng.uniform(0, 2)),
            gamma_fine=float(rng.uniform(0, 2)),
        )

        def closure(m):
            return adapter.composite_loss(m, viewset, batch, stats, weights)[0]

        analytic = adapter.gradient(model, closure).numpy()
        numeric = finite_difference(model, closure)
        error = np.linalg.norm(analytic - numeric)
        scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic))
        if error > max(1e-4 * scale, 1e-7):
            failures.append(seed)
    assert failures == []


def test_gradient_is_linear_in_the_terms(make_model):
    rng = np.random.default_rng(21)
    model = make_model(dim=5, k_classes=4, seed=21)
    viewset = adapter.filter_views(
        model, adapter.augment(rng.standard_normal(5), 6, 0.5, 0.25, rng), 0.5
    )
    batch = batch_of(model, rng, 3, 6)
    stats = random_stats(rng, model.n_layers, 4, 5)
    weights = LossWeights(alpha_ce=0.7, beta_coarse=1.3, gamma_fine=0.4)
    total = adapter.gradient(
        model, lambda m: adapter.composite_loss(m, viewset, batch, stats, weights)[0]
    )
    terms = (
        adapter.gradient(model, lambda m: adapter.marginal_entropy_loss(m, viewset))
        + 0.7
        * adapter.gradient(
            model,
            lambda m: adapter.cross_entropy_losses(
                m, np.stack([b.input for b in batch]), [b.label for b in batch]
            ).mean(),
        )
        + 1.3 * adapter.gradient(model, lambda m: adapter.coarse_alignment_loss(m, viewset, stats))
        + 0.4
        * adapter.gradient(
            model,
            lambda m: torch.stack(
                [adapter.fine_alignment_loss(m, b.viewset, stats, b.label) for b in batch]
            ).mean(),
        )
    )
    assert total.numpy() == pytest.approx(terms.numpy(), rel=1e-9, abs=1e-12)


def test_gradient_of_prompt_independent_loss(make_model):
    model = make_model()
    grad = adapter.gradient(model, lambda m: torch.tensor(3.0, dtype=adapter.DTYPE))
    assert torch.equal(grad, torch.zeros(model.dim, dtype=adapter.DTYPE))
    grad = adapter.gradient(model, lambda m: m.class_prototypes.sum())
    assert torch.equal(grad, torch.zeros(model.dim, dtype=adapter.DTYPE))


def test_step_edges(make_model):
    model = make_model()
    before = model.prompt.detach().clone()
    adapter.step(model, torch.zeros(model.dim, dtype=adapter.DTYPE), 0.1)
    assert torch.equal(model.prompt.detach(), before)
    adapter.step(model, torch.ones(model.dim, dtype=adapter.DTYPE), 0.0)
    assert torch.equal(model.prompt.detach(), before)
    adapter.step(model, torch.ones(model.dim, dtype=adapter.DTYPE), 0.5)
    assert model.prompt.detach().numpy() == pytest.approx(before.numpy() - 0.5)
    with pytest.raises(ValueError):
        adapter.step(model, torch.ones(model.dim, dtype=adapter.DTYPE), -0.1)


@pytest.mark.parametrize("seed", range(5))
def test_small_step_reduces_loss(make_model, seed):
    model = make_model(dim=4, k_classes=3, seed=seed)
    rng = np.random.default_rng(seed)
    x, label = rng.standard_normal(4), int(rng.integers(3))

    def closure(m):
        return adapter.cross_entropy_loss(m, x, label)

    before = float(closure(model))
    adapter.step(model, adapter.gradient(model, closure), 1e-3)
    assert float(closure(model)) < before


def test_frozen_parts_survive_updates(make_model):
    model = make_model(dim=4, k_classes=3)
    weights = [w.clone() for w in model.layer_weights]
    prototypes = model.class_prototypes.clone()
    rng = np.random.default_rng(0)
    viewset = adapter.augment(rng.standard_normal(4), 6, 0.5, 0.25, rng)
    for _ in range(10):
        grad = adapter.gradient(model, lambda m: adapter.marginal_entropy_loss(m, viewset))
        adapter.step(model, grad, 0.5)
    assert all(torch.equal(a, b) for a, b in zip(weights, model.layer_weights))
    assert torch.equal(prototypes, model.class_prototypes)
    assert [name for name, _ in model.named_parameters()] == ["prompt"]


def test_snapshot_round_trip(make_model):
    model = make_model(dim=3, k_classes=2, n_layers=2, temperature=0.3)
    text = model.to_text()
    assert text.splitlines()[0] == "layers 2"
    restored = adapter.PromptModel.from_text(text)
    assert restored.to_text() == text
    assert torch.equal(restored.prompt.detach(), model.prompt.detach())
    assert torch.equal(restored.class_prototypes, model.class_prototypes)
    with pytest.raises(ValueError):
        adapter.PromptModel.from_text("prompt 3\n0 0 0\n")
