import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from pytaps import adapter, core_math, util
from pytaps.config import EvictionPolicy
from pytaps.label_buffer import BufferEntry, LabelBuffer

counter = itertools.count()


def entry(label: int, ce: float = 0.0, at: int = 0) -> BufferEntry:
    return BufferEntry(
        sample_id=next(counter), input=np.zeros(2), label=label, inserted_at=at, last_ce=ce
    )


def filled(capacity: int, k_classes: int, labels, losses=None) -> LabelBuffer:
    buffer = LabelBuffer(capacity, k_classes)
    losses = losses or [0.0] * len(labels)
    for at, (label, loss) in enumerate(zip(labels, losses)):
        buffer.insert(entry(label, loss, at))
    return buffer


@pytest.mark.parametrize(
    "labels, expected",
    [
        ([0, 0, 1, 1, 2, 2], 0.0),
        ([0] * 6, 8.0),
        ([0, 0, 0, 1, 1, 2], 2.0),
    ],
)
def test_balance_measure(labels, expected):
    assert filled(6, 3, labels).balance_measure() == expected


def test_balance_measure_with_fractional_share():
    # share 7/3
    assert filled(7, 3, [0, 0, 0, 1, 1, 2, 2]).balance_measure() == pytest.approx(4 / 3)


def test_victim_of_single_largest_class():
    buffer = filled(5, 3, [0, 0, 0, 1, 2], [0.9, 0.2, 1.4, 0.1, 0.05])
    victim = buffer.select_victim()
    assert (victim.label, victim.last_ce) == (0, 0.2)


def test_victim_of_tied_classes_uses_average_loss():
    buffer = filled(5, 3, [0, 0, 1, 1, 2], [0.4, 0.6, 0.4, 0.2, 0.0])
    victim = buffer.select_victim()
    assert (victim.label, victim.last_ce) == (1, 0.2)


def test_victim_ties_go_to_lowest_class_then_earliest_entry():
    buffer = filled(4, 2, [1, 1, 0, 0], [0.5] * 4)
    victim = buffer.select_victim()
    assert (victim.label, victim.inserted_at) == (0, 2)

    buffer = filled(3, 2, [0, 0, 0], [0.3] * 3)
    assert buffer.select_victim().inserted_at == 0


def test_victim_requires_full_buffer():
    buffer = filled(3, 2, [0, 1])
    with pytest.raises(ValueError, match="eviction only at capacity"):
        buffer.select_victim()


def test_insert_without_eviction():
    buffer = LabelBuffer(2, 2)
    assert buffer.insert(entry(0)) is None
    assert len(buffer) == 1


def test_insert_evicts_from_largest_class():
    buffer = filled(5, 3, [0, 0, 0, 1, 2], [0.9, 0.2, 1.4, 0.1, 0.05])
    evicted = buffer.insert(entry(1))
    assert evicted.label == 0
    assert buffer.class_counts == [2, 2, 1]
    assert buffer.recount() == buffer.class_counts


@pytest.mark.parametrize("losses", [[0.1, 0.2, 0.3, 0.4, 0.5, 0.6], [0.6, 0.5, 0.4, 0.3, 0.2, 0.1]])
def test_balanced_buffer_stays_in_equilibrium(losses):
    buffer = filled(6, 3, [0, 0, 1, 1, 2, 2], losses)
    buffer.insert(entry(0))
    assert sorted(buffer.class_counts) in ([2, 2, 2], [1, 2, 3])
    assert buffer.balance_measure() in (0.0, 2.0)


def test_insert_rejects_unknown_label():
    with pytest.raises(ValueError):
        LabelBuffer(3, 2).insert(entry(2))


def test_entry_invariants():
    with pytest.raises(ValueError):
        entry(-1)
    with pytest.raises(ValueError):
        entry(0, ce=-0.1)


def test_random_eviction():
    buffer = filled(4, 3, [0, 0, 0, 1])
    rng = np.random.default_rng(3)
    evicted = buffer.insert(entry(2), EvictionPolicy.random, rng)
    assert evicted.label in (0, 1)
    assert len(buffer) == 4
    assert buffer.recount() == buffer.class_counts
    with pytest.raises(ValueError):
        buffer.insert(entry(2), EvictionPolicy.random)


def test_refresh_ce_on_empty_buffer(two_class_model):
    buffer = LabelBuffer(3, 2)
    assert buffer.refresh_ce(two_class_model) is buffer
    assert len(buffer) == 0


def test_refresh_ce_of_certain_prediction(two_class_model):
    buffer = LabelBuffer(3, 2)
    buffer.insert(BufferEntry(0, np.array([5.0, -5.0]), 0, 0, last_ce=3.0))
    buffer.refresh_ce(two_class_model)
    assert buffer.entries[0].last_ce == pytest.approx(0.0, abs=1e-12)


def test_refresh_ce_matches_negative_log_probability(make_model):
    model = make_model(dim=3, k_classes=3)
    x = np.array([0.3, -1.2, 0.8])
    buffer = LabelBuffer(4, 3)
    buffer.insert(BufferEntry(0, x, 0, 0))
    buffer.insert(BufferEntry(1, x, 2, 1))
    buffer.refresh_ce(model)
    with torch.no_grad():
        probs = core_math.softmax(model(adapter.as_tensor(x)).numpy())
    assert buffer.entries[0].last_ce == pytest.approx(-math.log(probs[0]), rel=1e-10)
    assert buffer.entries[1].last_ce == pytest.approx(-math.log(probs[2]), rel=1e-10)


def test_sample_minibatch_edges():
    rng = np.random.default_rng(0)
    assert LabelBuffer(4, 2).sample_minibatch(3, rng) == []
    buffer = filled(4, 2, [0, 1, 0])
    picked = buffer.sample_minibatch(10, rng)
    assert {e.sample_id for e in picked} == {e.sample_id for e in buffer.entries}
    assert len(buffer.sample_minibatch(2, rng)) == 2
    with pytest.raises(ValueError):
        buffer.sample_minibatch(0, rng)


def test_sample_minibatch_is_seeded():
    buffer = filled(10, 2, [0, 1] * 5)
    first = buffer.sample_minibatch(4, np.random.default_rng(11))
    second = buffer.sample_minibatch(4, np.random.default_rng(11))
    assert [e.sample_id for e in first] == [e.sample_id for e in second]


def test_sample_minibatch_is_uniform():
    buffer = filled(5, 5, [0, 1, 2, 3, 4])
    rng = np.random.default_rng(2024)
    draws = [buffer.sample_minibatch(1, rng)[0].label for _ in range(10_000)]
    observed = np.bincount(draws, minlength=5)
    assert stats.chisquare(observed).pvalue > 1e-3


def test_to_csv(tmp_path):
    buffer = filled(3, 2, [0, 1], [0.25, 1 / 3])
    filepath = tmp_path / "nested" / "buffer.csv"
    assert buffer.to_csv(str(filepath)) == str(filepath)
    lines = filepath.read_text().splitlines()
    assert lines[0] == "sample_id,label,inserted_at,last_ce"
    assert lines[1].split(",")[1:] == ["0", "0", "0.25"]
    assert lines[2].split(",")[3] == util.format_value(1 / 3) == "0.333333333333"
    assert len(lines) == 3


def test_empty_buffer_csv_has_a_header(tmp_path):
    filepath = LabelBuffer(2, 2).to_csv(str(tmp_path / "buffer.csv"))
    assert open(filepath).read() == "sample_id,label,inserted_at,last_ce\n"


@st.composite
def insertion_runs(draw):
    k_classes = draw(st.integers(min_value=1, max_value=5))
    capacity = k_classes * draw(st.integers(min_value=1, max_value=20 // k_classes))
    labels = draw(
        st.lists(st.integers(min_value=0, max_value=k_classes - 1), min_size=1, max_size=120)
    )
    losses = draw(
        st.lists(
            st.floats(min_value=0, max_value=5), min_size=len(labels), max_size=len(labels)
        )
    )
    return k_classes, capacity, labels, losses


@given(insertion_runs())
def test_balance_dynamics(run):
    k_classes, capacity, labels, losses = run
    share = capacity // k_classes
    buffer = LabelBuffer(capacity, k_classes)
    for at, (label, loss) in enumerate(zip(labels, losses)):
        was_full = buffer.full
        before = buffer.balance_measure()
        count = buffer.class_counts[label]
        evicted = buffer.insert(entry(label, loss, at))
        after = buffer.balance_measure()
        assert buffer.class_counts == buffer.recount()
        assert sum(buffer.class_counts) == len(buffer) <= capacity
        assert (evicted is not None) == was_full
        if not was_full:
            continue
        assert after <= 2 * capacity * (1 - 1 / k_classes) + 1e-9
        if before == 0:
            assert after in (0.0, 2.0)
        elif count >= share:
            assert after == before
        else:
            assert after == before - 2
