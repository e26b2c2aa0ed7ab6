from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vfgrade.sampler import PerClassSampler, SamplerError, epoch_length


@pytest.mark.parametrize("counts, n, expected", [
    ({0: 10, 1: 3, 2: 5, 3: 5}, 1, 3),
    ({0: 6, 1: 6, 2: 6, 3: 6}, 6, 1),
    ({0: 8, 1: 8, 2: 8, 3: 8}, 8, 1),
    ({0: 10, 1: 30, 2: 30, 3: 30}, 6, 1),
])
def test_epoch_length(counts, n, expected):
    assert epoch_length(counts, n) == expected


def test_epoch_length_rejects_small_class():
    with pytest.raises(SamplerError):
        epoch_length({0: 5, 1: 2}, 3)
    with pytest.raises(SamplerError):
        PerClassSampler([0, 0, 1], n=2)


def test_two_class_enumeration():
    # A = indices 0..3, B = indices 4, 5
    s = PerClassSampler([0, 0, 0, 0, 1, 1], n=1, seed=3)
    b1, b2 = s.next_batch(), s.next_batch()
    assert [c for _, c in b1] == [0, 1] and [c for _, c in b2] == [0, 1]
    assert {b1[1][0], b2[1][0]} == {4, 5}
    assert b1[0][0] != b2[0][0]
    assert s.resets == 0
    s.next_batch()
    assert s.resets == 1


def test_batch_of_24():
    labels = np.repeat(np.arange(4), [10, 30, 30, 30])
    s = PerClassSampler(labels, n=6)
    assert len(s.next_batch()) == 24


@settings(max_examples=30, deadline=None)
@given(counts=st.lists(st.integers(1, 12), min_size=1, max_size=4), n=st.integers(1, 3),
       seed=st.integers(0, 1000))
def test_balance_and_no_repeat_within_epoch(counts, n, seed):
    if min(counts) < n:
        return
    labels = np.repeat(np.arange(len(counts)), counts)
    s = PerClassSampler(labels, n=n, seed=seed)
    for _ in range(5):
        seen = []
        for batch in s.epoch():
            per_class = Counter(c for _, c in batch)
            assert all(per_class[c] == n for c in range(len(counts)))
            assert all(labels[i] == c for i, c in batch)
            seen.extend(i for i, _ in batch)
        assert len(seen) == len(set(seen))
        assert len(seen) == epoch_length(dict(enumerate(counts)), n) * n * len(counts)


def test_coverage_rates():
    labels = np.repeat([0, 1], [3, 9])
    s = PerClassSampler(labels, n=1, seed=0)
    epochs = 3000
    seen = Counter(i for _ in range(epochs) for batch in s.epoch() for i, _ in batch)
    assert all(seen[i] == epochs for i in range(3))
    big = np.array([seen[i] for i in range(3, 12)]) / epochs
    assert abs(big.mean() - 3 / 9) <= 0.1 * 3 / 9


def test_deterministic_and_state_round_trip():
    labels = np.repeat(np.arange(4), [4, 7, 5, 9])
    a = PerClassSampler(labels, n=2, seed=42)
    b = PerClassSampler(labels, n=2, seed=42)
    assert [a.next_batch() for _ in range(9)] == [b.next_batch() for _ in range(9)]
    state = a.state_dict()
    c = PerClassSampler(labels, n=2, seed=0)
    c.load_state_dict(state)
    assert [a.next_batch() for _ in range(9)] == [c.next_batch() for _ in range(9)]
