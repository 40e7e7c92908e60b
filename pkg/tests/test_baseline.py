import math

import pytest
from hypothesis import given, strategies as st

from sixvision.addr import Address, EmptySeedSet, parse_address
from sixvision.baseline import EntropyTreeGenerator, build_tree, generate, nybble_entropy

BASE = parse_address("2001:db8::")


def with_nybbles(**pos):
    nyb = list(BASE.nybbles)
    for k, v in pos.items():
        nyb[int(k[1:])] = v
    return Address.from_nybbles(nyb)


def test_nybble_entropy_oracle():
    vals = [0, 0, 1, 2]
    ref = -(0.5 * math.log2(0.5) + 2 * 0.25 * math.log2(0.25)) / 4
    assert nybble_entropy(vals) == pytest.approx(ref)
    assert nybble_entropy([7] * 5) == 0
    assert nybble_entropy(range(16)) == pytest.approx(1.0)


def test_identical_seeds_single_leaf():
    t = build_tree([BASE, BASE])
    assert t.is_leaf and t.seed_count == 1


def test_one_varying_nybble():
    seeds = [with_nybbles(n31=v) for v in (1, 5, 9)]
    t = build_tree(seeds)
    assert t.split_position == 31
    assert sorted(t.children) == [1, 5, 9]


def test_splits_on_lower_entropy_nybble_first():
    # nybble 20 has 2 values (lower entropy), nybble 30 has 4
    seeds = [with_nybbles(n20=a, n30=b) for a, b in [(0, 0), (0, 1), (1, 2), (1, 3)]]
    assert nybble_entropy([0, 0, 1, 1]) < nybble_entropy([0, 1, 2, 3])
    assert build_tree(seeds).split_position == 20


def test_exhaustion_without_widening():
    seeds = [with_nybbles(n31=v) for v in (1, 5, 9)]
    batch = generate(build_tree(seeds), 100)
    assert len(batch) == 13
    assert not set(batch) & set(seeds)


def test_budget_zero():
    assert len(generate(build_tree([BASE, with_nybbles(n31=1)]), 0)) == 0


def test_widening_continues():
    seeds = [with_nybbles(n31=v) for v in (1, 5, 9)]
    batch = generate(build_tree(seeds), 100, widen=True)
    assert len(batch) == 100
    assert len(set(batch)) == 100


def test_empty_seeds():
    with pytest.raises(EmptySeedSet):
        build_tree([])


@given(st.lists(st.integers(0, 2**16 - 1), min_size=1, max_size=30), st.integers(0, 300))
def test_generate_properties(lows, budget):
    seeds = [Address(BASE.value + x) for x in lows]
    excl = {Address(BASE.value + 3)}
    batch = generate(build_tree(seeds), budget, excl, widen=True)
    assert len(batch) <= budget
    assert len(set(batch)) == len(batch)
    assert not set(batch) & (set(seeds) | excl)


def test_estimator():
    est = EntropyTreeGenerator().fit([with_nybbles(n31=v) for v in (1, 2)])
    assert len(est.generate(5)) == 5
    assert est.get_params() == {"widen": False}
