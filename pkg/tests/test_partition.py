import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sisa_unlearn.partition import (
    NotFound,
    RiskProfiled,
    Sequential,
    UniformRandom,
    locate,
    make_plan,
    read_plan,
    remove,
    write_plan,
)

shapes = st.tuples(st.integers(1, 6), st.integers(1, 6)).flatmap(
    lambda sr: st.tuples(st.just(sr[0]), st.just(sr[1]), st.integers(sr[0] * sr[1], sr[0] * sr[1] + 60))
)


def _strategies(ids):
    return [UniformRandom(), Sequential(), RiskProfiled({i: (i * 7919) % 13 / 13 for i in ids})]


@settings(max_examples=60, deadline=None)
@given(shapes, st.integers(0, 2**32))
def test_plan_covers_ids_with_balanced_cells(shape, seed):
    S, R, n = shape
    ids = [3 * i + 1 for i in range(n)]
    for strategy in _strategies(ids):
        plan = make_plan(ids, S, R, strategy, seed)
        assert sorted(plan.ordered_ids()) == ids
        sizes = plan.shard_sizes()
        assert max(sizes) - min(sizes) <= 1
        assert sizes == sorted(sizes, reverse=True)
        for s in range(S):
            cells = [len(plan.slice_ids(s, r)) for r in range(R)]
            assert max(cells) - min(cells) <= 1 and cells == sorted(cells, reverse=True)
        assert make_plan(ids, S, R, strategy, seed) == plan


def test_sequential_keeps_input_order():
    ids = list(range(100, 150))
    plan = make_plan(ids, 3, 4, Sequential(), 9)
    assert plan.ordered_ids() == ids
    assert plan.slice_ids(0, 0) == (100, 101, 102, 103, 104)


def test_risk_profiled_orders_within_shards():
    ids = list(range(60))
    scores = {i: ((i * 37) % 11) / 11 for i in ids}
    risk = make_plan(ids, 3, 5, RiskProfiled(scores), 2)
    uniform = make_plan(ids, 3, 5, UniformRandom(), 2)
    for s in range(3):
        members = risk.shard_ids(s)
        assert set(members) == set(uniform.shard_ids(s))
        assert members == sorted(members, key=lambda i: (scores[i], i))


def test_plan_validation():
    with pytest.raises(ValueError):
        make_plan(range(5), 2, 3)
    with pytest.raises(ValueError):
        make_plan([1, 1, 2, 3], 1, 1)
    with pytest.raises(ValueError, match="no risk score"):
        make_plan(range(6), 1, 2, RiskProfiled({0: 0.5}))
    with pytest.raises(ValueError, match="non-finite"):
        RiskProfiled({0: float("nan")})


@settings(max_examples=60, deadline=None)
@given(shapes, st.integers(0, 1000), st.data())
def test_remove_keeps_survivor_positions(shape, seed, data):
    S, R, n = shape
    plan = make_plan(range(n), S, R, UniformRandom(), seed)
    gone = data.draw(st.sets(st.integers(0, n - 1), max_size=min(n, 8)))
    after, affected = remove(plan, gone)
    expected = {}
    for i in gone:
        s, r, _ = locate(plan, i)
        expected[s] = min(r, expected.get(s, r))
    assert affected == expected
    assert list(affected) == sorted(affected)
    for s in range(S):
        for r in range(R):
            assert after.slice_ids(s, r) == tuple(i for i in plan.slice_ids(s, r) if i not in gone)
    assert len(after) == n - len(gone)


def test_remove_is_atomic_on_missing_ids():
    plan = make_plan(range(20), 2, 2)
    with pytest.raises(NotFound) as info:
        remove(plan, [3, 99, 98])
    assert info.value.missing == [98, 99]
    assert len(plan) == 20
    with pytest.raises(NotFound):
        locate(plan, 99)
    assert remove(plan, []) == (plan, {})


def test_plan_file_roundtrip(tmp_path):
    plan = make_plan(range(40), 3, 4, UniformRandom(), 1)
    plan, _ = remove(plan, plan.slice_ids(1, 2))
    write_plan(plan, tmp_path / "plan.tsv")
    back = read_plan(tmp_path / "plan.tsv")
    assert back == plan
    assert back.slice_ids(1, 2) == ()
    assert (tmp_path / "plan.tsv").read_text().startswith("# shards=3 slices=4\n")
