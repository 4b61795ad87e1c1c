import pytest
from hypothesis import given
from hypothesis import strategies as st

from skipformer.policy import (
    ALL_TOKENS,
    EXECUTE,
    GENERATED_ONLY,
    ActionKind,
    ComputePolicy,
    Mode,
    PolicyError,
    TokenClass,
    action_for,
    resolve_schedule,
    skipped_fraction,
)


def brute_affected(sl, interval, n):
    # enumerate the predicate directly
    return {l for l in range(n) if l >= sl and (l - sl) % interval == 0}


def kinds(schedule):
    return [a.kind for a in schedule.in_scope_actions]


def test_half_the_blocks_example():
    s = resolve_schedule(ComputePolicy(Mode.SKIP_BLOCK, 0, 2), 8)
    assert set(s.affected_layers()) == {0, 2, 4, 6}
    assert all(k is ActionKind.SKIP_BLOCK for i, k in enumerate(kinds(s)) if i % 2 == 0)


def test_dense_all_execute():
    s = resolve_schedule(ComputePolicy(Mode.DENSE, 3, 5, ALL_TOKENS), 7)
    assert s.in_scope_actions == (EXECUTE,) * 7


def test_skip_block_from_layer_four():
    s = resolve_schedule(ComputePolicy(Mode.SKIP_BLOCK, 4, 2), 12)
    assert s.affected_layers() == [4, 6, 8, 10]
    assert skipped_fraction(s) == pytest.approx(4 / 12)


def test_parallel_blocks_pairs():
    s = resolve_schedule(ComputePolicy(Mode.PARALLEL_BLOCKS, 2, 2), 8)
    acts = s.in_scope_actions
    assert acts[0] == acts[1] == EXECUTE
    for lead in (2, 4, 6):
        assert acts[lead].kind is ActionKind.PARALLEL_LEAD and acts[lead].partner == lead + 1
        assert acts[lead + 1].kind is ActionKind.PARALLEL_ABSORBED


def test_parallel_blocks_dangling_lead_stays_execute():
    s = resolve_schedule(ComputePolicy(Mode.PARALLEL_BLOCKS, 1, 2), 4)
    assert kinds(s) == [ActionKind.EXECUTE, ActionKind.PARALLEL_LEAD, ActionKind.PARALLEL_ABSORBED,
                        ActionKind.EXECUTE]


def test_invalid_policies():
    with pytest.raises(PolicyError):
        ComputePolicy(Mode.PARALLEL_BLOCKS, 0, 1)
    with pytest.raises(PolicyError):
        resolve_schedule(ComputePolicy(Mode.SKIP_BLOCK, 9, 2), 8)
    with pytest.raises(PolicyError):
        ComputePolicy(Mode.SKIP_BLOCK, 0, 0)
    with pytest.raises(PolicyError):
        ComputePolicy(scope=frozenset())


def test_action_for_scope():
    s = resolve_schedule(ComputePolicy(Mode.SKIP_BLOCK, 0, 2), 4)
    assert action_for(s, 0, TokenClass.PERCEPTUAL, GENERATED_ONLY) == EXECUTE
    assert action_for(s, 0, TokenClass.TEXT, ALL_TOKENS).kind is ActionKind.SKIP_BLOCK
    assert action_for(s, 2, TokenClass.GENERATED, GENERATED_ONLY).kind is ActionKind.SKIP_BLOCK
    assert action_for(s, 1, TokenClass.GENERATED, GENERATED_ONLY) == EXECUTE


def test_skipped_fraction():
    assert skipped_fraction(resolve_schedule(ComputePolicy(Mode.SKIP_BLOCK, 0, 2), 32)) == 0.5
    assert skipped_fraction(resolve_schedule(ComputePolicy(), 32)) == 0.0
    # layers 4, 7, ..., 31: ten of them
    assert skipped_fraction(resolve_schedule(ComputePolicy(Mode.SKIP_FFN, 4, 3), 32)) == 10 / 32


def test_policy_json_fragment():
    p = ComputePolicy.from_dict({"mode": "skip_sa", "start_layer": 2, "interval": 3, "scope": "all"})
    assert p == ComputePolicy(Mode.SKIP_SA, 2, 3, ALL_TOKENS)
    assert p.to_dict() == {"mode": "skip_sa", "start_layer": 2, "interval": 3, "scope": "all"}
    with pytest.raises(PolicyError, match="policy.mode"):
        ComputePolicy.from_dict({"mode": "skip_everything"})
    with pytest.raises(PolicyError, match="policy.scope"):
        ComputePolicy.from_dict({"scope": "prompt"})


modes = st.sampled_from([m for m in Mode if m is not Mode.PARALLEL_BLOCKS])


@given(modes, st.integers(0, 12), st.integers(1, 6), st.integers(1, 12))
def test_affected_set_matches_predicate(mode, sl, interval, n):
    if sl > n:
        return
    s = resolve_schedule(ComputePolicy(mode, sl, interval), n)
    expected = set() if mode is Mode.DENSE else brute_affected(sl, interval, n)
    assert set(s.affected_layers()) == expected
    assert s == resolve_schedule(ComputePolicy(mode, sl, interval), n)


@given(st.integers(0, 12), st.integers(2, 6), st.integers(1, 12))
def test_parallel_pairing_invariants(sl, interval, n):
    if sl > n:
        return
    acts = resolve_schedule(ComputePolicy(Mode.PARALLEL_BLOCKS, sl, interval), n).in_scope_actions
    leads = [l for l, a in enumerate(acts) if a.kind is ActionKind.PARALLEL_LEAD]
    absorbed = [l for l, a in enumerate(acts) if a.kind is ActionKind.PARALLEL_ABSORBED]
    assert not set(leads) & set(absorbed)
    assert absorbed == [l + 1 for l in leads]
    assert all(acts[l].partner == l + 1 for l in leads)


@given(st.integers(1, 16), st.integers(0, 16))
def test_start_at_or_beyond_depth_is_all_execute(n, extra):
    sl = n
    for mode in Mode:
        interval = 2 if mode is Mode.PARALLEL_BLOCKS else 1 + extra % 4
        s = resolve_schedule(ComputePolicy(mode, sl, interval), n)
        assert s.in_scope_actions == (EXECUTE,) * n


@given(st.integers(0, 10), st.integers(1, 20))
def test_skip_count_monotone_in_interval(sl, n):
    if sl > n:
        return
    counts = [len(resolve_schedule(ComputePolicy(Mode.SKIP_BLOCK, sl, i), n).affected_layers())
              for i in range(1, 8)]
    assert counts == sorted(counts, reverse=True)
