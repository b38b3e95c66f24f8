import pytest
from hypothesis import given
from hypothesis import strategies as st

from inband_trace.genealogy import ROOT_PID_NS, GenealogyError, ThreadRecord, ThreadRegistry

NS1 = 4026532201


def rec(tid, parent=None, local=None, ns=NS1):
    if local is None:
        return ThreadRecord.in_root(tid, parent)
    return ThreadRecord(tid, ((ROOT_PID_NS, tid), (ns, local)), 1, parent)


def test_resolve_namespace_local_id():
    reg = ThreadRegistry()
    reg.register_thread(rec(1000))
    reg.register_thread(rec(1234, parent=1000, local=5))
    assert reg.resolve(NS1, 5) == 1234
    assert reg.resolve(ROOT_PID_NS, 1234) == 1234
    assert reg.resolve(NS1, 6) is None
    assert reg.parent_of(1234) == 1000


def test_record_shape_is_checked():
    with pytest.raises(GenealogyError):
        ThreadRecord(1, ((ROOT_PID_NS, 1),), 1)
    with pytest.raises(GenealogyError):
        ThreadRecord(1, ((ROOT_PID_NS, 2),), 0)
    with pytest.raises(GenealogyError):
        ThreadRecord(1, ((NS1, 1),), 0)
    assert rec(7, local=3).local_tid == 3


def test_duplicate_live_registration_raises():
    reg = ThreadRegistry()
    reg.register_thread(rec(1))
    with pytest.raises(GenealogyError):
        reg.register_thread(rec(1))


def test_namespace_collision_between_live_threads_raises():
    reg = ThreadRegistry()
    reg.register_thread(rec(10, local=1))
    with pytest.raises(GenealogyError):
        reg.register_thread(rec(11, local=1))


def test_pid_reuse_after_exit():
    reg = ThreadRegistry()
    reg.register_thread(rec(1))
    reg.register_thread(rec(2, parent=1, local=4))
    reg.mark_exit(2)
    assert reg.resolve(NS1, 4) is None
    reg.register_thread(rec(2, parent=None, local=4))
    assert reg.resolve(NS1, 4) == 2
    assert reg.parent_of(2) is None


def test_reused_tid_does_not_inherit_old_children():
    reg = ThreadRegistry()
    reg.register_thread(rec(1))
    reg.register_thread(rec(2, parent=1))
    reg.mark_exit(1)
    reg.register_thread(rec(1))
    # the old child must not walk into the new incarnation of tid 1
    assert reg.parent_of(2) is None


def test_parent_chain():
    reg = ThreadRegistry()
    reg.register_thread(rec(1))
    reg.register_thread(rec(2, parent=1))
    reg.register_thread(rec(3, parent=2))
    assert reg.parent_of(3) == 2
    assert reg.parent_of(2) == 1
    assert reg.parent_of(1) is None
    assert reg.parent_of(99) is None
    assert list(reg.ancestors(3, 32)) == [2, 1]
    assert list(reg.ancestors(3, 1)) == [2]


def test_unknown_parent_is_tolerated_and_counted():
    reg = ThreadRegistry()
    reg.register_thread(rec(5, parent=4))
    assert reg.parent_of(5) is None
    assert reg.counters["unknown_parent"] == 1


def test_unknown_exit_is_counted():
    reg = ThreadRegistry()
    reg.mark_exit(77)
    reg.register_thread(rec(1))
    reg.mark_exit(1)
    reg.mark_exit(1)
    assert reg.counters["unknown_exit"] == 2


def test_collect_keeps_pinned_and_parents_of_live_children():
    reg = ThreadRegistry()
    reg.register_thread(rec(1))
    reg.register_thread(rec(2, parent=1))
    reg.register_thread(rec(3, parent=2))
    reg.mark_exit(2)
    assert reg.collect(2, lambda t: False) == 0  # 3 still alive below it
    reg.mark_exit(3)
    assert reg.collect(3, lambda t: t == 3) == 0  # pinned by a context
    assert reg.collect(3, lambda t: False) == 2  # 3, then its dead parent 2
    assert 1 in reg and 2 not in reg and 3 not in reg


@st.composite
def spawn_programs(draw):
    """Random create/exit sequences; creates pick a random live parent."""
    return draw(
        st.lists(
            st.tuples(st.sampled_from(["create", "exit"]), st.integers(0, 10**6)),
            max_size=60,
        )
    )


@given(spawn_programs())
def test_namespace_consistency_and_no_live_collision(program):
    reg = ThreadRegistry()
    live: list[int] = []
    next_tid = 100
    next_local = {NS1: 1, NS1 + 1: 1}
    records = {}
    for op, pick in program:
        if op == "create" or not live:
            parent = live[pick % len(live)] if live else None
            ns = NS1 + pick % 2
            r = rec(next_tid, parent=parent, local=next_local[ns], ns=ns)
            next_local[ns] += 1
            reg.register_thread(r)
            records[next_tid] = r
            live.append(next_tid)
            next_tid += 1
        else:
            tid = live.pop(pick % len(live))
            reg.mark_exit(tid)
        seen = set()
        for tid in live:
            for ns, local in records[tid].ns_ids:
                assert reg.resolve(ns, local) == tid
                assert (ns, local) not in seen
                seen.add((ns, local))
        for tid in live:
            # ancestor chains terminate
            assert len(list(reg.ancestors(tid, 10**6))) < len(records)
