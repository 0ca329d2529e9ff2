import pytest
from hypothesis import given, strategies as st
from hypothesis.stateful import RuleBasedStateMachine, invariant, precondition, rule

from fogstream.fog.database import (
    EvictBeforeUpload,
    StateError,
    StreamDatabase,
    TableState,
    UnknownWindow,
    handle_late,
)
from fogstream.model import CanonicalTuple, TupleKey


def ct(ts, fog_id=1, route="10"):
    return CanonicalTuple(fog_id, TupleKey("V", route, "T", ts), "", 0, 10**9, 0.0, 0.0)


def test_lifecycle_retained_uploaded_evicted():
    db = StreamDatabase(retention_ttl=100)
    table = db.store_table(0, [ct(20), ct(10)])
    assert [t.key.timestamp for t in table.tuples] == [10, 20]  # stored sorted
    assert db.state(0) is TableState.RETAINED and db.retained == [0]
    rows = db.leverage(0)
    assert len(rows) == 2
    db.mark_uploaded(0, now=1000)
    assert db.state(0) is TableState.UPLOADED
    assert db.evict_expired(1099) == []
    assert db.evict_expired(1100) == [0]
    assert db.state(0) is TableState.EVICTED


def test_evict_before_upload_is_rejected():
    db = StreamDatabase()
    db.store_table(0, [])
    with pytest.raises(EvictBeforeUpload):
        db.evict(0)
    db.leverage(0)
    with pytest.raises(EvictBeforeUpload):
        db.evict(0)


def test_illegal_transitions():
    db = StreamDatabase()
    with pytest.raises(UnknownWindow):
        db.state(300)
    db.store_table(0, [])
    with pytest.raises(StateError):
        db.store_table(0, [])
    with pytest.raises(StateError):
        db.mark_uploaded(0, 0)  # not leveraged yet
    db.leverage(0)
    with pytest.raises(StateError):
        db.leverage(0)
    db.mark_uploaded(0, 0)
    with pytest.raises(StateError):
        db.mark_uploaded(0, 0)
    db.evict(0)
    with pytest.raises(StateError):
        db.store_table(0, [])
    with pytest.raises(StateError):
        db.leverage(0)
    with pytest.raises(ValueError):
        StreamDatabase(retention_ttl=-1)


def test_ttl_counts_from_upload_time():
    db = StreamDatabase(retention_ttl=50)
    db.store_table(0, [])
    db.leverage(0)
    db.mark_uploaded(0, now=500)  # stored long before, uploaded late
    assert db.evict_expired(549) == []
    assert db.evict_expired(550) == [0]


def test_late_tuples_are_flagged_not_dropped():
    db = StreamDatabase(period=300)
    assert handle_late(ct(10), db).late is False
    db.store_table(0, [ct(10)])
    db.leverage(0)
    db.mark_uploaded(0, 0)
    assert handle_late(ct(299), db).late is True
    assert handle_late(ct(300), db).late is False


class TableMachine(RuleBasedStateMachine):
    """Random operation sequences never move a table backwards."""

    def __init__(self):
        super().__init__()
        self.db = StreamDatabase(retention_ttl=10, period=1)
        self.model: dict[int, str] = {}
        self.now = 0

    @rule(w=st.integers(0, 5))
    def store(self, w):
        if w in self.model:
            with pytest.raises(StateError):
                self.db.store_table(w, [])
        else:
            self.db.store_table(w, [ct(w)])
            self.model[w] = "R"

    @rule(w=st.integers(0, 5))
    def upload(self, w):
        if self.model.get(w) == "R":
            self.db.leverage(w)
            self.db.mark_uploaded(w, self.now)
            self.model[w] = "U"
        else:
            with pytest.raises(StateError):
                self.db.leverage(w)

    @rule(w=st.integers(0, 5))
    def evict(self, w):
        state = self.model.get(w)
        if state == "U":
            self.db.evict(w)
            self.model[w] = "E"
        else:
            with pytest.raises(StateError):
                self.db.evict(w)

    @precondition(lambda self: self.now < 100)
    @rule(dt=st.integers(0, 20))
    def tick(self, dt):
        self.now += dt
        for w in self.db.evict_expired(self.now):
            assert self.model[w] == "U"
            self.model[w] = "E"

    @invariant()
    def states_agree(self):
        names = {"R": TableState.RETAINED, "U": TableState.UPLOADED, "E": TableState.EVICTED}
        for w, s in self.model.items():
            assert self.db.state(w) is names[s]


TestTableMachine = TableMachine.TestCase


@given(st.lists(st.integers(0, 10**6), max_size=50))
def test_stored_table_is_a_sorted_permutation(stamps):
    db = StreamDatabase()
    ts = [ct(s, fog_id=i) for i, s in enumerate(stamps)]
    table = db.store_table(0, ts)
    assert sorted(table.tuples) == sorted(ts) and table.size == len(ts)
    assert [t.key.timestamp for t in table.tuples] == sorted(stamps)
