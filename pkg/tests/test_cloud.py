import json
from collections import Counter

import pytest
from hypothesis import given, strategies as st

from fogstream.broker import CLOUD_UPLOAD, Broker, Envelope, LocalClient, aggregate
from fogstream.cloud import (
    TRIPS_CSV_HEADER,
    UNSCHEDULED,
    CloudNode,
    CloudStore,
    DecodeError,
    InconsistentSnapshots,
    Totals,
    map_reduce_trips,
    render_trips_table,
    trip_tuple_counts,
    trips_csv,
    totals,
    write_reports,
)
from fogstream.feedgen import Route, Schedule, Trip
from fogstream.fog.node import Task, TaskStatus, eos_upload_payload, upload_payloads
from fogstream.model import CanonicalTuple, TripReportRow, TupleKey


def ct(fog_id, route, trip, ts, vehicle="V"):
    return CanonicalTuple(fog_id, TupleKey(vehicle, route, trip, ts), "", 0, 10**6, 0.0, 0.0)


def table(fog, window, tuples):
    (payload,) = upload_payloads(fog, window, [t.to_row() for t in tuples], 10**6)
    return payload


def sched(layout):
    return Schedule(
        tuple(Route(r, tuple(Trip(t, 0, 600, "V") for t in trips)) for r, trips in layout.items()),
        5,
    )


def test_published_totals_identity():
    t = Totals.from_counts(65_097_658, 38_653_787)
    assert t.arrived == 26_443_871 and t.consistent
    assert 65_097_658 - 38_653_787 == 26_443_871
    text = t.render()
    assert "identity=ok" in text and "26,443,871" in text and "(59.38%)" in text
    with pytest.raises(InconsistentSnapshots):
        Totals(65_097_658, 38_653_787, 26_443_870).check()
    with pytest.raises(InconsistentSnapshots):
        Totals.from_counts(1, 2)


stored = st.lists(
    st.tuples(st.sampled_from(["1", "2", "3"]), st.sampled_from(["a", "b", "c", "d"]), st.integers(0, 100)),
    max_size=80,
    unique=True,
)


@given(stored)
def test_map_reduce_matches_brute_force_group_by(rows):
    store = CloudStore()
    store.ingest_batch(table("f", 0, [ct(i + 1, *r) for i, r in enumerate(rows)]))
    expected = Counter((r, t) for r, t, _ in rows)
    assert trip_tuple_counts(store) == dict(expected)


@given(stored, st.integers(1, 5))
def test_performed_trips_against_direct_count(rows, threshold):
    schedule = sched({"1": ["a", "b"], "2": ["a", "c"]})
    store = CloudStore()
    store.ingest_batch(table("f", 0, [ct(i + 1, *r) for i, r in enumerate(rows)]))
    counts = Counter((r, t) for r, t, _ in rows)
    got = map_reduce_trips(store, schedule, threshold)
    want = [
        TripReportRow("1", 2, sum(counts[("1", t)] >= threshold for t in "ab")),
        TripReportRow("2", 2, sum(counts[("2", t)] >= threshold for t in "ac")),
    ]
    extra = sum(1 for (r, t), n in counts.items() if n >= threshold and (r, t) not in
                {("1", "a"), ("1", "b"), ("2", "a"), ("2", "c")})
    if extra:
        want.append(TripReportRow(UNSCHEDULED, 0, extra))
    assert got == want


def test_redelivery_and_late_duplicates():
    store = CloudStore()
    a, b = ct(1, "1", "a", 0), ct(2, "1", "a", 5)
    assert store.ingest_batch(table("f1", 0, [a, b])).tuples == (a, b)
    assert store.ingest_batch(table("f1", 0, [a, b])) is None  # same fog and ids: redelivery
    assert store.redelivered == 2
    # Same key from another fog: a duplicate that escaped the fog's horizon.
    store.ingest_batch(table("f2", 0, [ct(7, "1", "a", 0)]))
    assert store.rejected_duplicates == 1 and len(store) == 2


def test_store_dump_and_load(tmp_path):
    store = CloudStore()
    store.ingest_batch(table("f", 0, [ct(1, "1", "a", 0)]))
    store.ingest_batch(table("f", 300, [ct(2, "1", "a", 300), ct(3, "2", "b", 301)]))
    store.dump(tmp_path / "b.jsonl")
    again = CloudStore.load(tmp_path / "b.jsonl")
    assert list(again.tuples()) == list(store.tuples())


@pytest.mark.parametrize("payload", [b"not json", b"[]", b'{"type":"table"}', b'{"type":"other"}'])
def test_undecodable_payload(payload):
    with pytest.raises(DecodeError):
        CloudStore().ingest_batch(payload)


def status(task, tin, tout, dropped=None):
    return TaskStatus(task, tin, tout, dropped or {})


def test_totals_from_snapshots_counts_cloud_rejects_as_deleted():
    store = CloudStore()
    store.ingest_batch(table("f1", 0, [ct(1, "1", "a", 0), ct(2, "1", "a", 5)]))
    store.ingest_batch(table("f2", 0, [ct(1, "1", "a", 0)]))
    snaps = [
        (status(Task.ACQUISITION, 6, 5, {"MalformedRecord": 1}),
         status(Task.PROCESSING, 5, 2, {"WrongAttributeValue": 3})),
        (status(Task.ACQUISITION, 2, 2), status(Task.PROCESSING, 2, 1, {"DuplicateTuple": 1})),
    ]
    t = totals(store, snaps)
    assert (t.received, t.deleted, t.arrived, t.quarantined) == (8, 5, 2, 1)
    assert t.deleted_by_reason == {"WrongAttributeValue": 3, "DuplicateTuple": 2}
    with pytest.raises(InconsistentSnapshots):
        totals(store, snaps[:1])


def test_report_rendering_and_empty_store(tmp_path):
    schedule = sched({"2": ["x"], "10": ["y", "z"]})
    rows = map_reduce_trips(CloudStore(), schedule)
    assert [r.csv_fields() for r in rows] == [["10", "2", "0", "0.00"], ["2", "1", "0", "0.00"]]
    assert trips_csv(rows).splitlines()[0] == TRIPS_CSV_HEADER
    table_text = render_trips_table(rows)
    assert table_text.splitlines()[0].split() == ["Bus", "Route", "Scheduled", "trips", "Performed", "trips", "(%)"]
    trips_path, totals_path = write_reports(tmp_path, rows, Totals(0, 0, 0))
    assert trips_path.read_text() == trips_csv(rows)
    assert "received_at_fog=0" in totals_path.read_text()
    with pytest.raises(ValueError):
        map_reduce_trips(CloudStore(), schedule, 0)


def test_cloud_node_ingests_batches_and_waits_for_every_fog():
    broker = Broker()
    cloud = CloudNode(LocalClient(broker, "cloud"), expected_fogs=("f1", "f2"))
    fog = LocalClient(broker, "f1")
    parts = upload_payloads("f1", 0, [ct(i, "1", "a", 5 * i).to_row() for i in range(1, 40)], 8)
    envs = [Envelope(CLOUD_UPLOAD, i + 1, p) for i, p in enumerate(parts)]
    for batch in aggregate(envs, 1500):
        fog.publish(CLOUD_UPLOAD, batch.payload)
    snap = (status(Task.ACQUISITION, 39, 39), status(Task.PROCESSING, 39, 39))
    fog.publish(CLOUD_UPLOAD, eos_upload_payload("f1", snap, 1))
    cloud.step()
    assert len(cloud.store) == 39 and not cloud.finished
    LocalClient(broker, "f2").publish(CLOUD_UPLOAD, eos_upload_payload("f2", (), 0))
    cloud.step()
    assert cloud.finished and cloud.totals().arrived == 39
    assert json.loads(parts[0])["parts"] == 5
