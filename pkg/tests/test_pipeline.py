import zlib

import pytest

from fogstream.broker import Broker, LocalClient
from fogstream.config import parse_config
from fogstream.edge import eos_payload
from fogstream.feedgen import CorruptionPlan, Schedule, corrupt_feed, generate_clean_feed, write_csv
from fogstream.fog import FogConfig, FogNode
from fogstream.model import AlarmKind, MalformedRecord, StreamPackage, parse_timestamp, serialize_record
from fogstream.pipeline import load_edge_records, partition_records, run, run_in_process
from helpers import small_schedule, topology, write_topology


def test_partition_is_route_stable():
    feed, _ = generate_clean_feed(small_schedule({"1": 1, "2": 1, "3": 1}))
    records = [serialize_record(t) for t in feed] + ["garbage"]
    parts = partition_records(records, 2)
    assert sum(map(len, parts)) == len(records)
    assert "garbage" in parts[zlib.crc32(b"") % 2]
    for t in feed:
        assert serialize_record(t) in parts[zlib.crc32(t.route_id_rta.encode()) % 2]


def test_load_edge_records(tmp_path):
    feed, _ = generate_clean_feed(small_schedule())
    write_csv(feed, tmp_path / "feed.csv")
    write_csv(feed[:5], tmp_path / "own.csv")
    obj = {
        "paths": {"feed": "feed.csv", "schedule": "s.json"},
        "edges": [{"edge_id": "a", "source": "own.csv"}, {"edge_id": "b"}, {"edge_id": "c"}],
    }
    out, ledger = load_edge_records(parse_config(obj, tmp_path, env={}))
    assert out["a"] == [serialize_record(t) for t in feed[:5]]
    assert len(out["b"]) + len(out["c"]) == len(feed) and ledger == []

    obj["corruption"] = {"drop_rate": 0.1}
    out, ledger = load_edge_records(parse_config({**obj, "seed": 4}, tmp_path, env={}))
    assert len(out["a"]) == 5  # own sources are never corrupted
    assert ledger == corrupt_feed(feed, CorruptionPlan(drop_rate=0.1, rng_seed=4))[1]


def test_malformed_feed_with_corruption_reports_its_line(tmp_path):
    feed, _ = generate_clean_feed(small_schedule({"1": 1}))
    write_csv(feed[:3], tmp_path / "feed.csv")
    with open(tmp_path / "feed.csv", "a") as fh:
        fh.write("short,row\n")
    topo = parse_config(
        {"paths": {"feed": "feed.csv", "schedule": "s"}, "edges": [{"edge_id": "e"}], "corruption": {}},
        tmp_path,
        env={},
    )
    with pytest.raises(MalformedRecord) as exc:
        load_edge_records(topo)
    assert exc.value.line_no == 5  # header, three records, then the bad one


def test_in_process_run_from_config(tmp_path):
    sched = small_schedule()
    feed, _ = generate_clean_feed(sched)
    write_topology(tmp_path, sched, feed, edges=2, fog_count=2, corruption={"duplicate_rate": 0.1})
    topo = topology(tmp_path, edges=2, fog_count=2, corruption={"duplicate_rate": 0.1})
    result = run(topo, Schedule.load(tmp_path / "schedule.json"))
    t = result.totals
    assert t.received == len(feed) + len([d for d in result.ledger])
    assert t.arrived == len(feed) and t.deleted == len(result.ledger)
    assert sorted(result.snapshots) == ["fog-1", "fog-2"]
    events = [m["event"] for m in result.metrics]
    assert events.count("edge_finished") == 2 and events[-1] == "run_finished"
    assert [r.performed_trips for r in result.rows] == [r.scheduled_trips for r in result.rows]


def test_tcp_and_in_process_agree_on_reports(tmp_path):
    sched = small_schedule({"1": 2, "2": 2, "3": 1})
    feed, _ = generate_clean_feed(sched)
    write_topology(tmp_path, sched, feed)
    settings = dict(seed=5, corruption={"drop_rate": 0.05, "wrong_value_rate": 0.05, "shuffle_window": 20})
    local = run(topology(tmp_path, edges=2, **settings), sched)
    remote = run(topology(tmp_path, edges=2, broker="tcp://127.0.0.1:0", **settings), sched)
    assert remote.totals == local.totals
    assert remote.rows == local.rows


def test_trip_state_survives_a_lagging_edge():
    # Edge "b" races several empty windows ahead while edge "a" still holds
    # the rest of a trip; the gap spanning a's two packages must still be seen.
    sched = small_schedule({"1": 1}, trip_seconds=600)
    feed, _ = generate_clean_feed(sched)
    start = parse_timestamp(feed[0].timestamp)
    base = start - start % 300
    lines = [serialize_record(t) for t in feed]
    first = [x for t, x in zip(feed, lines) if parse_timestamp(t.timestamp) < base + 300]
    rest = [x for t, x in zip(feed, lines) if parse_timestamp(t.timestamp) > base + 305]

    broker = Broker()
    fog = FogNode(FogConfig(edges=("a", "b")), LocalClient(broker, "fog"))
    a, b = LocalClient(broker, "a"), LocalClient(broker, "b")
    a.publish("packages/a", StreamPackage("a", base, base + 300, 1, tuple(first)).to_bytes())
    for k in range(6):
        w = base + 300 * k
        b.publish("packages/b", StreamPackage("b", w, w + 300, k + 1, ()).to_bytes())
    a.publish("packages/a", StreamPackage("a", base + 300, base + 600, 2, tuple(rest)).to_bytes())
    a.publish("control/a", eos_payload("a", 2, 0))
    b.publish("control/b", eos_payload("b", 6, 0))
    fog.step()
    assert fog.finished
    gaps = [x.detail for x in fog.alarms if x.kind is AlarmKind.MISSING_TUPLES]
    assert [(g.gap_start - base, g.gap_end - base, g.estimated_missing) for g in gaps] == [(295, 310, 2)]


def test_run_in_process_with_no_records():
    sched = small_schedule()
    topo = parse_config({"paths": {"feed": "f", "schedule": "s"}, "edges": [{"edge_id": "e"}]}, env={})
    result = run_in_process(topo, sched, {})
    assert result.totals.received == 0 and all(r.performed_trips == 0 for r in result.rows)
