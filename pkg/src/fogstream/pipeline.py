"""End-to-end orchestration: edges -> broker -> fogs -> cloud.

Startup order is broker, cloud, fogs, edges, so every subscriber exists
before the first publish; shutdown runs the other way once the
end-of-stream markers have reached the cloud.

The in-process runner is a deterministic discrete-event loop over a
simulated clock: record arrivals from all edges are merged by time, every
edge is ticked when the clock moves, and fogs and the cloud are pumped
until quiet after each publish.  The TCP runner uses real threads and
sockets instead.
"""

from __future__ import annotations

import heapq
import logging
import threading
import time
import zlib
from dataclasses import dataclass, field
from operator import itemgetter
from typing import Callable, Optional, Sequence

from fogstream.broker import ALARMS, Broker, LocalClient
from fogstream.broker.tcp import BrokerClient, BrokerServer
from fogstream.cloud import CloudNode, CloudStore, InconsistentSnapshots, Totals, map_reduce_trips
from fogstream.config import TopologyConfig
from fogstream.edge import EdgeConfig, EdgeNode, SimClock, replay, run_edge
from fogstream.feedgen import Defect, Schedule, corrupt_feed, iter_records
from fogstream.fog import FogConfig, FogNode, PipelineInvariantError, TaskStatus
from fogstream.model import FIELD_INDEX, MalformedRecord, TripReportRow, parse_raw_record, serialize_record, split_record

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    rows: list[TripReportRow]
    totals: Totals
    store: CloudStore
    snapshots: dict[str, tuple[TaskStatus, ...]]
    alarms: list[bytes] = field(default_factory=list)
    metrics: list[dict] = field(default_factory=list)
    fogs: list[FogNode] = field(default_factory=list)
    ledger: list[Defect] = field(default_factory=list)
    reconnects: int = 0


# --- feed loading ---------------------------------------------------------------


def read_numbered(path) -> list[tuple[int, str]]:
    """Records of a CSV file with the line each starts on; the header is skipped."""
    with open(path, encoding="utf-8", newline="") as fh:
        return list(iter_records(fh))


def read_records(path) -> list[str]:
    return [text for _, text in read_numbered(path)]


def _route_of(text: str) -> str:
    try:
        fields = split_record(text)
    except MalformedRecord:
        return ""
    i = FIELD_INDEX["route_id_rta"]
    return fields[i] if len(fields) > i else ""


def partition_records(records: Sequence[str], n: int) -> list[list[str]]:
    """Route-stable split of raw records; unparseable ones go with route ''."""
    parts: list[list[str]] = [[] for _ in range(n)]
    for rec in records:
        parts[zlib.crc32(_route_of(rec).encode()) % n].append(rec)
    return parts


def load_edge_records(topo: TopologyConfig) -> tuple[dict[str, list[str]], list[Defect]]:
    """Records per edge, plus the corruption ledger when the config asks for one.

    Edges with their own ``source`` read it verbatim.  The others share
    ``paths.feed``, split by route; the optional corruption plan (seeded
    from the config seed) is applied to that shared feed first.
    """
    out: dict[str, list[str]] = {}
    shared = [e for e in topo.edges if e.source is None]
    for e in topo.edges:
        if e.source is not None:
            out[e.edge_id] = read_records(e.source)
    ledger: list[Defect] = []
    plan = topo.corruption_plan()
    if shared or plan is not None:
        numbered = read_numbered(topo.paths.feed)
        records = [text for _, text in numbered]
        if plan is not None:
            feed = []
            for line_no, text in numbered:
                try:
                    feed.append(parse_raw_record(text))
                except MalformedRecord as exc:
                    raise MalformedRecord(exc.reason, line_no, text) from None
            corrupted, ledger = corrupt_feed(feed, plan)
            records = [serialize_record(t) for t in corrupted]
        for e, part in zip(shared, partition_records(records, len(shared)) if shared else []):
            out[e.edge_id] = part
    return out, ledger


def fog_configs(topo: TopologyConfig) -> list[FogConfig]:
    assigned: dict[str, list[str]] = {f: [] for f in topo.fog_ids}
    for i, e in enumerate(topo.edges):
        assigned[topo.fog_of(i)].append(e.edge_id)
    return [
        FogConfig(
            fog_id=f,
            edges=tuple(edges),
            cadence=topo.cadence,
            slack=topo.slack,
            period=topo.package_period,
            retention_ttl=topo.retention,
            dedup_horizon=topo.dedup_horizon,
            quarantine_dir=topo.paths.quarantine,
        )
        for f, edges in assigned.items()
    ]


def _finish(
    topo: TopologyConfig,
    schedule: Schedule,
    cloud: CloudNode,
    records_in: int,
    metrics: list[dict],
) -> tuple[Totals, list[TripReportRow]]:
    if not cloud.finished:
        missing = sorted(set(cloud.expected) - set(cloud.snapshots))
        raise PipelineInvariantError(f"no end-of-stream from {missing}")
    try:
        tot = cloud.totals()
    except InconsistentSnapshots as exc:
        raise PipelineInvariantError(str(exc)) from exc
    if tot.received != records_in:
        raise PipelineInvariantError(f"edges sent {records_in} records but fogs received {tot.received}")
    rows = map_reduce_trips(cloud.store, schedule, topo.min_tuples_per_trip)
    metrics.append(
        {
            "event": "run_finished",
            "received": tot.received,
            "deleted": tot.deleted,
            "quarantined": tot.quarantined,
            "arrived": tot.arrived,
            "redelivered": cloud.store.redelivered,
            "cloud_rejected_duplicates": cloud.store.rejected_duplicates,
        }
    )
    return tot, rows


# --- in-process -----------------------------------------------------------------


def run_in_process(
    topo: TopologyConfig,
    schedule: Schedule,
    edge_records: dict[str, list[str]],
    *,
    ledger: Sequence[Defect] = (),
) -> RunResult:
    clock = SimClock()
    broker = Broker(clock=clock)
    metrics: list[dict] = []
    alarms: list[bytes] = []

    alarm_log = LocalClient(broker, "alarm-log")
    alarm_log.subscribe([ALARMS])
    cloud = CloudNode(LocalClient(broker, "cloud"), expected_fogs=topo.fog_ids)
    fogs = [FogNode(cfg, LocalClient(broker, cfg.fog_id), on_window=metrics.append) for cfg in fog_configs(topo)]
    edges = [EdgeNode(cfg, LocalClient(broker, cfg.edge_id)) for cfg in topo.edges]

    def drain_alarms() -> int:
        n = 0
        while (d := alarm_log.poll()) is not None:
            alarms.append(d.envelope.payload)
            alarm_log.ack(d)
            n += 1
        return n

    def pump() -> None:
        while sum(f.step() for f in fogs) + cloud.step() + drain_alarms():
            pass

    def arrivals(i: int, edge_id: str):
        for t, rec in replay(edge_records.get(edge_id, [])):
            yield t, i, rec

    streams = [arrivals(i, e.edge_id) for i, e in enumerate(topo.edges)]
    last: Optional[int] = None
    for t, i, rec in heapq.merge(*streams, key=itemgetter(0, 1)):
        clock.advance_to(t)
        sent = False
        if last is None or t > last:
            for e in edges:
                sent = bool(e.tick(t)) or sent
            last = t
        sent = bool(edges[i].offer(t, rec)) or sent
        if sent:
            pump()
    for e in edges:
        e.close(clock.now)
    pump()

    for e in edges:
        metrics.append(
            {
                "event": "edge_finished",
                "edge": e.cfg.edge_id,
                "records": e.records_in,
                "packages": e.packages_published,
                "retries": e.retries,
            }
        )
    tot, rows = _finish(topo, schedule, cloud, sum(e.records_in for e in edges), metrics)
    return RunResult(rows, tot, cloud.store, dict(cloud.snapshots), alarms, metrics, fogs, list(ledger))


# --- TCP ------------------------------------------------------------------------------


class _Worker(threading.Thread):
    def __init__(self, name: str, target: Callable[[], None]):
        super().__init__(name=name, daemon=True)
        self._target_fn = target
        self.error: Optional[BaseException] = None

    def run(self) -> None:
        try:
            self._target_fn()
        except BaseException as exc:  # surfaced by the orchestrator
            self.error = exc
            log.exception("%s failed", self.name)


def run_tcp(
    topo: TopologyConfig,
    schedule: Schedule,
    edge_records: dict[str, list[str]],
    *,
    address: Optional[tuple[str, int]] = None,
    disconnect_after_windows: Optional[int] = None,
    timeout: float = 600.0,
    ledger: Sequence[Defect] = (),
) -> RunResult:
    """Run the topology over loopback TCP with one thread per node.

    With ``disconnect_after_windows`` set, the first fog cuts its own and the
    cloud's connection once it has closed that many windows.
    """
    broker = Broker()
    server = BrokerServer(broker, address or topo.tcp_address or ("127.0.0.1", 0)).start()
    clients: list[BrokerClient] = []
    stop = threading.Event()
    metrics: list[dict] = []
    alarms: list[bytes] = []
    lock = threading.Lock()

    def client(cid: str) -> BrokerClient:
        c = BrokerClient(server.address, cid)
        clients.append(c)
        return c

    try:
        alarm_client = client("alarm-log")
        alarm_client.subscribe([ALARMS])
        cloud_client = client("cloud")
        cloud = CloudNode(cloud_client, expected_fogs=topo.fog_ids)
        fogs: list[FogNode] = []
        for i, cfg in enumerate(fog_configs(topo)):
            fc = client(cfg.fog_id)

            def on_window(ev: dict, fc=fc, first=(i == 0)) -> None:
                with lock:
                    metrics.append(ev)
                if first and disconnect_after_windows is not None and fogs[0].windows_closed == disconnect_after_windows:
                    log.info("forcing disconnect of %s and cloud", fc.client_id)
                    fc.force_disconnect()
                    cloud_client.force_disconnect()

            fogs.append(FogNode(cfg, fc, on_window=on_window))

        def alarm_loop() -> None:
            while not stop.is_set():
                d = alarm_client.get(0.1)
                if d is not None:
                    alarms.append(d.envelope.payload)
                    alarm_client.ack(d)

        edge_nodes_done: dict[str, int] = {}

        def edge_loop(cfg: EdgeConfig, c: BrokerClient) -> Callable[[], None]:
            def go() -> None:
                n = 0
                for pkg in run_edge(cfg, replay(edge_records.get(cfg.edge_id, [])), c):
                    n += len(pkg.records)
                edge_nodes_done[cfg.edge_id] = n

            return go

        cloud_t = _Worker("cloud", lambda: cloud.run(stop))
        fog_ts = [_Worker(f.cfg.fog_id, lambda f=f: f.run(stop)) for f in fogs]
        alarm_t = _Worker("alarm-log", alarm_loop)
        edge_ts = [_Worker(e.edge_id, edge_loop(e, client(e.edge_id))) for e in topo.edges]
        for t in [cloud_t, *fog_ts, alarm_t, *edge_ts]:
            t.start()

        deadline = time.monotonic() + timeout
        workers = [*edge_ts, *fog_ts, cloud_t]
        while not cloud.finished and time.monotonic() < deadline:
            failed = next((w for w in workers if w.error is not None), None)
            if failed is not None:
                break
            time.sleep(0.02)
        stop.set()
        for t in [*edge_ts, *fog_ts, cloud_t, alarm_t]:
            t.join(5.0)
        for w in workers:
            if w.error is not None:
                if isinstance(w.error, PipelineInvariantError):
                    raise w.error
                raise PipelineInvariantError(f"{w.name} failed: {w.error!r}") from w.error
        if not cloud.finished:
            raise PipelineInvariantError(f"pipeline did not finish within {timeout:.0f}s")
        # Alarms published just before the final upload may still be in flight.
        expected_alarms = sum(len(f.alarms) for f in fogs)
        settle = time.monotonic() + 5.0
        while len(alarms) < expected_alarms and time.monotonic() < settle:
            d = alarm_client.get(0.1)
            if d is not None:
                alarms.append(d.envelope.payload)
                alarm_client.ack(d)
        records_in = sum(edge_nodes_done.values())
        tot, rows = _finish(topo, schedule, cloud, records_in, metrics)
        reconnects = sum(max(c.reconnects, 0) for c in clients)
        metrics.append({"event": "tcp_reconnects", "count": reconnects})
        return RunResult(
            rows, tot, cloud.store, dict(cloud.snapshots), alarms, metrics, fogs, list(ledger), reconnects
        )
    finally:
        stop.set()
        for c in reversed(clients):
            c.close()
        server.stop()


def run(topo: TopologyConfig, schedule: Schedule, **kwargs) -> RunResult:
    """Load the edge feeds named by ``topo`` and run in its broker mode."""
    edge_records, ledger = load_edge_records(topo)
    runner = run_in_process if topo.tcp_address is None else run_tcp
    return runner(topo, schedule, edge_records, ledger=ledger, **kwargs)
