import calendar
import csv
import time
from fractions import Fraction

import pytest
from hypothesis import given, strategies as st

from fogstream.model import (
    FIELDS,
    HEADER_LINE,
    AlarmEvent,
    AlarmKind,
    CanonicalTuple,
    DropCode,
    DropReason,
    DuplicateDetail,
    MalformedRecord,
    MissingAttributeValue,
    MissingDetail,
    RawTuple,
    StreamPackage,
    TripReportRow,
    TupleKey,
    WrongAttributeValue,
    format_timestamp,
    is_header,
    parse_raw_record,
    parse_timestamp,
    serialize_record,
    split_record,
    to_raw,
    trip_percent,
    tuple_key,
)


def raw(**overrides) -> RawTuple:
    values = {name: f"v-{name}" for name in FIELDS}
    values.update(
        trip_start="2017-04-15 06:00:00",
        trip_finish="2017-04-15 06:30:00",
        lat="46.1",
        lng="-64.8",
        timestamp="2017-04-15 06:00:05",
    )
    values.update(overrides)
    return RawTuple(**values)


def test_schema_has_seventeen_fields_in_order():
    assert len(FIELDS) == 17
    assert FIELDS[0] == "vlr_id" and FIELDS[-1] == "timestamp"
    assert RawTuple._fields == FIELDS
    assert is_header(HEADER_LINE)


@given(st.integers(min_value=0, max_value=4_102_444_799))
def test_timestamp_round_trip(seconds):
    text = format_timestamp(seconds)
    assert parse_timestamp(text) == seconds
    # Independent oracle: the calendar module's UTC conversion.
    assert calendar.timegm(time.strptime(text, "%Y-%m-%d %H:%M:%S")) == seconds


@pytest.mark.parametrize("bad", ["", "yesterday", "2017-13-01 00:00:00", "2017-04-15 24:00:00", "2017-04-15T06:00:00"])
def test_parse_timestamp_rejects(bad):
    with pytest.raises(ValueError):
        parse_timestamp(bad)


def test_epoch_digits_accepted():
    assert parse_timestamp("1492236000") == 1492236000


# NUL never appears in feeds and the stdlib reader refuses it.
field_text = st.text(alphabet=st.characters(blacklist_categories=("Cs",), blacklist_characters="\x00"), max_size=12)


@given(st.lists(field_text, min_size=17, max_size=17))
def test_csv_round_trip_matches_stdlib(values):
    line = serialize_record(values)
    assert parse_raw_record(line) == RawTuple(*values)
    assert next(csv.reader([line])) == values


def test_nul_in_quoted_field_is_malformed():
    with pytest.raises(MalformedRecord):
        split_record('a,"b\x00",c')


def test_wrong_field_count_is_malformed():
    with pytest.raises(MalformedRecord):
        parse_raw_record("a,b,c")


def test_bad_quoting_is_malformed():
    with pytest.raises(MalformedRecord):
        split_record('a,"b"x"c,d')


def test_tuple_key_reports_first_missing_in_schema_order():
    with pytest.raises(MissingAttributeValue) as exc:
        tuple_key(raw(route_id_rta="", vehicle_id_vlr=""))
    assert exc.value.field_name == "route_id_rta"
    with pytest.raises(WrongAttributeValue):
        tuple_key(raw(timestamp="noon"))
    k = tuple_key(raw())
    assert k == TupleKey("v-vehicle_id_vlr", "v-route_id_rta", "v-trip_id_br", parse_timestamp("2017-04-15 06:00:05"))


def test_canonical_row_round_trip():
    c = CanonicalTuple(7, TupleKey("V1", "51", "51-001", 100), "Route 51", 50, 900, 46.1, -64.8, True)
    assert CanonicalTuple.from_row(c.to_row()) == c
    assert c.sort_key == ("51", "51-001", 100, 7)
    r = to_raw(c)
    assert r.vlr_id == "" and r.route_id_rta == "51" and parse_timestamp(r.timestamp) == 100


def test_stream_package_round_trip_and_validation():
    p = StreamPackage("edge-1", 0, 300, 1, ("a,b", 'x,"y"'))
    assert StreamPackage.from_bytes(p.to_bytes()) == p
    with pytest.raises(ValueError):
        StreamPackage("e", 300, 300, 1)


def test_alarm_event_validation_and_json():
    scope = ("51", "51-001", "V1")
    a = AlarmEvent(AlarmKind.MISSING_TUPLES, scope, MissingDetail(100, 120, 3), 300)
    assert AlarmEvent.from_dict(a.to_dict()) == a
    d = AlarmEvent(AlarmKind.DUPLICATE_TUPLES, scope, DuplicateDetail(TupleKey("V1", "51", "51-001", 5), 2), 300)
    assert AlarmEvent.from_dict(d.to_dict()) == d
    with pytest.raises(ValueError):
        AlarmEvent(AlarmKind.MISSING_TUPLES, scope, MissingDetail(100, 105, 0), 0)
    with pytest.raises(ValueError):
        AlarmEvent(AlarmKind.DUPLICATE_TUPLES, scope, MissingDetail(1, 2, 1), 0)


def test_drop_reason_rules():
    assert str(DropReason(DropCode.MISSING_ATTRIBUTE_VALUE, "lat")) == "MissingAttributeValue(lat)"
    with pytest.raises(ValueError):
        DropReason(DropCode.MALFORMED_RECORD, "lat")


def _percent_oracle(performed: int, scheduled: int) -> str:
    # Integer-only half-up rounding of 100 * p / s to two decimals.
    q = Fraction(10000 * performed, scheduled)
    cents = int(q) + (1 if q - int(q) >= Fraction(1, 2) else 0)
    return f"{cents // 100}.{cents % 100:02d}"


@given(st.integers(min_value=1, max_value=10_000), st.data())
def test_percent_matches_integer_oracle(scheduled, data):
    performed = data.draw(st.integers(min_value=0, max_value=scheduled))
    row = TripReportRow("r", scheduled, performed)
    assert row.csv_fields()[3] == _percent_oracle(performed, scheduled)


def test_percent_half_up_boundary():
    # 2/3 = 66.666... rounds up; 1/3 = 33.333... rounds down.
    assert str(trip_percent(1, 8)) == "12.50"
    assert str(trip_percent(1, 16)) == "6.25"
    assert str(trip_percent(1, 3)) == "33.33"
    assert str(trip_percent(2, 3)) == "66.67"
    assert str(trip_percent(0, 0)) == "0.00"
    with pytest.raises(ValueError):
        TripReportRow("r", 1, -1)
