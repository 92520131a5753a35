import datetime as dt
import io

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from incident_rl.event_log import (AGGRESSION_TYPES, COLUMNS, MEASURES, BadDate, EventLog,
                                   Incident, LogFormatConfig, LogParseError, MalformedRow,
                                   UnknownAggression, UnknownMeasure, canonical_measure,
                                   format_log, parse_log, read_log, validate_log, write_log)

from conftest import HELD, SECL, TALK, inc

HEADER = ",".join(COLUMNS) + "\n"


def test_parse_single_measure_row():
    log = parse_log(HEADER + "ab45,2016-01-05,va,family,talk to the client\n")
    (i,) = log.incidents
    assert i == Incident("ab45", dt.date(2016, 1, 5), "va", "family", (TALK,))


def test_parse_empty_measures_cell():
    log = parse_log(HEADER + "ab45,2016-01-06,pp,client,\n")
    assert log.incidents[0].measures == ()


def test_parse_two_measures_round_trip():
    text = HEADER + "lz12,2015-01-06,sib,unknown,seclusion;held with force\n"
    log = parse_log(text)
    assert log.incidents[0].measures == (SECL, HELD)
    assert format_log(log) == text


def test_synonyms_and_case_are_normalised():
    log = parse_log(HEADER + "x,06/01/2016,VA,staff, Talk With Client ;NONE\n")
    (i,) = log.incidents
    assert i.date == dt.date(2016, 1, 6)
    assert i.aggression == "va"
    assert i.measures == (TALK, "no measure taken")


def test_duplicate_measure_dropped_with_warning(caplog):
    log = parse_log(HEADER + "x,2016-01-06,va,staff,talk to the client;talk with client\n")
    assert log.incidents[0].measures == (TALK,)
    assert "duplicate measure" in caplog.text


@pytest.mark.parametrize("row,kind", [
    ("x,2016-01-06,va,staff", MalformedRow),
    (",2016-01-06,va,staff,seclusion", MalformedRow),
    ("x,2016-13-45,va,staff,seclusion", BadDate),
    ("x,2016-01-06,shouting,staff,seclusion", UnknownAggression),
    ("x,2016-01-06,va,staff,dance", UnknownMeasure),
])
def test_bad_rows_raise_typed_errors(row, kind):
    with pytest.raises(LogParseError) as exc:
        parse_log(HEADER + row + "\n")
    (err,) = exc.value.errors
    assert isinstance(err, kind)
    assert str(err).startswith("line 2: ")


def test_all_errors_reported_with_line_numbers():
    text = HEADER + "\n".join([
        "a,2016-01-01,va,staff,seclusion",
        "b,not-a-date,va,staff,seclusion",
        "c,2016-01-01,va,staff,seclusion",
        "d,2016-01-01,zz,staff,seclusion",
    ]) + "\n"
    with pytest.raises(LogParseError) as exc:
        parse_log(text)
    assert [e.line for e in exc.value.errors] == [3, 5]


def test_missing_or_wrong_header():
    with pytest.raises(LogParseError):
        parse_log("")
    with pytest.raises(LogParseError):
        parse_log("a,b,c\n")


def test_custom_delimiter():
    cfg = LogFormatConfig(delimiter="\t")
    log = parse_log("\t".join(COLUMNS) + "\nx\t2016-01-06\tpo\tstaff\tseclusion\n", cfg)
    assert log.incidents[0].aggression == "po"


def test_canonical_measure_unknown():
    with pytest.raises(KeyError):
        canonical_measure("sing a song")


def test_validate_empty_log():
    r = validate_log(EventLog())
    assert r.n_incidents == 0 and r.n_clients == 0 and r.n_empty_measures == 0
    assert set(r.aggression_counts.values()) == {0}
    assert set(r.measure_counts.values()) == {0}


def test_validate_counts():
    log = EventLog((inc("a", 0, "va", TALK), inc("a", 1, "va"), inc("b", 0, "pp", TALK, SECL)))
    r = validate_log(log)
    assert r.aggression_counts == {"va": 2, "pp": 1, "po": 0, "sib": 0}
    assert r.n_clients == 2 and r.n_empty_measures == 1
    assert r.measure_counts[TALK] == 2 and r.measure_counts[SECL] == 1
    assert "incidents: 3" in r.lines()


def test_incident_rejects_bad_values():
    with pytest.raises(ValueError):
        Incident("", dt.date(2016, 1, 1), "va")
    with pytest.raises(ValueError):
        Incident("a", dt.date(2016, 1, 1), "xx")
    with pytest.raises(ValueError):
        Incident("a", dt.date(2016, 1, 1), "va", "", (TALK, TALK))


def test_file_round_trip(tmp_path):
    log = EventLog((inc("a", 0, "va", TALK), inc("b", 3, "sib")))
    path = tmp_path / "log.csv"
    write_log(log, path)
    back = read_log(path)
    assert back.incidents == log.incidents
    assert back.source == str(path)


incidents = st.builds(
    Incident,
    client_id=st.text("abcxyz0123456789", min_size=1, max_size=6),
    date=st.dates(dt.date(2000, 1, 1), dt.date(2030, 12, 31)),
    aggression=st.sampled_from(AGGRESSION_TYPES),
    involved=st.sampled_from(["", "staff", "family", "client"]),
    measures=st.lists(st.sampled_from(MEASURES), unique=True, max_size=3).map(tuple),
)


@settings(max_examples=100, deadline=None)
@given(st.lists(incidents, max_size=20))
def test_format_parse_round_trip_property(items):
    log = EventLog(tuple(items))
    assert parse_log(io.StringIO(format_log(log))).incidents == log.incidents
