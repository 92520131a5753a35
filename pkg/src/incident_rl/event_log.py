"""Incident event logs: domain alphabets, parsing, validation, writing."""

from __future__ import annotations

import csv
import datetime as dt
import io
import logging
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, TextIO

logger = logging.getLogger(__name__)

COLUMNS = ("client_id", "date", "aggression_type", "involved", "measures")
MEASURE_SEP = ";"


class AggressionType(str, Enum):
    VA = "va"    # verbal aggression
    PP = "pp"    # physical aggression against people
    PO = "po"    # physical aggression against objects
    SIB = "sib"  # self-injurious behaviour


class Measure(str, Enum):
    # declaration order is the canonical tie-break order
    TALK = "talk to the client"
    HELD_WITH_FORCE = "held with force"
    NO_MEASURE = "no measure taken"
    SECLUSION = "seclusion"
    SEND_TO_ROOM = "send to another room"
    DISTRACT = "distract client"
    TERMINATE_CONTACT = "terminate contact"
    PREVENTIVE = "preventive measures started"


AGGRESSION_TYPES = tuple(a.value for a in AggressionType)
MEASURES = tuple(m.value for m in Measure)

MEASURE_SYNONYMS = {
    "talk to client": Measure.TALK,
    "talk with client": Measure.TALK,
    "talk with the client": Measure.TALK,
    "talking to the client": Measure.TALK,
    "none": Measure.NO_MEASURE,
    "no measure": Measure.NO_MEASURE,
    "no action": Measure.NO_MEASURE,
    "secluded": Measure.SECLUSION,
    "hold with force": Measure.HELD_WITH_FORCE,
    "holding with force": Measure.HELD_WITH_FORCE,
    "send to other room": Measure.SEND_TO_ROOM,
    "client distracted": Measure.DISTRACT,
    "contact terminated": Measure.TERMINATE_CONTACT,
    "starting preventive measures": Measure.PREVENTIVE,
    "preventive measures": Measure.PREVENTIVE,
}

# labels used when rendering variants, as the result tables spell them
DISPLAY_NAMES = {
    Measure.TALK.value: "Talk with client",
    Measure.HELD_WITH_FORCE.value: "Hold with force",
    Measure.NO_MEASURE.value: "No measure",
    Measure.SECLUSION.value: "Seclusion",
    Measure.SEND_TO_ROOM.value: "Send to other room",
    Measure.DISTRACT.value: "Client distracted",
    Measure.TERMINATE_CONTACT.value: "Contact terminated",
    Measure.PREVENTIVE.value: "Preventive measures started",
}


class RowError(ValueError):
    """A single bad data row. ``line`` is the 1-based line in the file."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line
        self.message = message


class MalformedRow(RowError):
    pass


class BadDate(RowError):
    pass


class UnknownAggression(RowError):
    pass


class UnknownMeasure(RowError):
    pass


class LogParseError(ValueError):
    """Raised once per parse with every row diagnostic attached."""

    def __init__(self, errors: list[RowError]):
        self.errors = errors
        super().__init__("\n".join(str(e) for e in errors))


@dataclass(frozen=True)
class LogFormatConfig:
    delimiter: str = ","
    date_formats: tuple[str, ...] = ("%Y-%m-%d", "%d/%m/%Y")
    measure_delimiter: str = MEASURE_SEP


@dataclass(frozen=True)
class Incident:
    client_id: str
    date: dt.date
    aggression: str
    involved: str = ""
    measures: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.client_id:
            raise ValueError("client_id must be non-empty")
        if self.aggression not in AGGRESSION_TYPES:
            raise ValueError(f"unknown aggression type {self.aggression!r}")
        if len(set(self.measures)) != len(self.measures):
            raise ValueError("measures contain duplicates")


@dataclass(frozen=True)
class EventLog:
    incidents: tuple[Incident, ...] = ()
    source: str = ""

    def __len__(self):
        return len(self.incidents)

    def __iter__(self):
        return iter(self.incidents)


@dataclass
class ValidationReport:
    n_incidents: int = 0
    n_clients: int = 0
    n_empty_measures: int = 0
    aggression_counts: dict[str, int] = field(default_factory=dict)
    measure_counts: dict[str, int] = field(default_factory=dict)

    def lines(self) -> list[str]:
        out = [
            f"incidents: {self.n_incidents}",
            f"clients: {self.n_clients}",
            f"incidents without measures: {self.n_empty_measures}",
        ]
        out += [f"aggression {k}: {v}" for k, v in self.aggression_counts.items()]
        out += [f"measure {k}: {v}" for k, v in self.measure_counts.items()]
        return out


def canonical_measure(token: str) -> str:
    """Map a raw measure token to its canonical spelling.

    Raises ``KeyError`` for tokens outside the eight known countermeasures.
    """
    t = " ".join(token.strip().lower().split())
    if t in MEASURES:
        return t
    return MEASURE_SYNONYMS[t].value


def _parse_date(text: str, formats: Iterable[str]) -> dt.date:
    for fmt in formats:
        try:
            return dt.datetime.strptime(text.strip(), fmt).date()
        except ValueError:
            continue
    raise ValueError(text)


def _parse_row(row: list[str], line: int, cfg: LogFormatConfig) -> Incident:
    if len(row) != len(COLUMNS):
        raise MalformedRow(line, f"expected {len(COLUMNS)} columns, got {len(row)}")
    client, date_s, aggression, involved, measures_s = (c.strip() for c in row)
    if not client:
        raise MalformedRow(line, "empty client_id")
    try:
        date = _parse_date(date_s, cfg.date_formats)
    except ValueError:
        raise BadDate(line, f"unparseable date {date_s!r}") from None
    aggression = aggression.lower()
    if aggression not in AGGRESSION_TYPES:
        raise UnknownAggression(line, f"unknown aggression type {aggression!r}")
    measures: list[str] = []
    for token in measures_s.split(cfg.measure_delimiter) if measures_s else ():
        if not token.strip():
            continue
        try:
            m = canonical_measure(token)
        except KeyError:
            raise UnknownMeasure(line, f"unknown measure {token.strip()!r}") from None
        if m in measures:
            logger.warning("line %d: duplicate measure %r dropped", line, m)
            continue
        measures.append(m)
    return Incident(client, date, aggression, involved, tuple(measures))


def parse_log(stream: TextIO | str, cfg: LogFormatConfig | None = None,
              source: str = "") -> EventLog:
    """Parse delimited incident rows into an :class:`EventLog`.

    All rows are checked before anything is raised; a :class:`LogParseError`
    carries one diagnostic per bad row.
    """
    cfg = cfg or LogFormatConfig()
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.reader(stream, delimiter=cfg.delimiter)
    try:
        header = next(reader)
    except StopIteration:
        raise LogParseError([MalformedRow(1, "missing header row")]) from None
    if [h.strip().lower() for h in header] != list(COLUMNS):
        raise LogParseError([MalformedRow(1, f"header must be {','.join(COLUMNS)}")])

    incidents, errors = [], []
    line = reader.line_num
    for row in reader:
        line = reader.line_num
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        try:
            incidents.append(_parse_row(row, line, cfg))
        except RowError as e:
            errors.append(e)
    if errors:
        raise LogParseError(errors)
    return EventLog(tuple(incidents), source)


def read_log(path, cfg: LogFormatConfig | None = None) -> EventLog:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_log(fh, cfg, source=str(path))


def format_log(log: EventLog | Iterable[Incident], delimiter: str = ",") -> str:
    buf = io.StringIO()
    w = csv.writer(buf, delimiter=delimiter, lineterminator="\n")
    w.writerow(COLUMNS)
    for inc in log:
        w.writerow([inc.client_id, inc.date.isoformat(), inc.aggression,
                    inc.involved, MEASURE_SEP.join(inc.measures)])
    return buf.getvalue()


def write_log(log: EventLog, path, delimiter: str = ",") -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(format_log(log, delimiter))


def validate_log(log: EventLog) -> ValidationReport:
    agg = Counter(i.aggression for i in log)
    meas = Counter(m for i in log for m in i.measures)
    return ValidationReport(
        n_incidents=len(log),
        n_clients=len({i.client_id for i in log}),
        n_empty_measures=sum(1 for i in log if not i.measures),
        aggression_counts={a: agg[a] for a in AGGRESSION_TYPES},
        measure_counts={m: meas[m] for m in MEASURES},
    )
