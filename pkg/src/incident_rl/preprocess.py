"""Turn an incident log into clean, single-action episodes.

Pipeline order: segment -> drop incomplete -> drop missing measures ->
drop preventive -> collapse multi-measure incidents -> (optional) min length.
"""

from __future__ import annotations

import csv
import datetime as dt
import io
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .event_log import AGGRESSION_TYPES, MEASURES, EventLog, Incident, Measure

TAU = "Tau"
PREVENTIVE = Measure.PREVENTIVE.value
STATE_LABELS = AGGRESSION_TYPES + (TAU,)

EPISODE_COLUMNS = ("client_id", "date", "aggression_type", "measure",
                   "next_aggression_type", "episode_id")


@dataclass(frozen=True)
class SegmentationConfig:
    gap_days: int = 9
    min_episode_length: int = 1
    # "corpus": keep the measure most frequent in the whole corpus;
    # "state": most frequent among incidents sharing the current state
    resolution: str = "corpus"
    measure_order: tuple[str, ...] = MEASURES

    def __post_init__(self):
        if self.gap_days < 1:
            raise ValueError("gap_days must be >= 1")
        if self.min_episode_length < 1:
            raise ValueError("min_episode_length must be >= 1")
        if self.resolution not in ("corpus", "state"):
            raise ValueError("resolution must be 'corpus' or 'state'")


@dataclass(frozen=True)
class EnrichedIncident:
    client_id: str
    date: dt.date
    state: str
    measures: tuple[str, ...]
    next_state: str | None
    episode_id: int
    action: str | None = None
    position: int = 0  # row index in the source log

    @property
    def triple(self) -> tuple[str, str | None, str | None]:
        return (self.state, self.action, self.next_state)


@dataclass(frozen=True)
class Episode:
    episode_id: int
    client_id: str
    steps: tuple[EnrichedIncident, ...]

    def __len__(self):
        return len(self.steps)

    @property
    def complete(self) -> bool:
        return self.steps[-1].next_state == TAU


@dataclass
class PreprocessReport:
    n_incidents: int = 0
    n_episodes_segmented: int = 0
    stages: list[tuple[str, int, int, int]] = field(default_factory=list)

    def add(self, name: str, before: Sequence[Episode], after: Sequence[Episode]):
        self.stages.append((name, len(before) - len(after), len(after),
                            sum(len(e) for e in after)))

    @property
    def drops(self) -> dict[str, int]:
        return {name: dropped for name, dropped, _, _ in self.stages}

    def lines(self) -> list[str]:
        out = [f"incidents in log: {self.n_incidents}",
               f"episodes after segmentation: {self.n_episodes_segmented}"]
        for name, dropped, eps, incs in self.stages:
            out.append(f"{name}: dropped {dropped}, kept {eps} episodes / {incs} incidents")
        return out


def enrich_and_segment(log: EventLog | Iterable[Incident],
                       cfg: SegmentationConfig | None = None) -> list[Episode]:
    """Attach next aggression types and split each client's incidents into episodes.

    Incidents more than ``gap_days`` apart end the current episode with a Tau.
    The last incident of a client has no known successor, so its episode stays
    incomplete (``next_state`` is None).
    """
    cfg = cfg or SegmentationConfig()
    by_client: dict[str, list[tuple[int, Incident]]] = defaultdict(list)
    for pos, inc in enumerate(log):
        by_client[inc.client_id].append((pos, inc))

    episodes: list[Episode] = []
    next_id = 1
    for client in sorted(by_client):
        rows = sorted(by_client[client], key=lambda r: (r[1].date, r[0]))
        current: list[EnrichedIncident] = []
        for k, (pos, inc) in enumerate(rows):
            if k + 1 < len(rows):
                nxt = rows[k + 1][1]
                split = (nxt.date - inc.date).days > cfg.gap_days
                next_state = TAU if split else nxt.aggression
            else:
                split, next_state = True, None
            current.append(EnrichedIncident(client, inc.date, inc.aggression,
                                            inc.measures, next_state, next_id,
                                            position=pos))
            if split:
                episodes.append(Episode(next_id, client, tuple(current)))
                next_id += 1
                current = []
    return episodes


def filter_incomplete(episodes: Iterable[Episode]) -> list[Episode]:
    return [e for e in episodes if e.complete]


def filter_missing_measures(episodes: Iterable[Episode]) -> list[Episode]:
    """Drop whole episodes in which any incident has no recorded measure."""
    return [e for e in episodes if all(s.measures for s in e.steps)]


def filter_preventive(episodes: Iterable[Episode]) -> list[Episode]:
    return [e for e in episodes
            if not any(PREVENTIVE in s.measures or s.action == PREVENTIVE
                       for s in e.steps)]


def filter_min_length(episodes: Iterable[Episode], k: int) -> list[Episode]:
    if k < 1:
        raise ValueError("k must be >= 1")
    return [e for e in episodes if len(e) >= k]


def measure_frequencies(episodes: Iterable[Episode], by_state: bool = False):
    """Count measure occurrences; keyed by state first when ``by_state``."""
    if by_state:
        freq: dict[str, Counter] = defaultdict(Counter)
        for e in episodes:
            for s in e.steps:
                freq[s.state].update(s.measures)
        return dict(freq)
    return Counter(m for e in episodes for s in e.steps for m in s.measures)


def _pick(measures: Sequence[str], counts, order: Sequence[str]) -> str:
    rank = {m: i for i, m in enumerate(order)}
    return min(measures, key=lambda m: (-counts.get(m, 0), rank.get(m, len(rank)), m))


def resolve_measures(episodes: Iterable[Episode], corpus_frequencies,
                     order: Sequence[str] = MEASURES,
                     by_state: bool = False) -> list[Episode]:
    """Collapse every incident's measure list to one action.

    The kept measure is the one with the highest frequency in
    ``corpus_frequencies``; ties go to the earlier entry of ``order``.
    With ``by_state`` the frequencies are looked up per current state.
    """
    out = []
    for e in episodes:
        steps = []
        for s in e.steps:
            if not s.measures:
                raise ValueError(f"episode {e.episode_id} has an incident without measures")
            counts = corpus_frequencies.get(s.state, {}) if by_state else corpus_frequencies
            steps.append(replace(s, action=_pick(s.measures, counts, order)))
        out.append(replace(e, steps=tuple(steps)))
    return out


def preprocess(log: EventLog, cfg: SegmentationConfig | None = None,
               frequencies=None) -> tuple[list[Episode], PreprocessReport]:
    """Run the full cleaning pipeline and report per-stage drop counts.

    Measure frequencies are taken after the incomplete and missing-measure
    filters unless ``frequencies`` is given.
    """
    cfg = cfg or SegmentationConfig()
    report = PreprocessReport(n_incidents=len(log))
    eps = enrich_and_segment(log, cfg)
    report.n_episodes_segmented = len(eps)

    for name, fn in (("incomplete", filter_incomplete),
                     ("missing_measures", filter_missing_measures)):
        kept = fn(eps)
        report.add(name, eps, kept)
        eps = kept
    if frequencies is None:
        frequencies = measure_frequencies(eps, by_state=cfg.resolution == "state")
    kept = filter_preventive(eps)
    report.add("preventive", eps, kept)
    eps = resolve_measures(kept, frequencies, cfg.measure_order,
                           by_state=cfg.resolution == "state")
    if cfg.min_episode_length > 1:
        kept = filter_min_length(eps, cfg.min_episode_length)
        report.add(f"min_length_{cfg.min_episode_length}", eps, kept)
        eps = kept
    return eps, report


def flatten(episodes: Iterable[Episode]) -> list[Incident]:
    """Back to plain incidents, in episode order."""
    return [Incident(s.client_id, s.date, s.state, "", s.measures)
            for e in episodes for s in e.steps]


class EpisodeSegmenter(TransformerMixin, BaseEstimator):
    """Transformer from an :class:`EventLog` to clean episodes.

    ``fit`` learns the measure frequencies used to collapse multi-measure
    incidents; ``transform`` segments, filters and collapses.
    """

    def __init__(self, gap_days=9, min_episode_length=1, resolution="corpus",
                 measure_order=MEASURES):
        self.gap_days = gap_days
        self.min_episode_length = min_episode_length
        self.resolution = resolution
        self.measure_order = measure_order

    def _config(self) -> SegmentationConfig:
        return SegmentationConfig(self.gap_days, self.min_episode_length,
                                  self.resolution, tuple(self.measure_order))

    def fit(self, X: EventLog, y=None):
        cfg = self._config()
        eps = filter_missing_measures(filter_incomplete(enrich_and_segment(_check_log(X), cfg)))
        self.measure_counts_ = measure_frequencies(eps, by_state=cfg.resolution == "state")
        return self

    def transform(self, X: EventLog) -> list[Episode]:
        check_is_fitted(self, "measure_counts_")
        episodes, self.report_ = preprocess(_check_log(X), self._config(),
                                            frequencies=self.measure_counts_)
        return episodes


def _check_log(X) -> EventLog:
    if isinstance(X, EventLog):
        return X
    items = tuple(X)
    if not all(isinstance(i, Incident) for i in items):
        raise TypeError("expected an EventLog or a sequence of Incident")
    return EventLog(items)


def format_episodes(episodes: Iterable[Episode]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EPISODE_COLUMNS)
    for e in episodes:
        for s in e.steps:
            w.writerow([s.client_id, s.date.isoformat(), s.state,
                        s.action or "", s.next_state or "", e.episode_id])
    return buf.getvalue()


def write_episodes(episodes: Iterable[Episode], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(format_episodes(episodes))


def parse_episodes(stream) -> list[Episode]:
    if isinstance(stream, str):
        stream = io.StringIO(stream)
    reader = csv.DictReader(stream)
    if tuple(reader.fieldnames or ()) != EPISODE_COLUMNS:
        raise ValueError(f"episode file header must be {','.join(EPISODE_COLUMNS)}")
    grouped: dict[int, list[EnrichedIncident]] = {}
    for pos, row in enumerate(reader):
        eid = int(row["episode_id"])
        action = row["measure"] or None
        grouped.setdefault(eid, []).append(EnrichedIncident(
            row["client_id"], dt.date.fromisoformat(row["date"]),
            row["aggression_type"], (action,) if action else (),
            row["next_aggression_type"] or None, eid, action, pos))
    return [Episode(eid, steps[0].client_id, tuple(steps))
            for eid, steps in grouped.items()]


def read_episodes(path) -> list[Episode]:
    with open(path, newline="", encoding="utf-8") as fh:
        return parse_episodes(fh)
