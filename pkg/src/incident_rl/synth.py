"""Synthetic incident logs drawn from a known MDP, with exact tallies as oracles."""

from __future__ import annotations

import datetime as dt
import json
from bisect import bisect_right
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from itertools import accumulate
from typing import Mapping

import numpy as np

from . import rng as rngmod
from .event_log import EventLog, Incident, Measure, format_log
from .mdp import (MDP_ACTIONS, MDP_STATES, PAPER_REWARDS, Mdp, RewardTable,
                  mdp_from_dict, mdp_to_dict, value_iteration)
from .preprocess import TAU

INVOLVED = ("client", "family", "staff", "unknown")
PREVENTIVE = Measure.PREVENTIVE.value


def default_truth() -> tuple[Mdp, dict[str, dict[str, float]]]:
    """Bundled ground-truth MDP and staff behaviour policy."""
    text = resources.files("incident_rl").joinpath("data/default_truth.json").read_text("utf-8")
    doc = json.loads(text)
    return mdp_from_dict(doc["mdp"]), doc["behavior"]


@dataclass(frozen=True)
class GeneratorConfig:
    n_clients: int = 200
    episodes_per_client: tuple[int, int] = (1, 6)   # inclusive range
    true_mdp: Mdp | None = None
    behavior: Mapping[str, Mapping[str, float]] | None = None
    within_gap: tuple[int, int] = (0, 9)
    between_gap: tuple[int, int] = (10, 60)
    missing_measure_rate: float = 0.0
    multi_measure_rate: float = 0.0
    preventive_rate: float = 0.0
    max_episode_length: int = 200
    start: dt.date = dt.date(2015, 1, 1)
    seed: int = 0

    def __post_init__(self):
        for name in ("missing_measure_rate", "multi_measure_rate", "preventive_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.within_gap
        if not 0 <= lo <= hi:
            raise ValueError("bad within_gap")
        lo2, hi2 = self.between_gap
        if not hi < lo2 <= hi2:
            raise ValueError("between_gap must start above within_gap")
        if self.n_clients < 1 or not 1 <= self.episodes_per_client[0] <= self.episodes_per_client[1]:
            raise ValueError("need n_clients >= 1 and 1 <= min episodes <= max episodes")


@dataclass
class EpisodeTruth:
    client_id: str
    triples: list[tuple[str, str, str]]
    complete: bool
    missing: bool
    preventive: bool


@dataclass
class GroundTruth:
    mdp: Mdp
    behavior: Mapping[str, Mapping[str, float]]
    episodes: list[EpisodeTruth] = field(default_factory=list)
    tallies: dict[str, int] = field(default_factory=dict)
    emissions: Counter = field(default_factory=Counter)   # retained (s, a, s') counts
    length_histogram: Counter = field(default_factory=Counter)  # retained episodes
    aggression_counts: Counter = field(default_factory=Counter)
    measure_counts: Counter = field(default_factory=Counter)

    def retained(self) -> list[EpisodeTruth]:
        return [e for e in self.episodes if e.complete and not e.missing and not e.preventive]

    def to_dict(self) -> dict:
        return {
            "format": "incident-rl/ground-truth",
            "mdp": mdp_to_dict(self.mdp),
            "behavior": {s: dict(d) for s, d in self.behavior.items()},
            "tallies": self.tallies,
            "emissions": [[s, a, s2, n] for (s, a, s2), n in sorted(self.emissions.items())],
            "length_histogram": {str(k): v for k, v in sorted(self.length_histogram.items())},
            "aggression_counts": dict(sorted(self.aggression_counts.items())),
            "measure_counts": dict(sorted(self.measure_counts.items())),
            "episodes": [{"client_id": e.client_id, "complete": e.complete,
                          "missing": e.missing, "preventive": e.preventive,
                          "triples": [list(t) for t in e.triples]} for e in self.episodes],
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


def _pick(u: rngmod.UniformStream, dist: Mapping[str, float]) -> str:
    keys = list(dist)
    cum = list(accumulate(dist.values()))
    return keys[min(bisect_right(cum, u() * cum[-1]), len(keys) - 1)]


def _randint(u: rngmod.UniformStream, lo: int, hi: int) -> int:
    return lo + u.below(hi - lo + 1)


def generate_log(cfg: GeneratorConfig | None = None) -> tuple[EventLog, GroundTruth]:
    """Sample a raw incident log and the tallies every cleaning step should reproduce.

    Each client's episodes are separated by gaps drawn from ``between_gap`` and
    their incidents by gaps from ``within_gap``. The final episode of every
    client is incomplete by construction: the log never shows its successor.
    """
    cfg = cfg or GeneratorConfig()
    mdp, behavior = cfg.true_mdp, cfg.behavior
    if mdp is None or behavior is None:
        d_mdp, d_beh = default_truth()
        mdp, behavior = mdp or d_mdp, behavior or d_beh
    u = rngmod.UniformStream(cfg.seed, rngmod.SYNTH)
    truth = GroundTruth(mdp, behavior)
    width = len(str(cfg.n_clients))
    incidents: list[Incident] = []

    for c in range(cfg.n_clients):
        client = f"c{c + 1:0{width}d}"
        date = cfg.start + dt.timedelta(days=u.below(365))
        n_eps = _randint(u, *cfg.episodes_per_client)
        for k in range(n_eps):
            if k:
                date += dt.timedelta(days=_randint(u, *cfg.between_gap))
            s = _pick(u, mdp.initial_dist)
            triples = []
            while True:
                a = _pick(u, behavior[s])
                s2 = _pick(u, mdp.transitions[(s, a)])
                if len(triples) + 1 >= cfg.max_episode_length:
                    s2 = TAU
                triples.append((s, a, s2))
                if s2 == TAU:
                    break
                s = s2
            measures = []
            for _, a, _ in triples:
                m = [a]
                if cfg.multi_measure_rate and u() < cfg.multi_measure_rate:
                    others = [x for x in mdp.actions if x != a]
                    m.append(others[u.below(len(others))])
                    if u() < 0.5:
                        m.reverse()
                measures.append(m)
            if cfg.preventive_rate and u() < cfg.preventive_rate:
                measures[u.below(len(measures))].append(PREVENTIVE)
            if cfg.missing_measure_rate and u() < cfg.missing_measure_rate:
                measures[u.below(len(measures))] = []

            for i, ((s_i, _, _), m) in enumerate(zip(triples, measures)):
                if i:
                    date += dt.timedelta(days=_randint(u, *cfg.within_gap))
                incidents.append(Incident(client, date, s_i, INVOLVED[u.below(len(INVOLVED))],
                                          tuple(m)))
            truth.episodes.append(EpisodeTruth(
                client, triples, complete=k < n_eps - 1,
                missing=any(not m for m in measures),
                preventive=any(PREVENTIVE in m for m in measures)))

    _tally(truth, incidents)
    return EventLog(tuple(incidents), source=f"synthetic(seed={cfg.seed})"), truth


def _tally(truth: GroundTruth, incidents: list[Incident]) -> None:
    eps = truth.episodes
    complete = [e for e in eps if e.complete]
    clean = [e for e in complete if not e.missing]
    retained = [e for e in clean if not e.preventive]
    truth.tallies = {
        "n_incidents": len(incidents),
        "n_clients": len({i.client_id for i in incidents}),
        "n_episodes": len(eps),
        "incomplete": len(eps) - len(complete),
        "missing_measures": len(complete) - len(clean),
        "preventive": len(clean) - len(retained),
        "retained_episodes": len(retained),
        "retained_incidents": sum(len(e.triples) for e in retained),
        "empty_measures": sum(1 for i in incidents if not i.measures),
    }
    truth.emissions = Counter(t for e in retained for t in e.triples)
    truth.length_histogram = Counter(len(e.triples) for e in retained)
    truth.aggression_counts = Counter(i.aggression for i in incidents)
    truth.measure_counts = Counter(m for i in incidents for m in i.measures)


_BAD_ROWS = (
    "{c},2016-01-05,va,client",                      # too few columns
    "{c},2016-13-45,va,client,talk to the client",   # bad date
    "{c},2016-01-05,xx,client,talk to the client",   # unknown aggression
    "{c},2016-01-05,pp,client,sing a song",          # unknown measure
)


def perturb_log(log: EventLog, kind: str, seed: int = 0, n_bad: int = 5) -> str:
    """Serialized copy of ``log`` with rows shuffled or ``n_bad`` malformed rows injected."""
    g = rngmod.make_rng(seed, rngmod.PERTURB)
    if kind == "shuffle_rows":
        order = g.permutation(len(log))
        return format_log([log.incidents[i] for i in order])
    if kind != "inject_bad_rows":
        raise ValueError("kind must be 'shuffle_rows' or 'inject_bad_rows'")
    lines = format_log(log).splitlines()
    header, rows = lines[0], lines[1:]
    for k in range(n_bad):
        pos = int(g.integers(0, len(rows) + 1))
        rows.insert(pos, _BAD_ROWS[k % len(_BAD_ROWS)].format(c=f"bad{k}"))
    return "\n".join([header, *rows]) + "\n"


def random_mdp(seed: int, n_states: int = 4, n_actions: int = 7,
               tau_weight: float = 1.0, concentration: float = 1.0,
               rewards: RewardTable | None = None) -> Mdp:
    """Random fully-connected MDP for oracle tests.

    With the default sizes it uses the aggression states, the seven
    countermeasures and the standard reward table. Each (s, a) row is
    Dirichlet distributed; ``tau_weight`` scales the terminal state's
    concentration so episodes stay short.
    """
    g = rngmod.make_rng(seed, rngmod.SYNTH, 99)
    if n_states == 4 and n_actions == 7 and rewards is None:
        states, actions, rewards = MDP_STATES, MDP_ACTIONS, PAPER_REWARDS
    else:
        states = tuple(f"s{i + 1}" for i in range(n_states)) + (TAU,)
        actions = tuple(f"a{j + 1}" for j in range(n_actions))
        if rewards is None:
            rewards = RewardTable({s: int(g.integers(-4, 1)) for s in states[:-1]} | {TAU: 1},
                                  {a: int(g.integers(-2, 1)) for a in actions})
    conc = np.full(n_states + 1, concentration)
    conc[-1] *= tau_weight
    transitions = {}
    for s in states[:-1]:
        for a in actions:
            p = g.dirichlet(conc)
            p = p / p.sum()
            transitions[(s, a)] = _row({s2: float(x) for s2, x in zip(states, p)})
    init = _row({s: float(x) for s, x in zip(states[:-1], g.dirichlet(np.ones(n_states)))})
    return Mdp(states, actions, transitions, rewards, init)


def action_gap(mdp: Mdp, gammas=(0.2, 0.4, 0.6, 0.8, 1.0)) -> float:
    """Smallest gap between the best and second-best optimal action value,
    over all non-terminal states and the given discounts."""
    gap = np.inf
    for gamma in gammas:
        q, _ = value_iteration(mdp, gamma)
        for s in mdp.nonterminal:
            vals = sorted((q[(s, a)] for a in mdp.available_actions(s)), reverse=True)
            if len(vals) > 1:
                gap = min(gap, vals[0] - vals[1])
    return float(gap)


def separated_random_mdps(n: int, seed: int = 0, min_gap: float = 0.5,
                          gammas=(0.2, 0.4, 0.6, 0.8, 1.0), max_draws: int = 100_000,
                          **kwargs) -> list[Mdp]:
    """First ``n`` draws of :func:`random_mdp` whose optimal actions are unique
    by at least ``min_gap`` at every discount in ``gammas``.

    Near-ties make "the" optimal policy ill-defined, so oracle comparisons
    use this family. Draw ``i`` uses seed ``seed * max_draws + i``.
    """
    out = []
    for i in range(max_draws):
        m = random_mdp(seed * max_draws + i, **kwargs)
        if action_gap(m, gammas) >= min_gap:
            out.append(m)
            if len(out) == n:
                return out
    raise RuntimeError(f"only {len(out)} of {n} MDPs met min_gap={min_gap} in {max_draws} draws")


def _row(dist: dict[str, float]) -> dict[str, float]:
    # push rounding error into the largest entry so the row sums to 1 within 1e-12
    total = sum(dist.values())
    top = max(dist, key=dist.get)
    dist[top] += 1.0 - total
    return dist


def load_generator_config(path) -> GeneratorConfig:
    """Read an INI-style ``[synth]`` section into a :class:`GeneratorConfig`."""
    import configparser

    cp = configparser.ConfigParser()
    cp.read(path, encoding="utf-8")
    sec = cp["synth"] if cp.has_section("synth") else cp[cp.default_section]
    kw: dict = {}
    ints = ("n_clients", "max_episode_length", "seed")
    floats = ("missing_measure_rate", "multi_measure_rate", "preventive_rate")
    pairs = ("episodes_per_client", "within_gap", "between_gap")
    for key in ints:
        if key in sec:
            kw[key] = sec.getint(key)
    for key in floats:
        if key in sec:
            kw[key] = sec.getfloat(key)
    for key in pairs:
        if key in sec:
            lo, hi = (int(x) for x in sec[key].replace(",", " ").split())
            kw[key] = (lo, hi)
    if "start" in sec:
        kw["start"] = dt.date.fromisoformat(sec["start"])
    if "truth" in sec:
        with open(sec["truth"], encoding="utf-8") as fh:
            doc = json.load(fh)
        kw["true_mdp"] = mdp_from_dict(doc["mdp"])
        kw["behavior"] = doc["behavior"]
    return GeneratorConfig(**kw)


__all__ = ["GeneratorConfig", "GroundTruth", "EpisodeTruth", "generate_log", "perturb_log",
           "random_mdp", "separated_random_mdps", "action_gap", "default_truth", "load_generator_config"]
