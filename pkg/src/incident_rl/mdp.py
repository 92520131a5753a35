"""Finite MDP estimated from episodes, plus exact solvers used as oracles."""

from __future__ import annotations

import csv
import io
import json
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .event_log import AGGRESSION_TYPES, MEASURES, Measure
from .preprocess import TAU, Episode

MDP_ACTIONS = tuple(m for m in MEASURES if m != Measure.PREVENTIVE.value)
MDP_STATES = AGGRESSION_TYPES + (TAU,)
ROW_TOL = 1e-12


class EmptyCorpus(ValueError):
    pass


class NoConvergence(RuntimeError):
    pass


class SchemaError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


@dataclass(frozen=True)
class RewardTable:
    """Per-transition reward = action reward + reward of the state reached."""

    state_reward: Mapping[str, float]
    action_reward: Mapping[str, float]
    default_action_reward: float = 0

    def __call__(self, action: str, next_state: str) -> float:
        return self.action_reward.get(action, self.default_action_reward) + self.state_reward[next_state]


PAPER_REWARDS = RewardTable(
    state_reward={TAU: 1, "va": 0, "po": -1, "sib": -3, "pp": -4},
    action_reward={
        Measure.DISTRACT.value: -1,
        Measure.TERMINATE_CONTACT.value: -1,
        Measure.SEND_TO_ROOM.value: -1,
        Measure.HELD_WITH_FORCE.value: -2,
        Measure.SECLUSION.value: -2,
    },
)


def reward(table: RewardTable, action: str, next_state: str) -> float:
    return table(action, next_state)


@dataclass
class TransitionCounts:
    count: Counter = field(default_factory=Counter)  # (s, a, s') -> n

    @property
    def chosen(self) -> Counter:
        out: Counter = Counter()
        for (s, a, _), n in self.count.items():
            out[(s, a)] += n
        return out

    def audit_rows(self) -> list[tuple[str, str, str, int, int, float]]:
        chosen = self.chosen
        return [(s, a, s2, n, chosen[(s, a)], n / chosen[(s, a)])
                for (s, a, s2), n in sorted(self.count.items())]


def count_transitions(episodes: Iterable[Episode]) -> TransitionCounts:
    counts = TransitionCounts()
    for e in episodes:
        for step in e.steps:
            if step.action is None or step.next_state is None:
                raise ValueError(f"episode {e.episode_id} is not resolved and complete")
            counts.count[(step.state, step.action, step.next_state)] += 1
    return counts


@dataclass(frozen=True, eq=True)
class Mdp:
    states: tuple[str, ...]
    actions: tuple[str, ...]
    transitions: Mapping[tuple[str, str], Mapping[str, float]]
    rewards: RewardTable
    initial_dist: Mapping[str, float]
    terminal: str = TAU

    def __post_init__(self):
        validate_mdp(self)

    @property
    def nonterminal(self) -> tuple[str, ...]:
        return tuple(s for s in self.states if s != self.terminal)

    def available_actions(self, state: str) -> tuple[str, ...]:
        return tuple(a for a in self.actions if (state, a) in self.transitions)

    def expected_reward(self, state: str, action: str) -> float:
        return sum(p * self.rewards(action, s2)
                   for s2, p in self.transitions[(state, action)].items())

    @cached_property
    def arrays(self) -> "MdpArrays":
        return MdpArrays.build(self)


@dataclass(frozen=True)
class MdpArrays:
    """Index-based view of an :class:`Mdp` for the solvers and samplers.

    Non-terminal states occupy indices ``0..n-1``; the terminal state is ``n``.
    """

    states: tuple[str, ...]       # non-terminal then terminal
    actions: tuple[str, ...]
    P: np.ndarray                 # (n, A, n+1)
    R: np.ndarray                 # (A, n+1)
    mask: np.ndarray              # (n, A) available pairs
    init: np.ndarray              # (n,)
    avail: tuple[tuple[int, ...], ...]
    # per (s, a): (next indices, cumulative probabilities, rewards)
    samplers: dict

    @classmethod
    def build(cls, mdp: Mdp) -> "MdpArrays":
        nt = mdp.nonterminal
        states = nt + (mdp.terminal,)
        idx = {s: i for i, s in enumerate(states)}
        n, A = len(nt), len(mdp.actions)
        P = np.zeros((n, A, n + 1))
        R = np.array([[mdp.rewards(a, s2) for s2 in states] for a in mdp.actions], dtype=float)
        mask = np.zeros((n, A), dtype=bool)
        samplers = {}
        for (s, a), dist in mdp.transitions.items():
            i, j = idx[s], mdp.actions.index(a)
            mask[i, j] = True
            nxt = [idx[s2] for s2 in dist]
            probs = list(dist.values())
            P[i, j, nxt] = probs
            samplers[(i, j)] = (nxt, np.cumsum(probs).tolist(), [float(R[j, k]) for k in nxt])
        init = np.array([mdp.initial_dist.get(s, 0.0) for s in nt])
        avail = tuple(tuple(np.flatnonzero(mask[i]).tolist()) for i in range(n))
        return cls(states, mdp.actions, P, R, mask, init, avail, samplers)

    @property
    def n(self) -> int:
        return len(self.states) - 1


def validate_mdp(mdp: Mdp) -> None:
    states = set(mdp.states)
    if mdp.terminal not in states:
        raise SchemaError("terminal", f"{mdp.terminal!r} not among states")
    if len(states) != len(mdp.states) or len(set(mdp.actions)) != len(mdp.actions):
        raise SchemaError("states", "duplicate state or action labels")
    for s in mdp.states:
        if s not in mdp.rewards.state_reward:
            raise SchemaError(f"rewards/state/{s}", "missing state reward")
    for (s, a), dist in mdp.transitions.items():
        path = f"transitions/{s}/{a}"
        if s == mdp.terminal:
            raise SchemaError(path, "terminal state has outgoing transitions")
        if s not in states or a not in mdp.actions:
            raise SchemaError(path, "unknown state or action")
        if not dist:
            raise SchemaError(path, "empty next-state distribution")
        for s2, p in dist.items():
            if s2 not in states:
                raise SchemaError(f"{path}/{s2}", "unknown next state")
            if not (0.0 <= p <= 1.0):
                raise SchemaError(f"{path}/{s2}", f"probability {p} outside [0, 1]")
        total = sum(dist.values())
        if abs(total - 1.0) > ROW_TOL:
            raise SchemaError(path, f"probabilities sum to {total!r}, not 1")
    for s, p in mdp.initial_dist.items():
        if s not in states or s == mdp.terminal:
            raise SchemaError(f"initial/{s}", "initial state must be non-terminal")
        if not (0.0 <= p <= 1.0):
            raise SchemaError(f"initial/{s}", f"probability {p} outside [0, 1]")
    total = sum(mdp.initial_dist.values())
    if abs(total - 1.0) > ROW_TOL:
        raise SchemaError("initial", f"probabilities sum to {total!r}, not 1")


def estimate_mdp(counts: TransitionCounts, episodes: Sequence[Episode],
                 rewards: RewardTable = PAPER_REWARDS,
                 states: Sequence[str] = MDP_STATES,
                 actions: Sequence[str] = MDP_ACTIONS,
                 initial: str = "empirical") -> Mdp:
    """Maximum-likelihood transition estimates.

    ``P(s, a, s') = count(s, a, s') / chosen(s, a)``; pairs never observed are
    left out, which makes the action unavailable in that state.
    ``initial`` is ``"empirical"`` (first states of the episodes) or
    ``"uniform"`` over non-terminal states.
    """
    episodes = list(episodes)
    if not episodes:
        raise EmptyCorpus("no episodes to estimate an MDP from")
    chosen = counts.chosen
    seen_s = {k[0] for k in counts.count} | {k[2] for k in counts.count}
    seen_a = {k[1] for k in counts.count}
    states = tuple(states) + tuple(sorted(seen_s - set(states)))
    actions = tuple(actions) + tuple(sorted(seen_a - set(actions)))
    transitions: dict[tuple[str, str], dict[str, float]] = {}
    for s in states:
        for a in actions:
            n = chosen.get((s, a), 0)
            if n:
                transitions[(s, a)] = {s2: counts.count[(s, a, s2)] / n
                                       for s2 in states if counts.count.get((s, a, s2), 0)}
    nt = [s for s in states if s != TAU]
    if initial == "uniform":
        init = {s: 1 / len(nt) for s in nt}
    elif initial == "empirical":
        starts = Counter(e.steps[0].state for e in episodes)
        init = {s: starts[s] / len(episodes) for s in nt if starts[s]}
    else:
        raise ValueError("initial must be 'empirical' or 'uniform'")
    return Mdp(states, actions, transitions, rewards, init)


class MdpEstimator(BaseEstimator):
    """Estimate an :class:`Mdp` from resolved, complete episodes."""

    def __init__(self, rewards=None, initial="empirical"):
        self.rewards = rewards
        self.initial = initial

    def fit(self, X: Sequence[Episode], y=None):
        X = list(X)
        self.counts_ = count_transitions(X)
        self.mdp_ = estimate_mdp(self.counts_, X, self.rewards or PAPER_REWARDS,
                                 initial=self.initial)
        return self


def greedy_indices(q: np.ndarray, mask: np.ndarray, atol: float = 1e-9) -> np.ndarray:
    """Greedy action index per state; ties (within ``atol``) go to the lowest index.

    States without available actions get -1.
    """
    out = np.full(q.shape[0], -1)
    for i in range(q.shape[0]):
        cols = np.flatnonzero(mask[i])
        if cols.size:
            best = q[i, cols].max()
            out[i] = cols[np.argmax(q[i, cols] >= best - atol)]
    return out


def value_iteration(mdp: Mdp, gamma: float, tol: float = 1e-10,
                    max_iter: int = 100_000):
    """Optimal action values by repeated Bellman optimality backups.

    Returns ``(q_star, policy_star)`` as dicts keyed by ``(state, action)`` and
    ``state``. The terminal state is worth 0 beyond the reward of entering it.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if tol <= 0:
        raise ValueError("tol must be positive")
    arr = mdp.arrays
    n = arr.n
    expected_r = np.einsum("sat,at->sa", arr.P, arr.R)
    has_action = arr.mask.any(axis=1)
    q = np.zeros(arr.mask.shape)
    v = np.zeros(n + 1)
    for _ in range(max_iter):
        # states without actions are dead ends worth 0
        v[:n] = np.where(has_action, np.max(np.where(arr.mask, q, -np.inf), axis=1,
                                            initial=-np.inf), 0.0)
        q_new = np.where(arr.mask, expected_r + gamma * (arr.P @ v), 0.0)
        diff = np.max(np.abs(q_new - q), initial=0.0)
        q = q_new
        if diff < tol:
            break
    else:
        raise NoConvergence(f"Bellman residual still {diff:.3g} after {max_iter} sweeps")
    pol = greedy_indices(q, arr.mask)
    q_star = {(arr.states[i], arr.actions[j]): float(q[i, j])
              for i in range(n) for j in range(len(arr.actions)) if arr.mask[i, j]}
    policy = {arr.states[i]: arr.actions[pol[i]] for i in range(n) if pol[i] >= 0}
    return q_star, policy


def policy_matrix(mdp: Mdp, policy: Mapping[str, str | Mapping[str, float]]) -> np.ndarray:
    """Action probabilities per non-terminal state from a deterministic or stochastic map."""
    arr = mdp.arrays
    pi = np.zeros(arr.mask.shape)
    for i, s in enumerate(arr.states[:-1]):
        choice = policy.get(s)
        if choice is None:
            continue
        dist = {choice: 1.0} if isinstance(choice, str) else choice
        for a, p in dist.items():
            j = arr.actions.index(a)
            if p > 0 and not arr.mask[i, j]:
                raise ValueError(f"action {a!r} unavailable in state {s!r}")
            pi[i, j] = p
    return pi


def expected_episode_reward(mdp: Mdp, policy, max_steps: int = 1000,
                            gamma: float = 1.0) -> float:
    """Expected (optionally discounted) return of one episode under ``policy``.

    Episodes start from the initial distribution and stop at the terminal
    state or after ``max_steps`` steps, matching the rollout semantics.
    ``policy`` is a state->action map, a state->{action: prob} map, or a
    probability matrix from :func:`policy_matrix`.
    """
    arr = mdp.arrays
    pi = policy if isinstance(policy, np.ndarray) else policy_matrix(mdp, policy)
    r_pi = np.einsum("sa,sat,at->s", pi, arr.P, arr.R)
    P_pi = np.einsum("sa,sat->st", pi, arr.P)[:, :arr.n]
    v = np.zeros(arr.n)
    for _ in range(max_steps):
        v_new = r_pi + gamma * P_pi @ v
        if np.max(np.abs(v_new - v)) == 0.0:
            break
        v = v_new
    return float(arr.init @ v)


def mdp_to_dict(mdp: Mdp) -> dict:
    nested: dict[str, dict[str, dict[str, float]]] = {}
    for (s, a), dist in mdp.transitions.items():
        nested.setdefault(s, {})[a] = dict(dist)
    return {
        "format": "incident-rl/mdp",
        "version": 1,
        "states": list(mdp.states),
        "terminal": mdp.terminal,
        "actions": list(mdp.actions),
        "rewards": {
            "state": dict(mdp.rewards.state_reward),
            "action": dict(mdp.rewards.action_reward),
            "default_action": mdp.rewards.default_action_reward,
        },
        "initial": dict(mdp.initial_dist),
        "transitions": nested,
    }


def _require(doc, key, kind, path=""):
    if not isinstance(doc, dict) or key not in doc:
        raise SchemaError(path + key, "missing")
    if not isinstance(doc[key], kind):
        raise SchemaError(path + key, f"expected {kind.__name__}")
    return doc[key]


def mdp_from_dict(doc: dict) -> Mdp:
    states = tuple(_require(doc, "states", list))
    actions = tuple(_require(doc, "actions", list))
    terminal = doc.get("terminal", TAU)
    rw = _require(doc, "rewards", dict)
    rewards = RewardTable(dict(_require(rw, "state", dict, "rewards/")),
                          dict(_require(rw, "action", dict, "rewards/")),
                          rw.get("default_action", 0))
    transitions = {}
    for s, row in _require(doc, "transitions", dict).items():
        if not isinstance(row, dict):
            raise SchemaError(f"transitions/{s}", "expected dict")
        for a, dist in row.items():
            if not isinstance(dist, dict):
                raise SchemaError(f"transitions/{s}/{a}", "expected dict")
            transitions[(s, a)] = {k: float(v) for k, v in dist.items()}
    init = {k: float(v) for k, v in _require(doc, "initial", dict).items()}
    return Mdp(states, actions, transitions, rewards, init, terminal)


def serialize_mdp(mdp: Mdp) -> str:
    return json.dumps(mdp_to_dict(mdp), indent=2) + "\n"


def deserialize_mdp(text: str) -> Mdp:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise SchemaError("$", f"invalid JSON: {e}") from None
    return mdp_from_dict(doc)


def load_mdp(path) -> Mdp:
    with open(path, encoding="utf-8") as fh:
        return deserialize_mdp(fh.read())


def save_mdp(mdp: Mdp, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_mdp(mdp))


def format_counts(counts: TransitionCounts) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["state", "action", "next_state", "count", "chosen", "probability"])
    for row in counts.audit_rows():
        w.writerow([*row[:5], repr(row[5])])
    return buf.getvalue()
