"""Tabular Q-learning and SARSA, baseline policies and hyperparameter search."""

from __future__ import annotations

import json
from bisect import bisect_right
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from itertools import accumulate
from typing import Iterable, Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import rng as rngmod
from .event_log import MEASURES
from .mdp import Mdp, expected_episode_reward
from .parallel import parallel_map
from .preprocess import Episode
from .rng import UniformStream

PAPER_GRID = {
    "gamma": (0.2, 0.4, 0.6, 0.8, 1.0),
    "epsilon": (0.1, 0.2, 0.3, 0.4, 0.5),
    "alpha": (0.1, 0.2, 0.3, 0.4, 0.5),
}
ALGORITHMS = ("qlearning", "sarsa")


class NoActions(RuntimeError):
    """A visited state has no available action in the MDP."""


class UnreachableAction(RuntimeError):
    """A policy has no usable action for a visited state."""


@dataclass(frozen=True)
class Hyperparams:
    alpha: float = 0.2
    gamma: float = 0.2
    epsilon: float = 0.1

    def __post_init__(self):
        for name in ("alpha", "gamma", "epsilon"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    n_episodes: int = 2000
    seed: int = 0
    max_steps_per_episode: int = 1000

    def __post_init__(self):
        if self.n_episodes < 1 or self.max_steps_per_episode < 1:
            raise ValueError("n_episodes and max_steps_per_episode must be >= 1")


@dataclass
class QTable:
    states: tuple[str, ...]
    actions: tuple[str, ...]
    values: dict[tuple[str, str], float]
    algorithm: str = ""
    n_truncated: int = 0
    hyperparams: Hyperparams | None = None

    @classmethod
    def zeros(cls, mdp: Mdp, algorithm: str = "") -> "QTable":
        return cls(mdp.nonterminal, mdp.actions,
                   {k: 0.0 for k in sorted(mdp.transitions,
                                           key=lambda k: (mdp.states.index(k[0]),
                                                          mdp.actions.index(k[1])))},
                   algorithm)

    def actions_for(self, state: str) -> tuple[str, ...]:
        return tuple(a for a in self.actions if (state, a) in self.values)

    def greedy_action(self, state: str) -> str:
        acts = self.actions_for(state)
        if not acts:
            raise NoActions(f"no actions for state {state!r}")
        return max(acts, key=lambda a: (self.values[(state, a)], -self.actions.index(a)))

    def greedy_policy(self, name: str = "") -> "Policy":
        return Policy("greedy", {s: (self.greedy_action(s),) for s in self.states
                                 if self.actions_for(s)}, name=name or self.algorithm)

    def to_dict(self) -> dict:
        q: dict[str, dict[str, float]] = {}
        for (s, a), v in self.values.items():
            q.setdefault(s, {})[a] = v
        hp = self.hyperparams
        return {
            "format": "incident-rl/qtable",
            "version": 1,
            "algorithm": self.algorithm,
            "hyperparams": None if hp is None else
            {"alpha": hp.alpha, "gamma": hp.gamma, "epsilon": hp.epsilon},
            "n_truncated": self.n_truncated,
            "states": list(self.states),
            "actions": list(self.actions),
            "q": q,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "QTable":
        values = {(s, a): float(v) for s, row in doc["q"].items() for a, v in row.items()}
        hp = doc.get("hyperparams")
        return cls(tuple(doc["states"]), tuple(doc["actions"]), values,
                   doc.get("algorithm", ""), doc.get("n_truncated", 0),
                   Hyperparams(**hp) if hp else None)


@dataclass(frozen=True)
class Policy:
    """Decision rule over states.

    ``choices[s]`` holds the candidate actions for ``s``: one action for
    greedy and fixed policies, all available actions for the random policy
    (picked uniformly). With ``epsilon > 0`` a uniform draw from
    ``explore[s]`` replaces the choice with that probability.
    """

    kind: str
    choices: Mapping[str, tuple[str, ...]]
    name: str = ""
    epsilon: float = 0.0
    explore: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def decide(self, state: str, rng: UniformStream | None = None) -> str:
        if state not in self.choices:
            raise UnreachableAction(f"policy {self.name or self.kind!r} has no action for state {state!r}")
        if self.epsilon > 0 and rng() < self.epsilon:
            opts = self.explore[state]
            return opts[rng.below(len(opts))]
        opts = self.choices[state]
        return opts[0] if len(opts) == 1 else opts[rng.below(len(opts))]

    def as_mapping(self) -> dict[str, str]:
        """State -> action, for deterministic policies."""
        return {s: c[0] for s, c in self.choices.items() if len(c) == 1}

    def probabilities(self) -> dict[str, dict[str, float]]:
        out = {}
        for s, opts in self.choices.items():
            dist = Counter({a: (1 - self.epsilon) / len(opts) for a in opts})
            if self.epsilon > 0:
                for a in self.explore[s]:
                    dist[a] += self.epsilon / len(self.explore[s])
            out[s] = dict(dist)
        return out

    def to_dict(self) -> dict:
        return {"format": "incident-rl/policy", "kind": self.kind, "name": self.name,
                "epsilon": self.epsilon,
                "choices": {s: list(c) for s, c in self.choices.items()},
                "explore": {s: list(c) for s, c in self.explore.items()}}

    @classmethod
    def from_dict(cls, doc: dict) -> "Policy":
        if "choices" not in doc and "actions" in doc:
            # short form: {"actions": {state: action}}
            return fixed_policy(doc["actions"], doc.get("name", "fixed"))
        return cls(doc["kind"], {s: tuple(c) for s, c in doc["choices"].items()},
                   doc.get("name", ""), doc.get("epsilon", 0.0),
                   {s: tuple(c) for s, c in doc.get("explore", {}).items()})


def fixed_policy(actions: Mapping[str, str], name: str = "fixed") -> Policy:
    return Policy("fixed", {s: (a,) for s, a in actions.items()}, name=name)


def random_policy(mdp: Mdp, name: str = "random") -> Policy:
    return Policy("random", {s: mdp.available_actions(s) for s in mdp.nonterminal
                             if mdp.available_actions(s)}, name=name)


def epsilon_greedy_policy(q: QTable, epsilon: float, name: str = "") -> Policy:
    base = q.greedy_policy(name)
    return Policy("epsilon_greedy", base.choices, base.name, epsilon,
                  {s: q.actions_for(s) for s in base.choices})


def most_frequent_policy(episodes: Iterable[Episode], order: Sequence[str] = MEASURES,
                         name: str = "most frequent action") -> Policy:
    """Modal action per state across the corpus; ties by ``order``."""
    counts: dict[str, Counter] = defaultdict(Counter)
    for e in episodes:
        for s in e.steps:
            counts[s.state][s.action] += 1
    rank = {m: i for i, m in enumerate(order)}
    modal = {s: min(c, key=lambda a: (-c[a], rank.get(a, len(rank)), a))
             for s, c in counts.items()}
    return fixed_policy(modal, name)


def epsilon_greedy(q: QTable, state: str, eps: float, rng: UniformStream) -> str:
    acts = q.actions_for(state)
    if not acts:
        raise NoActions(f"no actions for state {state!r}")
    if eps > 0 and rng() < eps:
        return acts[rng.below(len(acts))]
    return q.greedy_action(state)


def _train(mdp: Mdp, hp: Hyperparams, cfg: TrainConfig, algorithm: str) -> QTable:
    if algorithm not in ALGORITHMS:
        raise ValueError(f"algorithm must be one of {ALGORITHMS}")
    arr = mdp.arrays
    n, n_actions = arr.n, len(arr.actions)
    avail, samplers = arr.avail, arr.samplers
    init_cum = list(accumulate(arr.init.tolist()))
    alpha, gamma, eps = hp.alpha, hp.gamma, hp.epsilon
    Q = [[0.0] * n_actions for _ in range(n)]
    u = UniformStream(cfg.seed, rngmod.TRAIN)

    def choose(s: int) -> int:
        acts = avail[s]
        if not acts:
            raise NoActions(f"no actions for state {arr.states[s]!r}")
        if eps > 0 and u() < eps:
            return acts[u.below(len(acts))]
        q = Q[s]
        best = acts[0]
        for a in acts[1:]:
            if q[a] > q[best]:
                best = a
        return best

    def step(s: int, a: int) -> tuple[int, float]:
        nxt, cum, rew = samplers[(s, a)]
        k = min(bisect_right(cum, u()), len(nxt) - 1)
        return nxt[k], rew[k]

    truncated = 0
    for _ in range(cfg.n_episodes):
        s = min(bisect_right(init_cum, u()), n - 1)
        steps = 0
        if algorithm == "qlearning":
            while True:
                a = choose(s)
                s2, r = step(s, a)
                if s2 == n:
                    target = r
                else:
                    q2 = Q[s2]
                    target = r + gamma * max((q2[b] for b in avail[s2]), default=0.0)
                Q[s][a] += alpha * (target - Q[s][a])
                steps += 1
                if s2 == n:
                    break
                if steps >= cfg.max_steps_per_episode:
                    truncated += 1
                    break
                s = s2
        else:
            a = choose(s)
            while True:
                s2, r = step(s, a)
                if s2 == n:
                    Q[s][a] += alpha * (r - Q[s][a])
                    break
                a2 = choose(s2)
                Q[s][a] += alpha * (r + gamma * Q[s2][a2] - Q[s][a])
                steps += 1
                if steps >= cfg.max_steps_per_episode:
                    truncated += 1
                    break
                s, a = s2, a2

    table = QTable.zeros(mdp, algorithm)
    for (s, a) in table.values:
        table.values[(s, a)] = Q[arr.states.index(s)][arr.actions.index(a)]
    table.n_truncated = truncated
    table.hyperparams = hp
    return table


def q_learning_train(mdp: Mdp, hp: Hyperparams, cfg: TrainConfig) -> QTable:
    """Off-policy TD control with an epsilon-greedy behaviour policy."""
    return _train(mdp, hp, cfg, "qlearning")


def sarsa_train(mdp: Mdp, hp: Hyperparams, cfg: TrainConfig) -> QTable:
    """On-policy TD control; bootstraps on the action actually taken next."""
    return _train(mdp, hp, cfg, "sarsa")


def train(mdp: Mdp, algorithm: str, hp: Hyperparams, cfg: TrainConfig) -> QTable:
    return _train(mdp, hp, cfg, algorithm)


class TDAgent(BaseEstimator):
    """Estimator wrapper: ``fit`` on an :class:`Mdp`, ``predict`` actions for states."""

    def __init__(self, algorithm="qlearning", alpha=0.2, gamma=0.2, epsilon=0.1,
                 n_episodes=2000, max_steps=1000, seed=0):
        self.algorithm = algorithm
        self.alpha = alpha
        self.gamma = gamma
        self.epsilon = epsilon
        self.n_episodes = n_episodes
        self.max_steps = max_steps
        self.seed = seed

    def fit(self, X: Mdp, y=None):
        if not isinstance(X, Mdp):
            raise TypeError("TDAgent.fit expects an Mdp")
        hp = Hyperparams(self.alpha, self.gamma, self.epsilon)
        cfg = TrainConfig(self.n_episodes, self.seed, self.max_steps)
        self.q_table_ = _train(X, hp, cfg, self.algorithm)
        self.policy_ = self.q_table_.greedy_policy()
        self.n_truncated_ = self.q_table_.n_truncated
        return self

    def predict(self, X: Iterable[str]) -> list[str]:
        check_is_fitted(self, "policy_")
        return [self.policy_.decide(s) for s in X]

    def score(self, X: Mdp, y=None) -> float:
        """Expected per-episode reward of the greedy policy on ``X``."""
        check_is_fitted(self, "policy_")
        return expected_episode_reward(X, self.policy_.as_mapping(), self.max_steps)


class QLearningAgent(TDAgent):
    def __init__(self, alpha=0.2, gamma=0.2, epsilon=0.1, n_episodes=2000,
                 max_steps=1000, seed=0):
        super().__init__("qlearning", alpha, gamma, epsilon, n_episodes, max_steps, seed)


class SarsaAgent(TDAgent):
    def __init__(self, alpha=0.2, gamma=0.2, epsilon=0.1, n_episodes=2000,
                 max_steps=1000, seed=0):
        super().__init__("sarsa", alpha, gamma, epsilon, n_episodes, max_steps, seed)


class MostFrequentActionPolicy(BaseEstimator):
    """Baseline: the modal action per state in the training episodes."""

    def __init__(self, measure_order=MEASURES):
        self.measure_order = measure_order

    def fit(self, X: Sequence[Episode], y=None):
        self.policy_ = most_frequent_policy(X, self.measure_order)
        return self

    def predict(self, X: Iterable[str]) -> list[str]:
        check_is_fitted(self, "policy_")
        return [self.policy_.decide(s) for s in X]


@dataclass(frozen=True)
class SearchConfig:
    """Sizes for :func:`grid_search`; defaults are the reference sizes.

    ``evaluation="exact"`` scores a trained policy by its analytic expected
    episode reward instead of simulating ``n_eval_runs`` x ``eval_episodes``.
    """

    n_repeats: int = 10
    n_eval_runs: int = 100
    eval_episodes: int = 2000
    train_episodes: int = 2000
    max_steps: int = 1000
    evaluation: str = "simulate"
    eval_policy: str = "greedy"
    seed: int = 0
    grid: Mapping[str, tuple[float, ...]] = field(default_factory=lambda: dict(PAPER_GRID))

    def __post_init__(self):
        if self.evaluation not in ("simulate", "exact"):
            raise ValueError("evaluation must be 'simulate' or 'exact'")
        if self.eval_policy not in ("greedy", "epsilon_greedy"):
            raise ValueError("eval_policy must be 'greedy' or 'epsilon_greedy'")


def derive_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1, np.uint64)[0])


def _score_one(args) -> float:
    mdp, algorithm, hp, cfg, rep = args
    q = _train(mdp, hp, TrainConfig(cfg.train_episodes, derive_seed(cfg.seed, rngmod.TRAIN, rep),
                                    cfg.max_steps), algorithm)
    policy = q.greedy_policy() if cfg.eval_policy == "greedy" else epsilon_greedy_policy(q, hp.epsilon)
    if cfg.evaluation == "exact":
        return expected_episode_reward(mdp, policy.probabilities(), cfg.max_steps)
    from .evaluate import RolloutBatchConfig, rollout

    res = rollout(mdp, policy, RolloutBatchConfig(cfg.n_eval_runs, cfg.eval_episodes,
                                                  derive_seed(cfg.seed, rngmod.EVALUATE, rep),
                                                  cfg.max_steps), keep_variants=False)
    return res.sample.average


def grid_search(mdp: Mdp, algorithm: str, cfg: SearchConfig | None = None,
                workers: int = 1):
    """Sequential coordinate search over gamma, then epsilon, then alpha.

    Stage 1 tunes gamma with alpha = epsilon = 0.1, stage 2 tunes epsilon with
    the best gamma and alpha = 0.1, stage 3 tunes alpha. A candidate's score is
    the mean over ``n_repeats`` trainings of its policy's average reward.
    Repetition ``r`` uses the same seeds for every candidate; ties keep the
    earlier grid value. Returns ``(best Hyperparams, trace rows)``.
    """
    cfg = cfg or SearchConfig()
    if algorithm not in ALGORITHMS:
        raise ValueError(f"algorithm must be one of {ALGORITHMS}")
    best = {"alpha": 0.1, "gamma": cfg.grid["gamma"][0], "epsilon": 0.1}
    trace = []
    for stage, name in enumerate(("gamma", "epsilon", "alpha"), start=1):
        best_score, best_value = -np.inf, None
        for value in cfg.grid[name]:
            hp = Hyperparams(**{**best, name: value})
            scores = parallel_map(_score_one, [(mdp, algorithm, hp, cfg, r)
                                               for r in range(cfg.n_repeats)], workers)
            score = float(np.mean(scores))
            trace.append({"stage": stage, "parameter": name, "alpha": hp.alpha,
                          "gamma": hp.gamma, "epsilon": hp.epsilon, "score": score,
                          "score_sd": float(np.std(scores, ddof=1)) if len(scores) > 1 else 0.0})
            if score > best_score:
                best_score, best_value = score, value
        best[name] = best_value
    return Hyperparams(**best), trace


def save_json(obj: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def load_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
