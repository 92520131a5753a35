"""Seeded policy rollouts on an MDP, reward samples and episode variants."""

from __future__ import annotations

import csv
import io
import json
import math
from bisect import bisect_right
from collections import Counter
from dataclasses import dataclass, field
from itertools import accumulate
from typing import Iterable, Sequence

import numpy as np

from . import rng as rngmod
from .agents import Policy, UnreachableAction
from .event_log import DISPLAY_NAMES
from .mdp import Mdp
from .parallel import parallel_map
from .rng import UniformStream

Variant = tuple[tuple[str, str, str], ...]


class EmptySample(ValueError):
    pass


@dataclass(frozen=True)
class RolloutBatchConfig:
    n_runs: int = 10_000
    episodes_per_run: int = 100
    seed: int = 0
    max_steps_per_episode: int = 1000

    def __post_init__(self):
        if min(self.n_runs, self.episodes_per_run, self.max_steps_per_episode) < 1:
            raise ValueError("run counts and step cap must be >= 1")


@dataclass
class RewardSample:
    """Per-run results of one policy.

    ``run_means[i]`` is the mean episode reward within run ``i``;
    ``run_totals[i]`` the summed reward of its episodes.
    """

    policy: str
    run_means: list[float]
    run_totals: list[float]
    episodes_per_run: int
    n_truncated: int = 0
    episode_rewards: list[float] | None = None

    def __len__(self):
        return len(self.run_means)

    @property
    def average(self) -> float:
        return average_reward(self)

    @property
    def standard_error(self) -> float:
        if len(self.run_means) < 2:
            return math.nan
        return float(np.std(self.run_means, ddof=1) / math.sqrt(len(self.run_means)))

    def to_dict(self) -> dict:
        doc = {"format": "incident-rl/reward-sample", "policy": self.policy,
               "episodes_per_run": self.episodes_per_run,
               "n_truncated": self.n_truncated,
               "run_means": self.run_means, "run_totals": self.run_totals}
        if self.episode_rewards is not None:
            doc["episode_rewards"] = self.episode_rewards
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "RewardSample":
        return cls(doc["policy"], [float(x) for x in doc["run_means"]],
                   [float(x) for x in doc["run_totals"]], int(doc["episodes_per_run"]),
                   int(doc.get("n_truncated", 0)), doc.get("episode_rewards"))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RewardSample":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class RolloutResult:
    sample: RewardSample
    variants: Counter = field(default_factory=Counter)

    @property
    def n_episodes(self) -> int:
        return len(self.sample) * self.sample.episodes_per_run


def average_reward(sample: RewardSample) -> float:
    if not sample.run_means:
        raise EmptySample("reward sample has no runs")
    return float(np.mean(sample.run_means))


def _compile_policy(mdp: Mdp, policy: Policy):
    arr = mdp.arrays
    aidx = {a: j for j, a in enumerate(arr.actions)}
    table = []
    for i, s in enumerate(arr.states[:-1]):
        if s not in policy.choices:
            table.append(None)
            continue
        picks, explore = [], []
        for src, dst in ((policy.choices[s], picks), (policy.explore.get(s, ()), explore)):
            for a in src:
                j = aidx.get(a)
                if j is None or not arr.mask[i, j]:
                    # only an error once the state is actually visited
                    dst.append(-1)
                else:
                    dst.append(j)
        table.append((tuple(picks), tuple(explore)))
    return table


def _run_batch(args):
    mdp, policy, cfg, runs, keep_variants, keep_episodes = args
    arr = mdp.arrays
    n = arr.n
    samplers = arr.samplers
    init_cum = list(accumulate(arr.init.tolist()))
    table = _compile_policy(mdp, policy)
    eps = policy.epsilon
    out = []
    for run in runs:
        u = UniformStream(cfg.seed, rngmod.ROLLOUT, run)
        codes: Counter = Counter()
        rewards = []
        truncated = 0
        for _ in range(cfg.episodes_per_run):
            s = min(bisect_right(init_cum, u()), n - 1)
            total = 0.0
            path = []
            for _step in range(cfg.max_steps_per_episode):
                entry = table[s]
                if entry is None:
                    raise UnreachableAction(
                        f"policy {policy.name or policy.kind!r} has no action for state {arr.states[s]!r}")
                picks, explore = entry
                if eps > 0 and u() < eps:
                    a = explore[u.below(len(explore))]
                else:
                    a = picks[0] if len(picks) == 1 else picks[u.below(len(picks))]
                if a < 0:
                    raise UnreachableAction(
                        f"policy {policy.name or policy.kind!r} picks an action unavailable "
                        f"in state {arr.states[s]!r}")
                nxt, cum, rew = samplers[(s, a)]
                k = min(bisect_right(cum, u()), len(nxt) - 1)
                s2 = nxt[k]
                total += rew[k]
                if keep_variants:
                    path.append((s, a, s2))
                if s2 == n:
                    break
                s = s2
            else:
                truncated += 1
            rewards.append(total)
            if keep_variants:
                codes[tuple(path)] += 1
        out.append((math.fsum(rewards), rewards if keep_episodes else None, codes, truncated))
    return out


def rollout(mdp: Mdp, policy: Policy, cfg: RolloutBatchConfig | None = None,
            workers: int = 1, keep_variants: bool = True,
            keep_episode_rewards: bool = False) -> RolloutResult:
    """Simulate ``n_runs`` runs of ``episodes_per_run`` episodes under ``policy``.

    Each run draws from its own substream, so results do not depend on
    ``workers``. Episodes hitting the step cap keep their accrued reward and
    are counted in ``sample.n_truncated``.
    """
    cfg = cfg or RolloutBatchConfig()
    runs = list(range(cfg.n_runs))
    n_chunks = max(1, min(len(runs), workers * 4)) if workers > 1 else 1
    chunks = [runs[i::n_chunks] for i in range(n_chunks)]
    parts = parallel_map(_run_batch, [(mdp, policy, cfg, c, keep_variants, keep_episode_rewards)
                                      for c in chunks], workers)
    by_run = {}
    for chunk, res in zip(chunks, parts):
        by_run.update(zip(chunk, res))

    arr = mdp.arrays
    totals, means, episodes = [], [], []
    codes: Counter = Counter()
    truncated = 0
    for run in runs:
        total, eps_rewards, run_codes, trunc = by_run[run]
        totals.append(total)
        means.append(total / cfg.episodes_per_run)
        if eps_rewards is not None:
            episodes.extend(eps_rewards)
        codes.update(run_codes)
        truncated += trunc
    variants: Counter = Counter()
    for path, c in codes.items():
        variants[tuple((arr.states[s], arr.actions[a], arr.states[s2]) for s, a, s2 in path)] += c
    sample = RewardSample(policy.name or policy.kind, means, totals, cfg.episodes_per_run,
                          truncated, episodes if keep_episode_rewards else None)
    return RolloutResult(sample, variants)


def top_variants(table: Counter, k: int) -> list[tuple[Variant, int]]:
    """``k`` most frequent variants, ties broken by lexicographic variant order."""
    return sorted(table.items(), key=lambda kv: (-kv[1], kv[0]))[:k]


def format_variant(variant: Variant) -> str:
    return "".join(f"({s}, {DISPLAY_NAMES.get(a, a)}, {s2})" for s, a, s2 in variant)


def variants_csv(table: Counter, k: int | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "variant", "frequency"])
    ranked = top_variants(table, len(table) if k is None else k)
    for i, (v, c) in enumerate(ranked, 1):
        w.writerow([i, format_variant(v), c])
    return buf.getvalue()


def aligned_table(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    rows = [[str(c) for c in r] for r in rows]
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h)
              for i, h in enumerate(header)]
    sep = "+" + "+".join("-" * (w + 2) for w in widths) + "+"
    fmt = lambda r: "| " + " | ".join(c.ljust(w) for c, w in zip(r, widths)) + " |"
    return "\n".join([sep, fmt(header), sep, *(fmt(r) for r in rows), sep])


def reward_rows(samples: Sequence[RewardSample]) -> list[tuple]:
    return [(s.policy, f"{s.average:.3f}", f"{s.average * s.episodes_per_run:.3f}",
             f"{s.standard_error:.4f}", len(s), s.n_truncated) for s in samples]


REWARD_HEADER = ("Policy", "Average reward (per episode)", "Average reward (per run)",
                 "Std. error", "Runs", "Truncated episodes")


def evaluation_report(result: RolloutResult, top_k: int = 5) -> str:
    s = result.sample
    lines = [f"Policy: {s.policy}",
             f"Runs: {len(s)} x {s.episodes_per_run} episodes",
             aligned_table(REWARD_HEADER, reward_rows([s])), "",
             f"Top {top_k} variants",
             aligned_table(("Path", "Frequency"),
                           [(format_variant(v), c) for v, c in top_variants(result.variants, top_k)])]
    return "\n".join(lines) + "\n"
